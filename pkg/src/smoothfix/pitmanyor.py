"""Size-bias equation Ybar = A * Ybar' + Y and its shot-noise representation.

A law of Y with mean m solves the size-bias equation iff it is the fixed point
of the Poisson shot-noise transform

    Y = m * gamma0 + sum_i Y_i h(tau_i),   tau a unit-rate Poisson flow,

where gamma0 = P{A = 0} and h is the generalized inverse of the inverse-moment
tail H(x) = int_[x, inf) z^{-1} P_A(dz). Conversely a profile h with intensity
lam gives P_A(dx) = -lam * x * dH(x) on (0, inf).

The laws of A handled here are finite mixtures of atoms and uniform pieces
(tabulated CDFs with linear interpolation are uniform pieces). For these H is
a sum of steps and logarithms, so h is made of constant and exponential
segments and both directions of the correspondence are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import criteria
from .decay import DecayProfile, SegmentDecay, TabulatedDecay, decay_from_json
from .errors import (
    ConfigError,
    DivergentInverseMoment,
    MassDeficit,
    NoNontrivialSolution,
    ZeroMean,
)
from .estimates import Estimate
from .models import DEFAULT_TAIL_TOL, _parse_real
from .montecarlo import (
    EmpiricalDist,
    iterate_population,
    ks_distance,
    sample_shot_noise,
    size_bias,
)

MASS_TOL = 1e-9
INTEGRAL_TOL = 1e-6
DEFAULT_RESOLUTION = 4096
KS_THRESHOLD = 0.02


def _xlogx_minus_x(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = z * np.log(z) - z
    return np.where(z > 0, v, 0.0)


@dataclass(frozen=True)
class NuLaw:
    """Law on [0, inf): atoms ``(x, p)`` plus uniform pieces ``(a, b, mass)``."""

    atoms: tuple = ()
    pieces: tuple = ()

    def __post_init__(self):
        merged: dict[float, float] = {}
        for x, p in self.atoms:
            x, p = float(x), float(p)
            if x < 0 or p < 0 or not math.isfinite(x):
                raise ConfigError("atoms need finite nonnegative location and mass")
            if p > 0:
                merged[x] = merged.get(x, 0.0) + p
        pieces = []
        for a, b, q in self.pieces:
            a, b, q = float(a), float(b), float(q)
            if not 0 <= a < b < math.inf or q < 0:
                raise ConfigError("uniform pieces need 0 <= a < b < inf and nonnegative mass")
            if q > 0:
                pieces.append((a, b, q))
        total = sum(merged.values()) + sum(q for _, _, q in pieces)
        if abs(total - 1.0) > MASS_TOL:
            raise ConfigError(f"law of A must have total mass 1 (got {total!r})")
        object.__setattr__(self, "atoms", tuple(sorted(merged.items())))
        object.__setattr__(self, "pieces", tuple(sorted(pieces)))

    # constructors -----------------------------------------------------
    @classmethod
    def uniform(cls, low: float = 0.0, high: float = 1.0) -> "NuLaw":
        return cls((), ((low, high, 1.0),))

    @classmethod
    def point(cls, c: float) -> "NuLaw":
        return cls(((c, 1.0),))

    @classmethod
    def from_cdf(cls, x, F) -> "NuLaw":
        """Tabulated CDF, linear between knots; F[0] is an atom at x[0]."""
        x = np.asarray(x, dtype=float)
        F = np.asarray(F, dtype=float)
        if x.ndim != 1 or x.shape != F.shape or x.size < 1:
            raise ConfigError("tabulated CDF needs matching 1-d arrays")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(F) < 0) or x[0] < 0:
            raise ConfigError("tabulated CDF needs increasing x >= 0 and nondecreasing F")
        if abs(F[-1] - 1.0) > MASS_TOL or F[0] < 0:
            raise ConfigError("tabulated CDF must end at 1")
        pieces = [(x[j], x[j + 1], F[j + 1] - F[j]) for j in range(x.size - 1)]
        return cls(((x[0], F[0]),), tuple(pieces))

    @classmethod
    def from_json(cls, obj) -> "NuLaw":
        if isinstance(obj, NuLaw):
            return obj
        if isinstance(obj, str):
            key = obj.replace(" ", "").lower()
            if key in ("uniform(0,1)", "uniform"):
                return cls.uniform()
            raise ConfigError(f"unknown named law {obj!r}")
        if not isinstance(obj, dict):
            raise ConfigError("law of A must be a string or an object")
        name = obj.get("name")
        if name is not None:
            name = str(name).lower()
            if name == "uniform":
                return cls.uniform(_parse_real(obj.get("low", 0)), _parse_real(obj.get("high", 1)))
            if name in ("point", "delta"):
                return cls.point(_parse_real(obj["at"]))
            raise ConfigError(f"unknown named law {name!r}")
        if "cdf" in obj:
            return cls.from_cdf([_parse_real(v) for v in obj["cdf"]["x"]],
                                [_parse_real(v) for v in obj["cdf"]["F"]])
        atoms = [(_parse_real(x), _parse_real(p)) for x, p in obj.get("atoms", [])]
        pieces = [(_parse_real(a), _parse_real(b), _parse_real(q)) for a, b, q in obj.get("pieces", [])]
        if not atoms and not pieces:
            raise ConfigError("law of A has neither atoms nor pieces")
        return cls(tuple(atoms), tuple(pieces))

    def to_json(self) -> dict:
        return {"atoms": [[x, p] for x, p in self.atoms],
                "pieces": [[a, b, q] for a, b, q in self.pieces]}

    # functionals ------------------------------------------------------
    @property
    def mass_at_zero(self) -> float:
        return sum(p for x, p in self.atoms if x == 0.0)

    @property
    def support_max(self) -> float:
        tops = [x for x, _ in self.atoms] + [b for _, b, _ in self.pieces]
        return max(tops)

    def mean(self) -> float:
        return (sum(x * p for x, p in self.atoms)
                + sum(q * 0.5 * (a + b) for a, b, q in self.pieces))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for c, p in self.atoms:
            out = out + p * (x >= c)
        for a, b, q in self.pieces:
            out = out + q * np.clip((x - a) / (b - a), 0.0, 1.0)
        return out if out.ndim else float(out)

    def inverse_moment_tail(self, x):
        """H(x) = int_[x, inf) z^{-1} P_A(dz) for x > 0."""
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise ValueError("inverse moment tail is defined for x > 0")
        out = np.zeros(x.shape)
        for c, p in self.atoms:
            if c > 0:
                out = out + (p / c) * (x <= c)
        for a, b, q in self.pieces:
            dens = q / (b - a)
            lo = np.maximum(x, a)
            out = out + np.where(lo < b, dens * np.log(b / np.where(lo < b, lo, b)), 0.0)
        return out if out.ndim else float(out)

    def log_moments(self) -> tuple[float, float]:
        """(E log A, E |log A|); -inf and inf when A has an atom at 0."""
        if self.mass_at_zero > 0:
            return -math.inf, math.inf
        mean = sum(p * math.log(x) for x, p in self.atoms)
        absmean = sum(p * abs(math.log(x)) for x, p in self.atoms)
        for a, b, q in self.pieces:
            d = q / (b - a)
            F = _xlogx_minus_x
            mean += d * float(F(b) - F(a))
            lo_part = float(F(min(b, 1.0)) - F(a)) if a < 1.0 else 0.0
            hi_part = float(F(b) - F(max(a, 1.0))) if b > 1.0 else 0.0
            absmean += d * (hi_part - lo_part)
        return mean, absmean

    def sample(self, n: int, rng) -> np.ndarray:
        locs = [x for x, _ in self.atoms]
        probs = [p for _, p in self.atoms] + [q for _, _, q in self.pieces]
        probs = np.asarray(probs) / np.sum(probs)
        comp = rng.choice(probs.size, size=int(n), p=probs)
        u = rng.random(int(n))
        out = np.empty(int(n))
        k = len(locs)
        if k:
            lo = comp < k
            out[lo] = np.asarray(locs)[comp[lo]]
        if self.pieces:
            a = np.array([pc[0] for pc in self.pieces])
            b = np.array([pc[1] for pc in self.pieces])
            hi = comp >= k
            j = comp[hi] - k
            out[hi] = a[j] + u[hi] * (b[j] - a[j])
        return out


@dataclass(frozen=True)
class PitmanYorProblem:
    """Law of A (``nu``), gamma0 = P{A = 0} and the target mean m."""

    nu: NuLaw
    gamma0: float
    m: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma0 < 1.0:
            raise ConfigError("gamma0 must lie in [0, 1)")
        if not self.m > 0:
            raise ConfigError("target mean m must be positive")
        if abs(self.nu.mass_at_zero - self.gamma0) > MASS_TOL:
            raise ConfigError("gamma0 disagrees with the atom of nu at zero")

    @classmethod
    def build(cls, nu, gamma0: float | None = None, m: float = 1.0) -> "PitmanYorProblem":
        """``nu`` is the full law of A, or its law on (0, inf) when gamma0 > 0 is given
        and ``nu`` itself has no atom at zero."""
        nu = NuLaw.from_json(nu)
        if gamma0 is None or nu.mass_at_zero > 0:
            g = nu.mass_at_zero
            if gamma0 is not None and abs(g - gamma0) > MASS_TOL:
                raise ConfigError("gamma0 disagrees with the atom of nu at zero")
            return cls(nu, g, m)
        g = float(gamma0)
        if not 0.0 <= g < 1.0:
            raise ConfigError("gamma0 must lie in [0, 1)")
        atoms = [(x, (1 - g) * p) for x, p in nu.atoms] + ([(0.0, g)] if g > 0 else [])
        pieces = [(a, b, (1 - g) * q) for a, b, q in nu.pieces]
        return cls(NuLaw(tuple(atoms), tuple(pieces)), g, m)

    @classmethod
    def from_json(cls, obj) -> "PitmanYorProblem":
        if not isinstance(obj, dict) or "nu" not in obj:
            raise ConfigError("problem needs a 'nu' entry")
        g = obj.get("gamma0")
        return cls.build(obj["nu"], None if g is None else _parse_real(g),
                         _parse_real(obj.get("m", 1.0)))

    def to_json(self) -> dict:
        return {"nu": self.nu.to_json(), "gamma0": self.gamma0, "m": self.m}


def _as_law(problem) -> NuLaw:
    if isinstance(problem, PitmanYorProblem):
        return problem.nu
    return NuLaw.from_json(problem)


# ---------------------------------------------------------------------------
# nu <-> h


def nu_to_h(problem, resolution: int = DEFAULT_RESOLUTION) -> SegmentDecay:
    """Profile h with h^{<-} = H, built by walking the support of A downwards.

    An atom at c with mass p gives a flat piece of height c and length p / c;
    a stretch where the law has constant density D gives an exponential
    piece x_k * exp(-u / D). The identity int h = 1 - gamma0 is checked, and
    H is compared with the generalized inverse of h on a log grid of
    ``resolution`` points.
    """
    law = _as_law(problem)
    gamma0 = law.mass_at_zero
    atoms = {x: p for x, p in law.atoms if x > 0}
    knots = set(atoms)
    for a, b, _ in law.pieces:
        knots.update((a, b))
    knots = sorted(knots, reverse=True)
    segs = []
    for k, xk in enumerate(knots):
        if xk == 0.0:
            break
        if xk in atoms:
            segs.append((atoms[xk] / xk, "const", xk, None))
        nxt = knots[k + 1] if k + 1 < len(knots) else 0.0
        dens = sum(q / (b - a) for a, b, q in law.pieces if a <= nxt and b >= xk)
        if dens > 0:
            length = math.inf if nxt == 0.0 else dens * math.log(xk / nxt)
            segs.append((length, "exp", xk, dens))
            if math.isinf(length):
                break
    h = SegmentDecay(segs)
    total = h.integral()
    if not math.isfinite(total) or abs(total - (1.0 - gamma0)) > INTEGRAL_TOL:
        raise DivergentInverseMoment(
            f"int h = {total!r} differs from 1 - gamma0 = {1.0 - gamma0!r}")
    if segs:
        top = law.support_max
        x = top * np.geomspace(1e-8, 1.0, int(resolution), endpoint=False)
        H = law.inverse_moment_tail(x)
        hinv = np.asarray(h.inverse(x), dtype=float)
        # jumps of H sit at atoms, where the two one-sided values differ
        ok = np.isclose(H, hinv, rtol=1e-9, atol=1e-12)
        on_atom = np.isin(x, list(atoms))
        if not np.all(ok | on_atom):
            raise DivergentInverseMoment("generalized inverse of h does not reproduce H")
    return h


def tabulate_inverse(problem, resolution: int = DEFAULT_RESOLUTION, lo: float = 1e-8):
    """H on a log grid below the top of the support, for plotting."""
    law = _as_law(problem)
    x = law.support_max * np.geomspace(lo, 1.0, int(resolution))
    return x, law.inverse_moment_tail(x)


def h_to_nu(h: DecayProfile, lam: float = 1.0, gamma0: float | None = None,
            resolution: int = 64) -> NuLaw:
    """Law of A given by P_A(dx) = -lam * x * dh^{<-}(dx) plus the atom gamma0 at 0.

    Constant pieces of h become atoms and exponential pieces uniform pieces,
    exactly. A linearly interpolated profile has linear density on each
    piece; it is split into ``resolution`` uniform sub-pieces with the exact
    masses.
    """
    if not lam > 0:
        raise ConfigError("intensity must be positive")
    h = decay_from_json(h)
    mass = lam * h.integral()
    g = 1.0 - mass
    if not math.isfinite(mass) or mass <= 0.0 or g < -MASS_TOL:
        raise MassDeficit(f"lam * int h = {mass!r} must lie in (0, 1]")
    if gamma0 is not None and abs(g - gamma0) > MASS_TOL:
        raise MassDeficit(f"lam * int h + gamma0 = {mass + gamma0!r} differs from 1")
    atoms: list[tuple[float, float]] = []
    pieces: list[tuple[float, float, float]] = []
    if isinstance(h, SegmentDecay):
        for start, end, kind, a, d in h.segments:
            L = end - start
            if kind == "const":
                atoms.append((a, lam * a * L))
            else:
                low = 0.0 if math.isinf(L) else a * math.exp(-L / d)
                pieces.append((low, a, lam * d * (a - low)))
    elif isinstance(h, TabulatedDecay):
        for t0, t1, a, b in zip(h.t[:-1], h.t[1:], h.h[:-1], h.h[1:]):
            L = t1 - t0
            if a == b:
                atoms.append((a, lam * a * L))
                continue
            edges = np.linspace(b, a, int(resolution) + 1)
            # density lam * x * L / (a - b) on [b, a]
            cum = lam * L * edges**2 / (2.0 * (a - b))
            for j in range(int(resolution)):
                pieces.append((edges[j], edges[j + 1], cum[j + 1] - cum[j]))
    else:
        raise ConfigError(f"unsupported decay profile {type(h).__name__}")
    atoms = [(x, p) for x, p in atoms if x > 0 and p > 0]
    # renormalize rounding so the masses sum to one exactly
    total = sum(p for _, p in atoms) + sum(q for _, _, q in pieces)
    fix = mass / total if total > 0 else 1.0
    atoms = [(x, p * fix) for x, p in atoms]
    pieces = [(a, b, q * fix) for a, b, q in pieces]
    if g > 0:
        atoms.append((0.0, max(g, 0.0)))
    return NuLaw(tuple(atoms), tuple(pieces))


def cdf_distance(a: NuLaw, b: NuLaw, points: int = 4096) -> float:
    """Sup |F_a - F_b| on a grid that avoids the atoms of both laws."""
    top = max(a.support_max, b.support_max)
    x = np.concatenate([[0.0], top * np.geomspace(1e-9, 1.25, points)])
    jumps = {c for c, _ in a.atoms} | {c for c, _ in b.atoms}
    x = x[~np.isin(x, list(jumps))]
    return float(np.max(np.abs(a.cdf(x) - b.cdf(x))))


# ---------------------------------------------------------------------------
# existence and solution


def check_existence(problem, mc_budget: int = 10_000, rng=None) -> criteria.DriftClass:
    """Drift of T_n = sum log A_k; NegativeDrift iff a law other than delta_0 solves."""
    law = _as_law(problem)
    rng = rng or np.random.default_rng()
    mean, absmean = law.log_moments()
    if law.mass_at_zero > 0:
        # the walk jumps to -inf at the first zero factor
        return criteria.DriftClass(criteria.NEGATIVE, Estimate.exact(-math.inf), None,
                                   False, True, 0)

    def sampler(n, g):
        with np.errstate(divide="ignore"):
            return np.log(law.sample(n, g))

    return criteria.classify_drift(sampler, max(int(mc_budget), 16), rng,
                                   exact_mean=mean, exact_abs_mean=absmean)


def solve_pitman_yor(problem: PitmanYorProblem, replicas: int = 100_000, iterations: int = 30,
                     rng=None, seed_pool: EmpiricalDist | None = None,
                     tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> EmpiricalDist:
    """Population iteration of Y = m gamma0 + sum Y_i h(tau_i), projected to mean m."""
    rng = rng or np.random.default_rng()
    drift = check_existence(problem, rng=rng)
    if drift.verdict != criteria.NEGATIVE:
        raise NoNontrivialSolution(f"log A walk is {drift.verdict}; only delta_0 solves")
    h = nu_to_h(problem)
    m = problem.m
    shift = m * problem.gamma0
    if seed_pool is None:
        seed_pool = EmpiricalDist(rng.exponential(m, int(replicas)), None, f"Exp(mean {m})")

    def step(pool, g):
        return sample_shot_noise(h, 1.0, pool, shift, int(replicas), g, tail_tol, workers)

    res = iterate_population(None, seed_pool, int(iterations), int(replicas), rng,
                             target_mean=m, tail_tol=tail_tol, workers=workers, step=step)
    diag = {
        "ks_trace": [float(v) for v in res.ks_trace],
        "mean_trace": [float(v) for v in res.mean_trace],
        "stabilized": bool(res.stabilized),
        "drift": drift.verdict,
    }
    return EmpiricalDist(res.pool.samples, res.pool.weights, "pitman-yor", diag)


@dataclass(frozen=True)
class SizeBiasCheck:
    ks: float
    passed: bool
    threshold: float
    replicas: int
    left_mean: float
    right_mean: float
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return {"ks": self.ks, "passed": self.passed, "threshold": self.threshold,
                "replicas": self.replicas, "left_mean": self.left_mean,
                "right_mean": self.right_mean}


def verify_size_bias_equation(mu: EmpiricalDist, problem, replicas: int = 100_000, rng=None,
                              threshold: float = KS_THRESHOLD) -> SizeBiasCheck:
    """Two-sample KS between Ybar and A * Ybar' + Y with independent draws."""
    rng = rng or np.random.default_rng()
    if not mu.mean() > 0:
        raise ZeroMean("size-bias equation needs a positive mean")
    law = _as_law(problem)
    n = int(replicas)
    left = size_bias(mu, rng, n)
    right_bar = size_bias(mu, rng, n)
    a = law.sample(n, rng)
    y = mu.draw(n, rng)
    right = EmpiricalDist(a * right_bar.samples + y, None, "A*Ybar+Y")
    ks = ks_distance(left, right)
    return SizeBiasCheck(ks, bool(ks < threshold), float(threshold), n,
                         left.mean(), right.mean())
