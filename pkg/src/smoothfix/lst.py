"""Laplace-Stieltjes transforms on a grid.

An ``LSTGrid`` stores 1 - phi(s) on ascending log-spaced arguments, which
keeps full relative precision near s = 0 where the fixed-point structure
lives. Between grid points the tail 1 - phi is interpolated monotonically
in log-log coordinates; below the grid it follows the fitted power law
m * s**alpha and above the grid it is held constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import quad_vec
from scipy.interpolate import PchipInterpolator

from . import parallel
from .errors import (
    DegenerateAtZero,
    HypothesesViolated,
    IdenticalInputs,
    MeanMismatch,
    NoCharacteristicFunction,
    NoConvergence,
    ProductUnderflow,
    QuadratureFailure,
)
from .estimates import Estimate
from .models import DEFAULT_TAIL_TOL, ShotNoise, WeightModel, sum_weights_moment, t_beta
from .montecarlo import EmpiricalDist, population_step, sample_positive_stable

LOG_FLOOR = math.log(1e-300)
TAIL_FLOOR = 1e-300
FIT_POINTS = 10
MEAN_TOL = 1e-6
CONVEXITY_TOL = 1e-9


def default_grid(points: int = 200, lo: float = 1e-6, hi: float = 1e3) -> np.ndarray:
    return np.geomspace(lo, hi, points)


@dataclass(frozen=True)
class AlphaM:
    alpha: float
    m: float
    residual: float

    def to_json(self):
        return {"alpha": self.alpha, "m": self.m, "residual": self.residual}


@dataclass(frozen=True, eq=False)
class LSTGrid:
    """Transform phi on a grid, stored as ``tail`` = 1 - phi(s)."""

    s: np.ndarray
    tail: np.ndarray
    sample: EmpiricalDist | None = None
    label: str = ""
    alpha: float | None = None

    def __post_init__(self):
        s = np.ascontiguousarray(self.s, dtype=float).reshape(-1)
        t = np.ascontiguousarray(self.tail, dtype=float).reshape(-1)
        if s.size < 2 or s.shape != t.shape:
            raise ValueError("grid needs at least two arguments and matching values")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("grid arguments must be positive and strictly increasing")
        if np.any(~np.isfinite(t)):
            raise ValueError("transform values must be finite")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "tail", np.clip(t, 0.0, 1.0))

    # constructors -----------------------------------------------------
    @classmethod
    def from_values(cls, s, phi, sample=None, label="", alpha=None):
        return cls(s, 1.0 - np.asarray(phi, dtype=float), sample, label, alpha)

    @classmethod
    def from_tail_function(cls, fn, s=None, sample=None, label="", alpha=None):
        s = default_grid() if s is None else np.asarray(s, dtype=float)
        return cls(s, fn(s), sample, label, alpha)

    @classmethod
    def from_law(cls, law, s=None):
        """Grid of a closed-form law (uses its cancellation-free ``lst_tail``)."""
        s = default_grid() if s is None else np.asarray(s, dtype=float)
        alpha = getattr(law, "alpha", None)
        if alpha is None and math.isfinite(law.mean):
            alpha = 1.0
        return cls(s, law.lst_tail(s), None, str(law.to_json()), alpha)

    @classmethod
    def from_sample(cls, dist: EmpiricalDist, s=None):
        s = default_grid() if s is None else np.asarray(s, dtype=float)
        return cls(s, dist.lst_tail(s), dist, dist.lineage, 1.0)

    # evaluation -------------------------------------------------------
    @property
    def values(self) -> np.ndarray:
        return 1.0 - self.tail

    @cached_property
    def _interp(self):
        return PchipInterpolator(np.log(self.s), np.log(np.maximum(self.tail, TAIL_FLOOR)))

    @cached_property
    def alpha_m(self) -> AlphaM:
        return estimate_alpha_m(self)

    @cached_property
    def _below(self):
        """(alpha, y0, slope): below the grid tail = s**alpha * (y0 + slope * (s - s0)).

        The index is the declared one when known; fitting it instead lets
        a slightly-off slope feed back through repeated Picard steps.
        """
        alpha = self.alpha
        if alpha is None:
            try:
                alpha = self.alpha_m.alpha
            except DegenerateAtZero:
                alpha = 1.0
        y = self.tail[:2] / self.s[:2] ** alpha
        slope = (y[1] - y[0]) / (self.s[1] - self.s[0])
        return alpha, y[0], slope

    def tail_at(self, s):
        """1 - phi at arbitrary nonnegative arguments."""
        s = np.asarray(s, dtype=float)
        out = np.empty(s.shape)
        lo = s < self.s[0]
        hi = s > self.s[-1]
        mid = ~(lo | hi)
        if np.any(mid):
            out[mid] = np.exp(self._interp(np.log(s[mid])))
        if np.any(lo):
            alpha, y0, slope = self._below
            x = np.maximum(s[lo], 0.0)
            out[lo] = x**alpha * np.maximum(y0 + slope * (x - self.s[0]), 0.0)
        out[hi] = self.tail[-1]
        return np.clip(out, 0.0, 1.0)

    def __call__(self, s):
        return 1.0 - self.tail_at(s)

    def regrid(self, s):
        return LSTGrid(s, self.tail_at(np.asarray(s, dtype=float)), self.sample, self.label, self.alpha)

    def sup_distance(self, other) -> float:
        """Sup over this grid of |phi - other|; ``other`` is an LSTGrid or a callable phi."""
        ref = other(self.s)
        return float(np.max(np.abs(self.values - ref)))

    # invariants -------------------------------------------------------
    def check_invariants(self, tol: float = CONVEXITY_TOL) -> dict:
        phi = self.values
        slopes = np.diff(phi) / np.diff(self.s)
        monotone = bool(np.all(np.diff(phi) <= tol))
        convex = bool(np.all(np.diff(slopes) * np.diff(self.s)[1:] >= -tol))
        try:
            m = self.alpha_m.m
            anchored = bool(phi[0] >= 1.0 - 10.0 * m * self.s[0] ** self.alpha_m.alpha)
        except DegenerateAtZero:
            anchored = True
        return {"nonincreasing": monotone, "convex": convex, "anchored": anchored}

    # persistence ------------------------------------------------------
    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("s,phi\n")
            for a, t in zip(self.s, self.tail):
                fh.write(f"{float(a)!r},{float(1.0 - t)!r}\n")

    def plot_data(self):
        """(s, 1 - phi) pairs for log-log plotting."""
        return np.column_stack([self.s, self.tail])

    def to_json(self):
        return {"s": self.s.tolist(), "phi": self.values.tolist(), "label": self.label}


# ---------------------------------------------------------------------------
# alpha, m


def estimate_alpha_m(lst: LSTGrid) -> AlphaM:
    s = lst.s[:FIT_POINTS]
    t = lst.tail[:FIT_POINTS]
    if s.size < 2 or np.any(t <= 1e-14):
        raise DegenerateAtZero("1 - phi vanishes on the smallest grid arguments")
    x, y = np.log(s), np.log(t)
    slope, _ = np.polyfit(x, y, 1)
    alpha = float(min(max(slope, 1e-12), 1.0))
    logm = float(np.mean(y - alpha * x))
    resid = float(np.max(np.abs(y - alpha * x - logm)))
    return AlphaM(alpha, math.exp(logm), resid)


# ---------------------------------------------------------------------------
# Picard iteration


def _log_phi(lst: LSTGrid, args) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log1p(-lst.tail_at(args)), LOG_FLOOR)


def _step_exact(lst: LSTGrid, law) -> np.ndarray:
    logs = _log_phi(lst, np.outer(law.values, lst.s))
    return law.probs @ -np.expm1(law.counts @ logs)


def _step_mc(lst: LSTGrid, model: WeightModel, mc_budget: int, rng, tail_tol, workers):
    g_pts = lst.s.size

    def chunk(g, size):
        batch = model.sample_batch(size, g, tail_tol)
        logs = _log_phi(lst, np.outer(batch.weights, lst.s))
        per = np.zeros((size, g_pts))
        np.add.at(per, batch.owner, logs)
        return (-np.expm1(per)).sum(axis=0)

    parts = parallel.chunked_map(chunk, int(mc_budget), rng, workers=workers, chunk=4096)
    return np.sum(parts, axis=0) / int(mc_budget)


def _step_poisson(lst: LSTGrid, model: ShotNoise) -> np.ndarray:
    h = model.h
    s = lst.s

    def f(t):
        return lst.tail_at(s * float(h(np.array([t]))[0]))

    end = h.support_end
    pts = sorted({b for b in h.breakpoints() if 0.0 < b < end})
    pieces = []
    if math.isfinite(end):
        pieces.append((0.0, end, pts or None))
    else:
        last = pts[-1] if pts else 0.0
        if last > 0:
            pieces.append((0.0, last, pts[:-1] or None))
        pieces.append((last, math.inf, None))
    total = np.zeros(s.size)
    for a, b, p in pieces:
        kw = {"points": p} if p else {}
        res, err, info = quad_vec(f, a, b, epsabs=1e-12, epsrel=1e-10, limit=4000,
                                  full_output=True, **kw)
        if not info.success or not np.all(np.isfinite(res)):
            raise QuadratureFailure(f"Poisson exponent quadrature failed on [{a}, {b}]: {info.message}")
        total += res
    return -np.expm1(-model.intensity * total)


def picard_step(lst: LSTGrid, model: WeightModel, mc_budget: int = 10_000, rng=None,
                method: str = "auto", tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> LSTGrid:
    """One application of phi -> E prod phi(X_i s) on the grid.

    ``method``: "exact" enumerates the realization law, "poisson" uses the
    exponential formula for shot noise, "mc" averages over ``mc_budget``
    sampled realizations; "auto" picks the first that applies.
    """
    if method == "auto":
        if isinstance(model, ShotNoise):
            method = "poisson"
        elif model.realization_law() is not None:
            method = "exact"
        else:
            method = "mc"
    if method == "poisson":
        if not isinstance(model, ShotNoise):
            raise ValueError("the Poisson formula needs a shot-noise model")
        tail = _step_poisson(lst, model)
    elif method == "exact":
        law = model.realization_law()
        if law is None:
            raise ValueError("model has no finite realization law")
        tail = _step_exact(lst, law)
    elif method == "mc":
        tail = _step_mc(lst, model, mc_budget, rng or np.random.default_rng(), tail_tol, workers)
    else:
        raise ValueError(f"unknown method {method!r}")
    if np.all(tail >= 1.0):
        raise ProductUnderflow("transform underflowed to 0 on the entire grid")
    return LSTGrid(lst.s, tail, None, f"picard({lst.label})", lst.alpha)


@dataclass(frozen=True)
class IterationResult:
    lst: LSTGrid
    changes: np.ndarray
    errors: np.ndarray | None
    converged: bool
    iterations: int
    extra: dict = field(default_factory=dict)

    def trace_rows(self):
        errs = self.errors if self.errors is not None else [None] * len(self.changes)
        return [(k + 1, float(c), None if e is None else float(e))
                for k, (c, e) in enumerate(zip(self.changes, errs))]


def picard_iterate(seed_lst: LSTGrid, model: WeightModel, max_iter: int = 500, tol: float = 1e-9,
                   mc_budget: int = 10_000, rng=None, method: str = "auto", reference=None,
                   raise_on_failure: bool = True, tail_tol: float = DEFAULT_TAIL_TOL,
                   workers=None) -> IterationResult:
    """Iterate the Picard map until the sup-grid change drops below ``tol``.

    ``reference`` (LSTGrid or callable phi) adds a sup-error column to the
    trace. On failure raises NoConvergence carrying the last iterate and
    the trace, unless ``raise_on_failure`` is false.
    """
    rng = rng or np.random.default_rng()
    cur = seed_lst
    changes, errors = [], []
    converged = False
    for _ in range(int(max_iter)):
        nxt = picard_step(cur, model, mc_budget, rng, method, tail_tol, workers)
        changes.append(float(np.max(np.abs(nxt.tail - cur.tail))))
        if reference is not None:
            errors.append(nxt.sup_distance(reference))
        cur = nxt
        if changes[-1] < tol:
            converged = True
            break
    result = IterationResult(cur, np.array(changes), np.array(errors) if reference is not None else None,
                             converged, len(changes))
    if not converged and raise_on_failure:
        raise NoConvergence(f"sup change {changes[-1]:.3g} above tol {tol:g} after {max_iter} iterations",
                            best=result, trace=result.changes)
    return result


# ---------------------------------------------------------------------------
# r_delta metric and contraction


def _cf_source(handle):
    if isinstance(handle, LSTGrid):
        if handle.sample is None:
            raise NoCharacteristicFunction("grid has no sample backing its characteristic function")
        return handle.sample
    if isinstance(handle, EmpiricalDist) or hasattr(handle, "charfn_increment"):
        return handle
    raise TypeError(f"unsupported distribution handle {type(handle).__name__}")


def _mean(src) -> float:
    return float(src.mean() if callable(src.mean) else src.mean)


def r_delta_grid(points_per_decade: int = 100, lo: float = 1e-6, hi: float = 1e4) -> np.ndarray:
    decades = math.log10(hi / lo)
    return np.geomspace(lo, hi, int(round(decades * points_per_decade)) + 1)


def _equalize_means(a, b):
    ma, mb = _mean(a), _mean(b)
    scale = max(abs(ma), abs(mb), 1.0)
    if not math.isfinite(ma) or not math.isfinite(mb) or abs(ma - mb) > MEAN_TOL * scale:
        raise MeanMismatch(f"means differ: {ma!r} vs {mb!r}")
    a_emp, b_emp = isinstance(a, EmpiricalDist), isinstance(b, EmpiricalDist)
    if a_emp and b_emp:
        target = 0.5 * (ma + mb)
    else:
        target = mb if a_emp else ma
    if a_emp and ma != target:
        a = a.with_mean(target)
    if b_emp and mb != target:
        b = b.with_mean(target)
    return a, b


def _r_delta_from_increments(ca, cb, grid, delta, m2):
    logs = np.log(grid)
    diff = np.abs(ca - cb)
    value = float(np.trapezoid(grid**-delta * diff, logs))
    lo, hi = grid[0], grid[-1]
    upper = 2.0 * hi**-delta / delta
    # below the grid |c_a - c_b| follows its local power law (exponent 2 generically)
    if diff[0] > 0 and diff[1] > 0:
        k = math.log(diff[1] / diff[0]) / (logs[1] - logs[0])
        if k > delta:
            ext = diff[0] * lo**-delta / (k - delta)
            return Estimate.quadrature(value + ext, upper + 0.01 * ext)
    lower = m2 / 2.0 * lo ** (2.0 - delta) / (2.0 - delta)
    return Estimate.quadrature(value, upper + lower)


def r_delta_distance(a, b, delta: float, points_per_decade: int = 100) -> Estimate:
    """r_delta(a, b) = int s^(-delta-1) |c_a(s) - c_b(s)| ds for equal-mean laws.

    Handles are EmpiricalDist, sample-backed LSTGrid, or closed-form laws.
    Both characteristic functions enter through exp(isx) - 1 - isx so the
    small-s region carries no cancellation; the reported bound covers the
    truncated ranges below 1e-6 and above 1e4.
    """
    if not 1.0 < delta < 2.0:
        raise ValueError("delta must lie in (1, 2)")
    a, b = _cf_source(a), _cf_source(b)
    if a is b:
        return Estimate.quadrature(0.0, 0.0)
    a, b = _equalize_means(a, b)
    grid = r_delta_grid(points_per_decade)
    m2 = a.moment(2.0) + b.moment(2.0)
    return _r_delta_from_increments(a.charfn_increment(grid), b.charfn_increment(grid), grid, delta, m2)


@dataclass(frozen=True)
class ContractionResult:
    ratio: float
    numerator: Estimate
    denominator: Estimate
    p: float
    t_p: float
    sum_moment_p: float

    def to_json(self):
        return {"ratio": self.ratio, "numerator": self.numerator.to_json(),
                "denominator": self.denominator.to_json(), "p": self.p,
                "t_p": self.t_p, "sum_moment_p": self.sum_moment_p}


def contraction_ratios(model: WeightModel, nu1, nu2, ps, mc_budget: int = 20_000, rng=None,
                       points_per_decade: int = 100, tail_tol: float = DEFAULT_TAIL_TOL,
                       workers=None) -> list[ContractionResult]:
    """Measured r_p(T nu1, T nu2) / r_p(nu1, nu2) for each p, sharing one smoothing step.

    Both pushed-forward samples are rescaled to the common input mean so
    Monte Carlo noise in their means does not leave the metric's domain.
    """
    rng = rng or np.random.default_rng()
    ps = [float(p) for p in ps]
    for p in ps:
        if not 1.0 < p < 2.0:
            raise ValueError("p must lie in (1, 2)")
    if nu1 is nu2 or (nu1.size == nu2.size and np.array_equal(nu1.samples, nu2.samples)
                      and np.array_equal(nu1.w, nu2.w)):
        raise IdenticalInputs("contraction ratio needs two distinct distributions")
    consts = []
    for p in ps:
        tp = float(t_beta(model, p, rng=rng).value)
        sp = float(sum_weights_moment(model, p, rng=rng).value)
        if not tp < 1.0 or not math.isfinite(sp):
            raise HypothesesViolated(f"contraction needs t(p) < 1 and finite E(sum X)^p at p={p}")
        consts.append((tp, sp))
    nu1, nu2 = _equalize_means(nu1, nu2)
    target = nu1.mean()
    t1 = population_step(model, nu1, mc_budget, rng, tail_tol, workers).with_mean(target)
    t2 = population_step(model, nu2, mc_budget, rng, tail_tol, workers).with_mean(target)
    grid = r_delta_grid(points_per_decade)
    c = [d.charfn_increment(grid) for d in (nu1, nu2, t1, t2)]
    m2_in = nu1.moment(2.0) + nu2.moment(2.0)
    m2_out = t1.moment(2.0) + t2.moment(2.0)
    out = []
    for p, (tp, sp) in zip(ps, consts):
        den = _r_delta_from_increments(c[0], c[1], grid, p, m2_in)
        num = _r_delta_from_increments(c[2], c[3], grid, p, m2_out)
        if not den.value > 0:
            raise IdenticalInputs("input distance is zero")
        out.append(ContractionResult(num.value / den.value, num, den, p, tp, sp))
    return out


def contraction_ratio(model: WeightModel, nu1, nu2, p: float, mc_budget: int = 20_000, rng=None,
                      **kw) -> ContractionResult:
    return contraction_ratios(model, nu1, nu2, [p], mc_budget, rng, **kw)[0]


# ---------------------------------------------------------------------------
# stable transformations


def _check_alpha(alpha):
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")


def stable_transform(base, alpha: float, rng=None, workers=None):
    """phi_alpha(s) = phi(s**alpha).

    For a grid the argument axis is remapped (s -> s**(1/alpha)) so no
    interpolation is involved; for a sample returns T**(1/alpha) * S_alpha.
    """
    _check_alpha(alpha)
    if isinstance(base, LSTGrid):
        if alpha == 1.0:
            return base
        inner = None if base.alpha is None else base.alpha * alpha
        return LSTGrid(base.s ** (1.0 / alpha), base.tail, None, f"stable{alpha}({base.label})", inner)
    if isinstance(base, EmpiricalDist):
        if alpha == 1.0:
            return base
        rng = rng or np.random.default_rng()
        t = base.draw(base.size, rng) if base.weights is not None else base.samples
        st = sample_positive_stable(alpha, t.size, rng, workers).samples
        return EmpiricalDist(t ** (1.0 / alpha) * st, None, f"stable{alpha}({base.lineage})")
    raise TypeError(f"unsupported base {type(base).__name__}")


def inverse_stable_transform(lst: LSTGrid, alpha: float) -> LSTGrid:
    """psi(s) = phi(s**(1/alpha)), again by remapping the argument axis."""
    _check_alpha(alpha)
    if alpha == 1.0:
        return lst
    outer = None if lst.alpha is None else min(lst.alpha / alpha, 1.0)
    return LSTGrid(lst.s**alpha, lst.tail, None, f"inverse-stable{alpha}({lst.label})", outer)
