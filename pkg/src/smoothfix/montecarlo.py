"""Sample-level engines.

Covers the branching random walk martingale, the spine perpetuity,
population-dynamics iteration of the fixed-point equation, shot-noise
sampling, the size-biased perpetuity used for tail work, the positive
stable sampler, and Kolmogorov-Smirnov distances.

All replica loops go through ``parallel.chunked_map`` so results depend
on the seed and the replica count, never on the number of workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import parallel
from .decay import DecayProfile
from .errors import (
    EmptyPool,
    MeanCollapse,
    PopulationCapExceeded,
    ZeroMean,
)
from .models import DEFAULT_TAIL_TOL, ShotNoise, WeightModel, check_condition_d

WEIGHT_TOL = 1e-9
CF_CHUNK = 4096


# ---------------------------------------------------------------------------
# empirical distributions


@dataclass(frozen=True, eq=False)
class EmpiricalDist:
    """Weighted sample on [0, inf). ``weights=None`` means uniform."""

    samples: np.ndarray
    weights: np.ndarray | None = None
    lineage: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=float).reshape(-1)
        if x.size and (np.any(x < 0) or not np.all(np.isfinite(x))):
            raise ValueError("samples must be finite and nonnegative")
        object.__setattr__(self, "samples", x)
        if self.weights is not None:
            w = np.ascontiguousarray(self.weights, dtype=float).reshape(-1)
            if w.shape != x.shape or np.any(w < 0):
                raise ValueError("weights must be nonnegative and match samples")
            if abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError("weights must sum to 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def weighted(cls, samples, raw_weights, lineage="", diagnostics=None):
        w = np.asarray(raw_weights, dtype=float)
        return cls(samples, w / w.sum(), lineage, diagnostics or {})

    @property
    def size(self) -> int:
        return int(self.samples.size)

    @property
    def w(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def mean(self) -> float:
        if self.weights is None:
            return float(self.samples.mean())
        return float(self.weights @ self.samples)

    def moment(self, p: float) -> float:
        if self.weights is None:
            return float(np.mean(self.samples**p))
        return float(self.weights @ self.samples**p)

    def effective_size(self) -> float:
        if self.weights is None:
            return float(self.size)
        return float(1.0 / np.sum(self.weights**2))

    @cached_property
    def _sorted(self):
        order = np.argsort(self.samples, kind="stable")
        xs = self.samples[order]
        ws = self.w[order]
        cw = np.cumsum(ws)
        cw /= cw[-1] if cw.size else 1.0
        return xs, ws, cw, order

    def cdf(self, y):
        xs, _, cw, _ = self._sorted
        k = np.searchsorted(xs, np.asarray(y, dtype=float), side="right")
        out = np.where(k > 0, cw[np.maximum(k - 1, 0)], 0.0)
        return np.minimum(out, 1.0)

    def tail(self, y):
        """P(X > y)."""
        xs, ws, _, _ = self._sorted
        rev = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
        k = np.searchsorted(xs, np.asarray(y, dtype=float), side="right")
        return rev[k]

    def tail_count(self, y):
        """Number of raw samples strictly above y."""
        xs, _, _, _ = self._sorted
        return xs.size - np.searchsorted(xs, np.asarray(y, dtype=float), side="right")

    def quantile(self, p):
        xs, _, cw, _ = self._sorted
        k = np.searchsorted(cw, np.asarray(p, dtype=float) * cw[-1], side="left")
        return xs[np.minimum(k, xs.size - 1)]

    @cached_property
    def _atoms(self):
        """Distinct sample values with aggregated weights (lattice samples collapse)."""
        xs, ws, _, _ = self._sorted
        if xs.size == 0:
            return xs, ws
        starts = np.concatenate([[0], np.flatnonzero(np.diff(xs)) + 1])
        return xs[starts], np.add.reduceat(ws, starts)

    def _transform(self, s, kernel, dtype):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x, w = self._atoms
        out = np.zeros(s.size, dtype=dtype)
        for i in range(0, x.size, CF_CHUNK):
            out += kernel(np.outer(s, x[i: i + CF_CHUNK])) @ w[i: i + CF_CHUNK]
        return out

    def lst_tail(self, s):
        """1 - E exp(-s X), computed without cancellation."""
        return self._transform(s, lambda y: -np.expm1(-y), float)

    def lst(self, s):
        return 1.0 - self.lst_tail(s)

    def charfn_increment(self, s):
        """E[exp(isX) - 1 - isX] computed stably (no first-order cancellation)."""
        return self._transform(s, _exp_i_increment, complex)

    def charfn(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        return 1.0 + 1j * s * self.mean() + self.charfn_increment(s)

    def draw_indices(self, n, rng):
        if self.weights is None:
            return rng.integers(0, self.size, size=n)
        _, _, cw, order = self._sorted
        k = np.searchsorted(cw, rng.random(n) * cw[-1], side="right")
        return order[np.minimum(k, self.size - 1)]

    def draw(self, n, rng):
        return self.samples[self.draw_indices(n, rng)]

    def scaled(self, c: float):
        return EmpiricalDist(self.samples * c, self.weights, self.lineage, dict(self.diagnostics))

    def with_mean(self, m: float):
        cur = self.mean()
        if not cur > 0:
            raise ZeroMean("cannot rescale a distribution with zero mean")
        return self.scaled(m / cur)

    def unbiased(self, lineage="unbiased"):
        """Undo size-biasing: reweight each sample by 1/x (zero samples dropped)."""
        keep = self.samples > 0
        x = self.samples[keep]
        w = self.w[keep] / x
        return EmpiricalDist.weighted(x, w, lineage, dict(self.diagnostics))

    # persistence ------------------------------------------------------
    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if self.weights is None:
                fh.write("x\n")
                for v in self.samples:
                    fh.write(f"{float(v)!r}\n")
            else:
                fh.write("x,weight\n")
                for v, w in zip(self.samples, self.weights):
                    fh.write(f"{float(v)!r},{float(w)!r}\n")

    @classmethod
    def from_csv(cls, path, lineage=None):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2) if header else np.empty((0, 1))
        if data.size == 0:
            raise EmptyPool(f"{path} holds no samples")
        x = data[:, 0]
        if len(header) > 1 and header[1] == "weight":
            return cls.weighted(x, data[:, 1], lineage or str(path))
        return cls(x, None, lineage or str(path))

    def metadata(self):
        return {
            "lineage": self.lineage,
            "size": self.size,
            "weighted": self.weights is not None,
            "mean": self.mean(),
            "diagnostics": self.diagnostics,
        }


def _exp_i_increment(y):
    """exp(iy) - 1 - iy with full relative precision for small y."""
    re = -2.0 * np.sin(0.5 * y) ** 2
    small = np.abs(y) < 1e-2
    y2 = y * y
    series = -y * y2 / 6.0 * (1.0 - y2 / 20.0 * (1.0 - y2 / 42.0))
    im = np.where(small, series, np.sin(y) - y)
    return re + 1j * im


def from_law(law, size, rng, lineage=None):
    return EmpiricalDist(law.sample(size, rng), None, lineage or str(law.to_json()))


# ---------------------------------------------------------------------------
# basic transforms of samples


def size_bias(dist: EmpiricalDist, rng, out_size: int) -> EmpiricalDist:
    m = dist.mean()
    if not m > 0:
        raise ZeroMean("size-biasing needs a positive mean")
    biased = EmpiricalDist.weighted(dist.samples, dist.w * dist.samples)
    idx = biased.draw_indices(int(out_size), rng)
    return EmpiricalDist(dist.samples[idx], None, f"size-biased({dist.lineage})")


def sample_positive_stable(alpha: float, count: int, rng, workers=None) -> EmpiricalDist:
    """Draws with transform exp(-s**alpha) via the Kanter representation."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")

    def chunk(g, size):
        u = g.uniform(0.0, math.pi, size)
        e = g.exponential(1.0, size)
        a = alpha
        return (np.sin(a * u) / np.sin(u) ** (1.0 / a)) * (np.sin((1.0 - a) * u) / e) ** ((1.0 - a) / a)

    x = parallel.chunked_concat(chunk, int(count), rng, workers=workers)
    return EmpiricalDist(x, None, f"stable({alpha})")


def ks_distance(a: EmpiricalDist, b) -> float:
    """Kolmogorov-Smirnov sup distance; ``b`` is an EmpiricalDist or a named law."""
    xa = a._sorted[0]
    if isinstance(b, EmpiricalDist):
        xb = b._sorted[0]
        pts = np.union1d(xa, xb)
        return float(np.max(np.abs(a.cdf(pts) - b.cdf(pts))))
    # one-sample: compare right and left limits of the empirical cdf at jumps
    ux = np.unique(xa)
    fa_right = a.cdf(ux)
    fa_left = np.concatenate([[0.0], fa_right[:-1]])
    fb = np.asarray(b.cdf(ux), dtype=float)
    fb_left = np.asarray(b.cdf(np.nextafter(ux, -np.inf)), dtype=float)
    return float(max(np.max(np.abs(fa_right - fb)), np.max(np.abs(fa_left - fb_left))))


# ---------------------------------------------------------------------------
# population dynamics


def population_step(model: WeightModel, pool: EmpiricalDist, replicas: int, rng,
                    tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> EmpiricalDist:
    """One draw of sum_i X_i W_i per replica, W_i resampled from ``pool``."""
    if pool.size == 0:
        raise EmptyPool("population step needs a nonempty pool")

    def chunk(g, size):
        batch = model.sample_batch(size, g, tail_tol)
        w = pool.draw(batch.weights.size, g)
        return np.bincount(batch.owner, weights=batch.weights * w, minlength=size)

    out = parallel.chunked_concat(chunk, int(replicas), rng, workers=workers)
    diag = {}
    if isinstance(model, ShotNoise):
        T = model.horizon(tail_tol)
        diag["truncation_mean_bound"] = model.intensity * model.h.tail_integral(T) * pool.mean()
    return EmpiricalDist(out, None, f"T({pool.lineage})", diag)


@dataclass(frozen=True)
class PopulationResult:
    pool: EmpiricalDist
    ks_trace: np.ndarray
    mean_trace: np.ndarray
    median_trace: np.ndarray
    stabilized: bool


def _stabilized(mean_trace, median_trace, rel=0.05):
    n = len(mean_trace)
    if n < 4:
        return False
    tail = max(4, n // 4)
    ok = True
    for tr in (np.asarray(mean_trace[-tail:]), np.asarray(median_trace[-tail:])):
        ref = tr[-1]
        if not ref > 0 or np.max(np.abs(tr - ref)) > rel * ref:
            ok = False
    return ok


def iterate_population(model: WeightModel, seed_pool: EmpiricalDist, iterations: int,
                       replicas: int, rng, target_mean: float | None = None,
                       tail_tol: float = DEFAULT_TAIL_TOL, workers=None,
                       step=None) -> PopulationResult:
    """Repeated population steps with KS, mean and median traces.

    ``target_mean`` rescales each pool to that mean, a projection that is
    legitimate when the fixed point is unique up to scale.
    """
    if seed_pool.size == 0:
        raise EmptyPool("seed pool is empty")
    step = step or (lambda p, g: population_step(model, p, replicas, g, tail_tol, workers))
    m0 = seed_pool.mean()
    pool = seed_pool
    ks, means, medians = [], [], []
    for _ in range(int(iterations)):
        new = step(pool, rng)
        mean = new.mean()
        if not mean >= 1e-6 * m0:
            raise MeanCollapse(
                f"pool mean {mean!r} fell below 1e-6 of the initial mean {m0!r}",
                trace={"ks": ks, "mean": means, "median": medians},
            )
        if target_mean is not None:
            new = new.with_mean(target_mean)
        ks.append(ks_distance(new, pool))
        means.append(mean)
        medians.append(float(new.quantile(0.5)))
        pool = new
    return PopulationResult(pool, np.array(ks), np.array(means), np.array(medians),
                            _stabilized(means, medians))


def sample_shot_noise(h: DecayProfile, intensity: float, pool: EmpiricalDist, shift: float,
                      replicas: int, rng, tail_tol: float = DEFAULT_TAIL_TOL,
                      workers=None) -> EmpiricalDist:
    """shift + sum_i Y_i h(tau_i) with tau a Poisson flow and Y_i from ``pool``."""
    if not intensity > 0:
        raise ValueError("intensity must be positive")
    model = ShotNoise(h, intensity)
    out = population_step(model, pool, replicas, rng, tail_tol, workers)
    return EmpiricalDist(out.samples + float(shift), None, out.lineage, out.diagnostics)


# ---------------------------------------------------------------------------
# branching random walk martingale


@dataclass(frozen=True)
class BRWResult:
    samples: np.ndarray
    generation: int
    gamma: float
    normalization: float
    censored_fraction: float
    max_population: int
    truncation_bound: float

    def to_dist(self) -> EmpiricalDist:
        return EmpiricalDist(self.samples, None, f"brw(n={self.generation})")


BRW_CHUNK = 256


def simulate_brw_martingale(model: WeightModel, gamma: float, n: int, replicas: int, rng,
                            pop_cap: int = 10**7, tail_tol: float = DEFAULT_TAIL_TOL,
                            workers=None, strict: bool = False) -> BRWResult:
    """Samples of sum_{|v|=n} L(v)^gamma / t(gamma)^n over independent trees."""
    m_gamma = model.exact_t(gamma)
    norm = m_gamma ** int(n)

    def chunk(g, size):
        w = np.ones(size)
        owner = np.arange(size)
        alive = np.ones(size, dtype=bool)
        peak = 1
        bound = 0.0
        for _ in range(int(n)):
            if w.size == 0:
                break
            batch = model.sample_batch(w.size, g, tail_tol)
            bound = max(bound, batch.truncation_bound)
            w = w[batch.owner] * batch.weights
            owner = owner[batch.owner]
            counts = np.bincount(owner, minlength=size)
            peak = max(peak, int(counts.max()) if counts.size else 0)
            over = counts > pop_cap
            if np.any(over):
                alive &= ~over
                keep = alive[owner]
                w, owner = w[keep], owner[keep]
        z = np.bincount(owner, weights=w**gamma, minlength=size) / norm
        z[~alive] = np.nan
        return z, np.array([peak]), np.array([bound])

    z, peaks, bounds = parallel.chunked_concat(chunk, int(replicas), rng, workers=workers,
                                                chunk=BRW_CHUNK)
    censored = ~np.isfinite(z)
    frac = float(censored.mean()) if z.size else 0.0
    if strict and frac > 0:
        raise PopulationCapExceeded(f"{frac:.3%} of replicas exceeded the node cap")
    return BRWResult(z[~censored], int(n), float(gamma), float(norm), frac,
                     int(peaks.max()) if peaks.size else 1, float(bounds.max()) if bounds.size else 0.0)


# ---------------------------------------------------------------------------
# spine perpetuity


@dataclass(frozen=True)
class SpineResult:
    v1: np.ndarray
    v2: np.ndarray
    depth: int
    steps_used: int
    max_residual_product: float

    @property
    def v(self):
        return self.v1 - self.v2


def simulate_spine_perpetuity(model: WeightModel, beta: float, depth: int, replicas: int, rng,
                              cutoff: float = 1e-12, tail_tol: float = DEFAULT_TAIL_TOL,
                              pool: int | None = None, workers=None) -> SpineResult:
    """V1 = N_1 + sum_k M_1..M_k N_{k+1} and V2 = sum_k M_1..M_k up to ``depth``.

    Node k supplies the pair (M_k, N_k) from one size-biased realization;
    each N only meets products of strictly earlier M's.
    """
    from .models import sample_size_biased_node

    check_condition_d(model, beta, rng=np.random.default_rng(0))

    def chunk(g, size):
        v1 = np.zeros(size)
        v2 = np.zeros(size)
        prod = np.ones(size)
        active = np.arange(size)
        used = 0
        for k in range(int(depth) + 1):
            if active.size == 0:
                break
            M, N = sample_size_biased_node(model, beta, g, count=active.size, pool=pool,
                                           tail_tol=tail_tol, check=False)
            p = prod[active]
            v1[active] += p * N
            if k > 0:
                v2[active] += p
            used = k
            if k == int(depth):
                break
            prod[active] = p * M
            active = active[prod[active] >= cutoff]
        residual = float(prod[active].max()) if active.size else 0.0
        return v1, v2, np.array([used]), np.array([residual])

    v1, v2, used, resid = parallel.chunked_concat(chunk, int(replicas), rng, workers=workers)
    return SpineResult(v1, v2, int(depth), int(used.max()) if used.size else 0,
                       float(resid.max()) if resid.size else 0.0)


# ---------------------------------------------------------------------------
# size-biased perpetuity: Wbar = B Wbar' + C


@dataclass(frozen=True)
class PerpetuityPairs:
    """Wbar = C1 + B1 * Wbar' per replica, with Wbar' independent of (B1, C1)."""

    wbar: np.ndarray
    b1: np.ndarray
    c1: np.ndarray
    max_residual_product: float

    @property
    def shifted(self) -> np.ndarray:
        """B1 * Wbar', a draw of N* coupled to Wbar."""
        return self.wbar - self.c1


def sample_perpetuity_pairs(model: WeightModel, pool: EmpiricalDist, replicas: int, rng,
                            max_depth: int = 600, cutoff: float = 1e-12,
                            tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> PerpetuityPairs:
    """Size-biased fixed point through its perpetuity.

    Wbar = C_1 + B_1 C_2 + B_1 B_2 C_3 + ..., with (B_k, C_k) built from a
    realization biased by sum X_i: B is the chosen point and C the sum of
    the other points each multiplied by an independent draw from ``pool``.
    Requires t(1) = 1.
    """
    check_condition_d(model, 1.0, rng=np.random.default_rng(0))
    if pool.size == 0:
        raise EmptyPool("perpetuity needs a pool for the non-spine summands")

    def chunk(g, size):
        acc = np.zeros(size)
        prod = np.ones(size)
        first_b = first_c = None
        active = np.arange(size)
        for _ in range(int(max_depth)):
            if active.size == 0:
                break
            B, C = draw_bc(model, pool, active.size, g, tail_tol)
            if first_b is None:
                first_b, first_c = B.copy(), C.copy()
            acc[active] += prod[active] * C
            prod[active] *= B
            active = active[prod[active] >= cutoff]
        residual = float(prod[active].max()) if active.size else 0.0
        return acc, first_b, first_c, np.array([residual])

    wbar, b1, c1, resid = parallel.chunked_concat(chunk, int(replicas), rng, workers=workers)
    return PerpetuityPairs(wbar, b1, c1, float(resid.max()) if resid.size else 0.0)


def sample_size_biased_perpetuity(model: WeightModel, pool: EmpiricalDist, replicas: int, rng,
                                  max_depth: int = 600, cutoff: float = 1e-12,
                                  tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> EmpiricalDist:
    """Samples of the size-biased fixed point (see ``sample_perpetuity_pairs``)."""
    pairs = sample_perpetuity_pairs(model, pool, replicas, rng, max_depth, cutoff, tail_tol, workers)
    diag = {"max_residual_product": pairs.max_residual_product, "pool_mean": pool.mean()}
    return EmpiricalDist(pairs.wbar, None, f"size-biased-perpetuity({pool.lineage})", diag)


def draw_bc(model: WeightModel, pool: EmpiricalDist, count: int, rng,
            tail_tol: float = DEFAULT_TAIL_TOL):
    """Pairs (B, C): B ~ chi*_1 and C = sum of the other weights times pool draws."""
    batch, spine = model.sample_size_biased(1.0, count, rng, tail_tol)
    w = pool.draw(batch.weights.size, rng)
    contrib = batch.weights * w
    contrib[spine] = 0.0
    C = np.bincount(batch.owner, weights=contrib, minlength=count)
    return batch.weights[spine], C
