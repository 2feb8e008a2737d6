"""Existence and uniqueness criteria for elementary fixed points.

The steps are: find the roots of t(beta) = 1, classify the random walk
built from R = log B (B drawn from chi*_beta1), and estimate the
integrals I_R(sigma) that decide existence when the walk drifts to
minus infinity. Finiteness of an expectation cannot be decided from
samples, so every such verdict is a stabilization check across nested
sample sizes unless a closed form is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import Divergent, EvaluationFailed, GridTooCoarse, NoRoot
from .estimates import Estimate, nested_means, stabilization_verdict
from .lst import LSTGrid
from .models import (
    DEFAULT_TAIL_TOL,
    WeightModel,
    check_condition_d,
    sample_size_biased_node,
    validate_model,
)

ROOT_XTOL = 1e-14
DEDUP_TOL = 1e-9
TANGENT_TOL = 1e-12
HEAVY_RATIO = 1.25
DRIFT_SE = 3.0
SCAN_POINTS = 200

NEGATIVE = "NegativeDrift"
OSCILLATING = "Oscillating"
POSITIVE = "PositiveDrift"
INCONCLUSIVE = "Inconclusive"


# ---------------------------------------------------------------------------
# roots of t(beta) = 1


@dataclass(frozen=True)
class BetaRoots:
    roots: tuple
    bracket: tuple
    residuals: tuple
    argmin: float
    t_min: float
    method: str = "exact"

    @property
    def beta1(self) -> float:
        return self.roots[0]

    def to_json(self):
        return {"roots": list(self.roots), "bracket": list(self.bracket),
                "residuals": list(self.residuals), "argmin": self.argmin,
                "t_min": self.t_min, "method": self.method}


def _t_functions(model: WeightModel, mc_budget: int, rng, tail_tol: float):
    """t and t' as callables; Monte Carlo versions reuse one batch so t stays convex."""
    if model.exact_moments:
        return model.exact_t, model.exact_dt, "exact"
    batch = model.sample_batch(int(mc_budget), rng, tail_tol)
    logw, n = np.log(batch.weights), batch.count

    def t(b):
        return float(np.sum(np.exp(b * logw)) / n)

    def dt(b):
        return float(np.sum(np.exp(b * logw) * logw) / n)

    return t, dt, "monte-carlo"


def _safe(fn):
    def wrapped(b):
        try:
            v = float(fn(b))
        except Divergent:
            return math.inf
        return v if not math.isnan(v) else math.inf
    return wrapped


def solve_beta_roots(model: WeightModel, search_max: float = 8.0, search_min: float = 1e-3,
                     mc_budget: int = 100_000, rng=None,
                     tail_tol: float = DEFAULT_TAIL_TOL) -> BetaRoots:
    """All solutions of t(beta) = 1 in [search_min, search_max].

    Convexity of t gives at most two roots: locate the minimizer, then
    bisect on each flank.
    """
    validate_model(model)
    rng = rng or np.random.default_rng(0)
    t_raw, dt_raw, method = _t_functions(model, mc_budget, rng, tail_tol)
    t, dt = _safe(t_raw), _safe(dt_raw)
    grid = np.geomspace(search_min, search_max, SCAN_POINTS)
    vals = np.array([t(b) for b in grid])
    finite = np.isfinite(vals)
    if not finite.any():
        raise EvaluationFailed("t(beta) is infinite on the whole search interval")
    k = int(np.argmin(np.where(finite, vals, np.inf)))
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, grid.size - 1)]
    if k == 0 or k == grid.size - 1:
        bmin = grid[k]
    else:
        d_lo, d_hi = dt(lo), dt(hi)
        if math.isfinite(d_lo) and math.isfinite(d_hi) and d_lo < 0 < d_hi:
            bmin = brentq(dt, lo, hi, xtol=ROOT_XTOL)
        else:
            bmin = minimize_scalar(t, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12}).x
    tmin = t(bmin)
    if tmin > 1.0 + TANGENT_TOL:
        raise NoRoot(f"t(beta) > 1 on [{search_min}, {search_max}] (minimum {tmin!r} at {bmin!r})")

    def g(b):
        return t(b) - 1.0

    roots = []
    if abs(tmin - 1.0) <= TANGENT_TOL:
        roots.append(bmin)
    else:
        # left flank: first finite grid point above 1 before the minimizer
        left = [b for b, v in zip(grid[:k + 1], vals[:k + 1]) if math.isfinite(v) and v > 1.0]
        if left:
            roots.append(brentq(g, left[-1], bmin, xtol=ROOT_XTOL))
        elif not finite[0]:
            # t jumps from +inf: bisect between the divergence edge and the minimizer
            edge = grid[np.flatnonzero(finite)[0]]
            if g(edge) > 0:
                roots.append(brentq(g, edge, bmin, xtol=ROOT_XTOL))
        right = [b for b, v in zip(grid[k:], vals[k:]) if math.isfinite(v) and v > 1.0]
        if right:
            roots.append(brentq(g, bmin, right[0], xtol=ROOT_XTOL))
    roots = sorted(roots)
    deduped = []
    for r in roots:
        if not deduped or r - deduped[-1] > DEDUP_TOL:
            deduped.append(float(r))
    if not deduped:
        raise NoRoot(f"t(beta) = 1 has no solution in [{search_min}, {search_max}]")
    residuals = tuple(abs(t(r) - 1.0) for r in deduped)
    return BetaRoots(tuple(deduped), (search_min, search_max), residuals, float(bmin), float(tmin), method)


# ---------------------------------------------------------------------------
# drift of the walk S_n = R_1 + ... + R_n


@dataclass(frozen=True)
class DriftClass:
    verdict: str
    mean_log: Estimate
    erickson_statistic: Estimate | None = None
    heavy_positive: bool = False
    heavy_negative: bool = False
    samples: int = 0

    @property
    def mean_is_finite(self) -> bool:
        return math.isfinite(self.mean_log.value)

    def to_json(self):
        return {"verdict": self.verdict, "mean_log": self.mean_log.to_json(),
                "erickson_statistic": None if self.erickson_statistic is None
                else self.erickson_statistic.to_json(),
                "heavy_positive": self.heavy_positive, "heavy_negative": self.heavy_negative,
                "samples": self.samples}


def _block_median_mean(x: np.ndarray, blocks: int) -> float:
    k = x.size // blocks
    return float(np.median(x[: k * blocks].reshape(blocks, k).mean(axis=1)))


def _heavy(part: np.ndarray) -> bool:
    """One-sided mean looks infinite: typical partial means grow by more than HEAVY_RATIO per doubling.

    Medians over disjoint blocks (16, 8, 4 blocks) keep one huge draw from
    masking or faking growth.
    """
    meds = [_block_median_mean(part, b) for b in (16, 8, 4)]
    if meds[0] <= 0.0:
        return meds[-1] > 0.0
    growth = math.sqrt(meds[2] / meds[0])
    return growth > HEAVY_RATIO


class TruncatedMean:
    """A(u) = E min(V, u) for a nonnegative sample V; the I_R denominator."""

    def __init__(self, v):
        v = np.sort(np.asarray(v, dtype=float))
        self.v = v
        self.c = np.concatenate([[0.0], np.cumsum(v)])

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        k = np.searchsorted(self.v, u, side="left")
        return (self.c[k] + u * (self.v.size - k)) / self.v.size


class DiscreteTruncatedMean:
    """Exact A(u) = sum_k p_k min(v_k, u) for a finite law."""

    def __init__(self, v, p):
        self.v = np.asarray(v, dtype=float)
        self.p = np.asarray(p, dtype=float)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return np.minimum.outer(u, self.v) @ self.p


def _erickson(pos: np.ndarray, A) -> Estimate:
    """E[x / A(x)] over positive parts x > 0 (zero contributes zero)."""
    x = pos[pos > 0]
    vals = np.zeros(pos.size)
    if x.size:
        den = A(x)
        with np.errstate(divide="ignore"):
            vals[pos > 0] = np.where(den > 0, x / np.maximum(den, 1e-300), np.inf)
    if not np.all(np.isfinite(vals)):
        return Estimate.monte_carlo(math.inf, math.inf, "infinite")
    est = Estimate.from_samples(vals)
    return est.with_verdict(stabilization_verdict(nested_means(vals)))


def classify_drift(sampler, mc_budget: int = 100_000, rng=None, exact_mean: float | None = None,
                   exact_abs_mean: float | None = None) -> DriftClass:
    """Classify lim S_n for the walk with i.i.d. steps drawn by ``sampler(n, rng)``.

    With ``exact_mean`` the sign decides directly (zero up to 1e-12 relative
    to E|R| counts as oscillating). Otherwise the sample decides: light
    one-sided tails use the mean with a 3 SE band, heavy ones the Erickson
    statistic E[R+ / A(R+)] with A(u) = E min(R-, u), finite meaning -> -inf.
    """
    rng = rng or np.random.default_rng()
    r = np.asarray(sampler(int(mc_budget), rng), dtype=float)
    n = r.size
    if exact_mean is not None:
        scale = exact_abs_mean if exact_abs_mean is not None else float(np.mean(np.abs(r)))
        mean = Estimate.exact(float(exact_mean))
        if abs(exact_mean) <= TANGENT_TOL * max(scale, 1e-300) or exact_mean == 0.0:
            verdict = OSCILLATING
        else:
            verdict = NEGATIVE if exact_mean < 0 else POSITIVE
        return DriftClass(verdict, mean, None, False, False, n)
    if n < 16:
        raise ValueError("drift classification needs at least 16 samples")
    pos, neg = np.maximum(r, 0.0), np.maximum(-r, 0.0)
    hp, hn = _heavy(pos), _heavy(neg)
    if not hp and not hn:
        mean = Estimate.from_samples(r)
        band = DRIFT_SE * mean.std_error
        if mean.value < -band:
            verdict = NEGATIVE
        elif mean.value > band:
            verdict = POSITIVE
        else:
            verdict = OSCILLATING
        return DriftClass(verdict, mean, None, hp, hn, n)
    if hn and not hp:
        mean_flag = -math.inf
    elif hp and not hn:
        mean_flag = math.inf
    else:
        mean_flag = math.nan
    mean = Estimate.monte_carlo(mean_flag, math.inf, "suspect-infinite")
    down = _erickson(pos, TruncatedMean(neg))
    if down.verdict == "finite":
        return DriftClass(NEGATIVE, mean, down, hp, hn, n)
    up = _erickson(neg, TruncatedMean(pos))
    if up.verdict == "finite":
        return DriftClass(POSITIVE, mean, down, hp, hn, n)
    return DriftClass(INCONCLUSIVE, mean, down, hp, hn, n)


# ---------------------------------------------------------------------------
# I_R(sigma)


def compute_IR(r_source, sigma_samples, mc_budget: int = 100_000, rng=None,
               exact_A=None) -> Estimate:
    """I_R(sigma) = int_{x>1} log x / A(log x) sigma(dx), A(u) = int_0^u P(R <= -y) dy.

    ``r_source`` is a sampler ``(n, rng) -> R`` or an array of R draws;
    ``exact_A`` overrides the empirical denominator with a closed form.
    """
    x = np.asarray(sigma_samples, dtype=float)
    if x.size == 0:
        raise ValueError("sigma sample is empty")
    if exact_A is None:
        if callable(r_source):
            r = np.asarray(r_source(int(mc_budget), rng or np.random.default_rng()), dtype=float)
        else:
            r = np.asarray(r_source, dtype=float)
        A = TruncatedMean(np.maximum(-r, 0.0))
    else:
        A = exact_A
    vals = np.zeros(x.size)
    up = x > 1.0
    if np.any(up):
        lx = np.log(x[up])
        den = A(lx)
        if np.any(den <= 0):
            return Estimate.monte_carlo(math.inf, math.inf, "infinite")
        vals[up] = lx / den
    if x.size == 1 or np.all(vals == vals[0]):
        return Estimate.exact(float(vals.mean()), verdict="finite")
    est = Estimate.from_samples(vals)
    return est.with_verdict(stabilization_verdict(nested_means(vals)))


# ---------------------------------------------------------------------------
# existence verdict


@dataclass(frozen=True)
class CriteriaReport:
    beta_roots: BetaRoots
    drift: DriftClass
    i_r_sigma: Estimate
    i_r_chi: Estimate | None
    xlogx: Estimate | None
    theorem2_case: str
    exists: bool
    alpha: float | None
    notes: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "beta_roots": self.beta_roots.to_json(),
            "drift": self.drift.to_json(),
            "i_r_sigma": self.i_r_sigma.to_json(),
            "i_r_chi": None if self.i_r_chi is None else self.i_r_chi.to_json(),
            "xlogx": None if self.xlogx is None else self.xlogx.to_json(),
            "theorem2_case": self.theorem2_case,
            "exists": self.exists,
            "alpha": self.alpha,
            "notes": self.notes,
        }


def theorem2_verdict(model: WeightModel, mc_budget: int = 100_000, rng=None,
                     search_max: float = 8.0, tail_tol: float = DEFAULT_TAIL_TOL) -> CriteriaReport:
    rng = rng or np.random.default_rng()
    roots = solve_beta_roots(model, search_max, mc_budget=mc_budget, rng=rng, tail_tol=tail_tol)
    beta = roots.beta1
    check_condition_d(model, beta, mc_budget, rng)

    def r_sampler(n, g):
        m, _ = sample_size_biased_node(model, beta, g, n, tail_tol=tail_tol, check=False)
        return np.log(m) / beta

    log_law = model.log_weight_law(beta) if model.exact_moments else None
    exact_mean = exact_abs = None
    exact_A = None
    if log_law is not None:
        lv, lp = log_law
        exact_mean, exact_abs = float(lp @ lv), float(lp @ np.abs(lv))
        exact_A = DiscreteTruncatedMean(np.maximum(-lv, 0.0), lp)
    elif model.exact_moments:
        # E R = E sum X^b log X / t(b) = t'(b) / t(b)
        try:
            exact_mean = float(model.exact_dt(beta) / model.exact_t(beta))
        except (NotImplementedError, Divergent):
            exact_mean = None
    r = r_sampler(int(mc_budget), rng)
    drift = classify_drift(lambda n, g: r, mc_budget, rng, exact_mean, exact_abs)

    _, sums = sample_size_biased_node(model, beta, rng, int(mc_budget), tail_tol=tail_tol, check=False)
    i_sigma = compute_IR(r, sums, exact_A=exact_A)

    xlogx = None
    if drift.mean_is_finite:
        try:
            if not model.exact_moments:
                raise NotImplementedError
            xlogx = Estimate.exact(model.exact_xlogx(beta), verdict="finite")
        except NotImplementedError:
            # E S log+ S = E[log+ S] under the size-biased law of S (t(beta) = 1)
            vals = np.log(np.maximum(sums, 1.0))
            xlogx = Estimate.from_samples(vals).with_verdict(stabilization_verdict(nested_means(vals)))

    i_chi = None
    if drift.heavy_positive and drift.heavy_negative:
        i_chi = compute_IR(r, np.exp(r), exact_A=exact_A)

    if not drift.mean_is_finite and drift.heavy_negative and not drift.heavy_positive:
        case = "b"
    elif drift.heavy_positive and drift.heavy_negative:
        case = "c"
    else:
        case = "a"
    negative = drift.verdict == NEGATIVE
    finite_sigma = i_sigma.verdict == "finite"
    in_range = beta <= 1.0 + 1e-12
    exists = bool(negative and finite_sigma and in_range)
    if case == "a":
        case_holds = negative and drift.mean_is_finite and xlogx is not None and xlogx.verdict == "finite"
    elif case == "b":
        case_holds = negative and finite_sigma
    else:
        case_holds = negative and finite_sigma and i_chi is not None and i_chi.verdict == "finite"
    notes = {"beta1_in_unit_interval": in_range, "case_conditions_hold": bool(case_holds)}
    return CriteriaReport(roots, drift, i_sigma, i_chi, xlogx, case if exists else "none",
                          exists, float(min(beta, 1.0)) if exists else None, notes)


# ---------------------------------------------------------------------------
# regular variation of 1 - phi at 0


@dataclass(frozen=True)
class RegularVariationFit:
    exponent: float
    residual: float
    expected: float | None = None

    def to_json(self):
        return {"exponent": self.exponent, "residual": self.residual, "expected": self.expected}


def check_regular_variation(lst: LSTGrid, beta_expected: float | None = None,
                            zs=(2.0, 4.0, 8.0), points: int = 10) -> RegularVariationFit:
    """Least-squares exponent of (1-phi(sz))/(1-phi(s)) ~ z**beta at the smallest arguments."""
    if lst.s.size < points:
        raise GridTooCoarse(f"grid has {lst.s.size} arguments, need {points}")
    s = lst.s[:points]
    base = lst.tail[:points]
    if np.any(base <= 0):
        raise GridTooCoarse("1 - phi vanishes on the smallest arguments")
    lz = np.log(np.asarray(zs, dtype=float))
    lr = np.log(lst.tail_at(np.outer(s, zs)) / base[:, None])
    beta = float(np.sum(lr * lz) / (s.size * np.sum(lz * lz)))
    resid = float(np.max(np.abs(lr - beta * lz)))
    return RegularVariationFit(beta, resid, beta_expected)
