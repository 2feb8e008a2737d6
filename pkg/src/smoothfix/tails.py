"""Moment conditions, tail index and the power-tail constant C_b.

Fixed-point samples for tail work come from the size-biased perpetuity
Wbar = C1 + B1 Wbar'. Reweighting Wbar by 1/Wbar gives the fixed point
itself, with far more draws in the tail than direct sampling would give.
The same replicas supply the coupled pair (Wbar, B1 Wbar'), so the
difference of the two tails in the C_b integral is estimated sample by
sample instead of as the difference of two noisy curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criteria import solve_beta_roots
from .errors import HypothesesViolated, NoisyDifference, NoRoot, TooFewSamples
from .estimates import Estimate
from .models import (
    CONDITION_D_TOL,
    DEFAULT_TAIL_TOL,
    WeightModel,
    check_condition_d,
    sum_weights_moment,
    t_beta,
    t_beta_derivative,
)
from .montecarlo import (
    EmpiricalDist,
    PerpetuityPairs,
    from_law,
    iterate_population,
    sample_perpetuity_pairs,
)
from .laws import PointMass

MIN_HILL_SAMPLES = 10_000
ARITH_REL_STOP = 1e-6
SIGN_FLIP_LIMIT = 0.10
DOMINANCE_QUANTILE = 0.9


# ---------------------------------------------------------------------------
# moment condition


@dataclass(frozen=True)
class MomentReport:
    p: float
    sum_moment: Estimate
    weight_moment: Estimate
    verdict: bool
    lp_convergence: bool
    fixed_point_second_moment: Estimate | None = None

    def to_json(self):
        return {
            "p": self.p,
            "sum_moment": self.sum_moment.to_json(),
            "weight_moment": self.weight_moment.to_json(),
            "verdict": self.verdict,
            "lp_convergence": self.lp_convergence,
            "fixed_point_second_moment": None if self.fixed_point_second_moment is None
            else self.fixed_point_second_moment.to_json(),
        }


def check_moment_condition(model: WeightModel, p: float, mc_budget: int = 100_000, rng=None,
                           tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> MomentReport:
    """E W^p < infinity for the unit-mean fixed point iff t(p) < 1 and E(sum X)^p < infinity."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    rng = rng or np.random.default_rng()
    sm = sum_weights_moment(model, p, mc_budget, rng, tail_tol=tail_tol, workers=workers)
    tp = t_beta(model, p, mc_budget, rng, tail_tol=tail_tol, workers=workers)
    below_one = tp.value + 2.0 * tp.std_error < 1.0 - 1e-12
    verdict = bool(sm.verdict == "finite" and below_one)
    t1 = t_beta(model, 1.0, mc_budget, rng, tail_tol=tail_tol, workers=workers)
    d1 = abs(t1.value - 1.0) <= (CONDITION_D_TOL if t1.kind == "exact" else 3.0 * t1.std_error)
    second = None
    if verdict and p >= 2.0:
        s2 = sum_weights_moment(model, 2.0, mc_budget, rng, tail_tol=tail_tol, workers=workers)
        t2 = t_beta(model, 2.0, mc_budget, rng, tail_tol=tail_tol, workers=workers)
        # E W^2 = t(2) E W^2 + (E(sum X)^2 - t(2)) m^2 with m = 1
        value = (s2.value - t2.value) / (1.0 - t2.value)
        if s2.kind == "exact" and t2.kind == "exact":
            second = Estimate.exact(value, verdict="finite")
        else:
            se = math.hypot(s2.std_error, t2.std_error * (s2.value - 1.0) / (1.0 - t2.value)) / (1.0 - t2.value)
            second = Estimate.monte_carlo(value, se, "finite")
    return MomentReport(float(p), sm, tp, verdict, bool(verdict and d1), second)


# ---------------------------------------------------------------------------
# tail index b


def tail_root_b(model: WeightModel, b_max: float = 8.0, mc_budget: int = 100_000, rng=None) -> float:
    """Root of t(beta) = 1 in (1, b_max] for a model normalized by t(1) = 1."""
    check_condition_d(model, 1.0, mc_budget, rng)
    roots = solve_beta_roots(model, b_max, mc_budget=mc_budget, rng=rng).roots
    above = [r for r in roots if r > 1.0 + 1e-6]
    if not above:
        raise NoRoot(f"t(beta) = 1 has no root in (1, {b_max}]")
    return float(above[0])


# ---------------------------------------------------------------------------
# Hill estimator


@dataclass(frozen=True)
class HillEstimate:
    index: float
    ci_low: float
    ci_high: float
    threshold: float
    exceedances: int
    effective_exceedances: float

    def to_json(self):
        return {"index": self.index, "ci": [self.ci_low, self.ci_high], "threshold": self.threshold,
                "exceedances": self.exceedances, "effective_exceedances": self.effective_exceedances}


def hill_estimate(dist: EmpiricalDist, k_fraction: float = 0.05, level: float = 0.95) -> HillEstimate:
    """Hill estimator over the top ``k_fraction`` of the law (by weight).

    For weighted samples the threshold is the level whose weighted tail
    mass is ``k_fraction``; the confidence interval uses the effective
    number of exceedances.
    """
    from scipy.stats import norm

    if not 0.0 < k_fraction <= 0.2:
        raise ValueError("k_fraction must lie in (0, 0.2]")
    if dist.size < MIN_HILL_SAMPLES:
        raise TooFewSamples(f"Hill estimator needs at least {MIN_HILL_SAMPLES} samples, got {dist.size}")
    xs, ws, _, _ = dist._sorted
    above = np.concatenate([np.cumsum(ws[::-1])[::-1][1:], [0.0]])
    i = int(np.argmax(above <= k_fraction * (1.0 + 1e-12)))
    u = xs[i]
    sel = xs > u
    if sel.sum() < 2 or not u > 0:
        raise TooFewSamples("too few exceedances above the Hill threshold")
    w = ws[sel]
    h = float(np.sum(w * np.log(xs[sel] / u)) / w.sum())
    k_eff = float(w.sum() ** 2 / np.sum(w * w))
    index = 1.0 / h
    z = norm.ppf(0.5 + level / 2.0)
    half = z * index / math.sqrt(k_eff)
    return HillEstimate(index, float(index - half), float(index + half), float(u), int(sel.sum()), k_eff)


# ---------------------------------------------------------------------------
# fixed-point samples for tail work


@dataclass(frozen=True)
class FixedPointSample:
    dist: EmpiricalDist
    pairs: PerpetuityPairs
    pool: EmpiricalDist
    pool_stabilized: bool

    def to_json(self):
        return {"size": self.dist.size, "mean": self.dist.mean(),
                "effective_size": self.dist.effective_size(),
                "max_residual_product": self.pairs.max_residual_product,
                "pool_size": self.pool.size, "pool_stabilized": self.pool_stabilized}


def sample_fixed_point(model: WeightModel, replicas: int = 1_000_000, rng=None,
                       pool_size: int = 200_000, pool_iterations: int = 60,
                       tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> FixedPointSample:
    """Unit-mean fixed point as 1/x-weighted draws of the size-biased perpetuity.

    A population-dynamics pool supplies the non-spine summands; the heavy
    tail itself is carried by the products B1 B2 ..., which are exact.
    """
    rng = rng or np.random.default_rng()
    seed = from_law(PointMass(1.0), int(pool_size), rng, "delta1")
    res = iterate_population(model, seed, int(pool_iterations), int(pool_size), rng,
                             target_mean=1.0, tail_tol=tail_tol, workers=workers)
    pairs = sample_perpetuity_pairs(model, res.pool, int(replicas), rng, tail_tol=tail_tol,
                                    workers=workers)
    keep = pairs.wbar > 0
    dist = EmpiricalDist.weighted(pairs.wbar[keep], 1.0 / pairs.wbar[keep], "fixed-point")
    return FixedPointSample(dist, pairs, res.pool, bool(res.stabilized))


# ---------------------------------------------------------------------------
# empirical plateau of x^b * tail


@dataclass(frozen=True)
class Plateau:
    thresholds: np.ndarray
    values: np.ndarray
    median: float
    spread: float
    octave_ratio: float

    def to_json(self):
        return {"thresholds": self.thresholds.tolist(), "values": self.values.tolist(),
                "median": self.median, "spread": self.spread, "octave_ratio": self.octave_ratio}

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.values.tolist()))


def tail_plateau(dist: EmpiricalDist, b: float, top_count: int = 500, points: int = 11) -> Plateau:
    """x^b * P(X > x) over the decade ending where ``top_count`` raw samples remain."""
    xs = dist._sorted[0]
    if xs.size <= top_count:
        raise TooFewSamples("sample too small for a top-decade plateau")
    x_top = xs[-int(top_count)]
    th = np.geomspace(x_top / 10.0, x_top, points)
    vals = th**b * dist.tail(th)
    med = float(np.median(vals))
    spread = float(vals.max() / vals.min() - 1.0) if vals.min() > 0 else math.inf
    pair = np.array([x_top / 2.0, x_top])
    octave = pair**b * dist.tail(pair)
    ratio = float(octave.max() / octave.min() - 1.0) if octave.min() > 0 else math.inf
    return Plateau(th, vals, med, spread, ratio)


# ---------------------------------------------------------------------------
# C_b


@dataclass(frozen=True)
class TailReport:
    b: float
    hill_estimate: HillEstimate | None
    cb_formula: Estimate
    cb_empirical: Estimate
    lattice_span: float | None
    case: str
    denominator: Estimate
    plateau: Plateau
    dominance: dict
    grid: dict
    cb_unscaled: Estimate | None = None
    flags: list = field(default_factory=list)

    def agreement(self) -> float:
        return abs(self.cb_formula.value - self.cb_empirical.value) / abs(self.cb_formula.value)

    def to_json(self):
        return {
            "b": self.b,
            "hill_estimate": None if self.hill_estimate is None else self.hill_estimate.to_json(),
            "cb_formula": self.cb_formula.to_json(),
            "cb_empirical": self.cb_empirical.to_json(),
            "cb_unscaled": None if self.cb_unscaled is None else self.cb_unscaled.to_json(),
            "lattice_span": self.lattice_span,
            "case": self.case,
            "denominator": self.denominator.to_json(),
            "plateau": self.plateau.to_json(),
            "dominance": self.dominance,
            "grid": self.grid,
            "agreement": self.agreement(),
            "flags": list(self.flags),
        }


class _TailSums:
    """Sorted suffix sums so tail averages at many thresholds cost one search each."""

    def __init__(self, key, values):
        order = np.argsort(key, kind="stable")
        self.key = key[order]
        self.suffix = [np.concatenate([np.cumsum(v[order][::-1])[::-1], [0.0]]) for v in values]

    def __call__(self, y):
        k = np.searchsorted(self.key, y, side="right")
        return [s[k] for s in self.suffix]


def _check_tail_hypotheses(model, b, mc_budget, rng):
    check_condition_d(model, 1.0, mc_budget, rng)
    tb = t_beta(model, b, mc_budget, rng)
    tol = CONDITION_D_TOL if tb.kind == "exact" else 3.0 * tb.std_error
    if abs(tb.value - 1.0) > tol:
        raise HypothesesViolated(f"t({b}) = {tb.value!r} is not 1")
    sm = sum_weights_moment(model, b, mc_budget, rng)
    if sm.verdict != "finite":
        raise HypothesesViolated(f"E(sum X)^{b} does not look finite")
    if not model.count_is_finite():
        # shot noise: the X^b log+ X moment reduces to h(0) <= 1 bounded weights
        if model.h.h0 > 1.0:
            raise HypothesesViolated("weights above 1 need a finite X^b log+ X moment")


def compute_cb(model: WeightModel, fixed_point, b: float, mc_budget: int = 1_000_000, rng=None,
               grid_points: int = 400, hill_k_fraction: float = 1e-5, top_count: int = 500,
               strict: bool = False, tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> TailReport:
    """Tail constant C_b from the formula and from the empirical plateau.

    ``fixed_point`` is a FixedPointSample (reuses its perpetuity pairs) or
    an EmpiricalDist used as the pool for ``mc_budget`` fresh pairs.
    Nonarithmetic: C_b = m E[Wbar^(b-1) - (B Wbar')^(b-1)] / (b t'(b)),
    which is the integral of y^(b-1) (mu(y,inf) - N(y,inf)) evaluated
    sample by sample. Arithmetic (model.lattice_span set): the lattice
    sum of Q_b(span k) times the span.
    """
    rng = rng or np.random.default_rng()
    _check_tail_hypotheses(model, b, min(mc_budget, 100_000), rng)
    if isinstance(fixed_point, FixedPointSample):
        pairs, dist = fixed_point.pairs, fixed_point.dist
    elif isinstance(fixed_point, EmpiricalDist):
        pairs = sample_perpetuity_pairs(model, fixed_point, int(mc_budget), rng, tail_tol=tail_tol,
                                        workers=workers)
        keep = pairs.wbar > 0
        dist = EmpiricalDist.weighted(pairs.wbar[keep], 1.0 / pairs.wbar[keep], "fixed-point")
    else:
        raise TypeError("fixed_point must be a FixedPointSample or EmpiricalDist")

    keep = pairs.shifted > 0
    wb, z = pairs.wbar[keep], pairs.shifted[keep]
    n = wb.size
    m = dist.mean()
    den = t_beta_derivative(model, b, rng=rng)
    if not den.value > 0:
        raise HypothesesViolated("E sum X^b log X must be positive at the tail root")

    # integral over all y, sample by sample
    per = m * (wb ** (b - 1.0) - z ** (b - 1.0)) / b
    integral = Estimate.from_samples(per)
    cb_na = Estimate.monte_carlo(integral.value / den.value, integral.std_error / den.value)

    # the same integral on a log grid, with the paired standard error of mu - N
    lo, hi = dist.quantile(0.01), dist.quantile(0.9999)
    ys = np.geomspace(lo, hi, int(grid_points))
    tw = _TailSums(wb, [1.0 / wb, 1.0 / wb**2])
    tz = _TailSums(z, [1.0 / z, 1.0 / z**2, 1.0 / (wb * z)])
    sw, sw2 = tw(ys)
    sz, sz2, cross = tz(ys)
    diff = m * (sw - sz) / n
    second = m * m * (sw2 + sz2 - 2.0 * cross) / n
    se = np.sqrt(np.maximum(second - diff**2, 0.0) / n)
    integrand = ys**b * diff
    low_rem = m * np.mean(np.minimum(wb, lo) ** b / wb - np.minimum(z, lo) ** b / z) / b
    high_rem = m * np.mean(np.maximum(wb**b - hi**b, 0.0) / wb - np.maximum(z**b - hi**b, 0.0) / z) / b
    grid_integral = float(np.trapezoid(integrand, np.log(ys))) + low_rem + high_rem
    signs = np.sign(diff[np.abs(diff) > 2.0 * se])
    flips = int(np.count_nonzero(np.diff(signs)))
    flags = []
    if flips > SIGN_FLIP_LIMIT * ys.size:
        flags.append("noisy-difference")
        if strict:
            raise NoisyDifference(f"{flips} significant sign changes of mu - N on the grid")

    # mu >= N holds in the tail; near 0 N carries extra mass (N(0+, inf) = m E[1/B] E[1/Wbar])
    region = ys >= dist.quantile(DOMINANCE_QUANTILE)
    slack = diff + 2.0 * se
    dominance = {
        "region_start": float(ys[region][0]) if region.any() else None,
        "holds_in_tail": bool(np.all(slack[region] >= 0.0)),
        "violations_in_tail": int(np.count_nonzero(slack[region] < 0.0)),
        "violations_full_grid": int(np.count_nonzero(slack < 0.0)),
        "size_biased_pathwise": bool(np.all(pairs.wbar >= pairs.shifted)),
    }
    grid = {
        "points": int(ys.size), "range": [float(lo), float(hi)],
        "integral": grid_integral / den.value, "low_remainder": low_rem, "high_remainder": high_rem,
        "noise_floor": float(np.median(ys**b * se)), "sign_flips": flips,
        "y": ys.tolist(), "mu_minus_n": diff.tolist(), "se": se.tolist(),
    }

    span = model.lattice_span
    cb_unscaled = None
    if span is not None:
        total, k = _lattice_sum(wb, z, m, b, span)
        cb_unscaled = Estimate.monte_carlo(total / den.value, 0.0)
        cb = Estimate.monte_carlo(span * total / den.value, 0.0)
        case = "arithmetic"
        grid["lattice_terms"] = k
    else:
        cb = cb_na
        case = "nonarithmetic"

    plateau = tail_plateau(dist, b, top_count)
    # relative error of a tail frequency is about 1/sqrt(raw exceedances)
    mid = plateau.thresholds[plateau.thresholds.size // 2]
    hits = max(int(dist.tail_count(mid)), 1)
    cb_emp = Estimate.monte_carlo(plateau.median, plateau.median / math.sqrt(hits), "plateau")
    hill = None
    try:
        hill = hill_estimate(dist, hill_k_fraction)
    except TooFewSamples:
        flags.append("hill-skipped")
    return TailReport(float(b), hill, cb, cb_emp, span, case, den, plateau, dominance, grid,
                      cb_unscaled, flags)


def _lattice_sum(wb, z, m, b, span):
    """sum_k exp(-span k) int_0^exp(span k) y^b (mu - N)(y, inf) dy, k over Z."""

    def q(k):
        cap = math.exp(span * k)
        a = np.minimum(wb, cap) ** (b + 1.0) / wb
        c = np.minimum(z, cap) ** (b + 1.0) / z
        return math.exp(-span * k) * m * float(np.mean(a - c)) / (b + 1.0)

    total = q(0)
    terms = 1
    for step in (1, -1):
        k = step
        while True:
            term = q(k)
            total += term
            terms += 1
            if abs(term) < ARITH_REL_STOP * abs(total) or terms > 100_000:
                break
            k += step
    return total, terms
