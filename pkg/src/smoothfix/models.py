"""Weight models: the random collection {X_i} driving the smoothing transform.

Four concrete kinds are supported:

* ``FixedWeights``: a deterministic list of weights.
* ``CommonRandomWeight``: ``count`` copies of one random weight A.
* ``RandomCountFixedWeight``: a random number L of copies of one weight.
* ``ShotNoise``: weights h(tau_i) for a Poisson flow tau_i of intensity
  lambda (infinitely many summands when h has unbounded support).

Realizations are sampled in batches as flat arrays with an owner index,
which keeps the Monte Carlo engines vectorized. Closed-form moment
functionals are available for every kind; Monte Carlo estimators exist
for all of them as well so the two routes can be compared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import parallel
from .decay import DecayProfile, ExpDecay, decay_from_json
from .errors import (
    ConditionDViolated,
    ConfigError,
    DegenerateWeights,
    Divergent,
    SubcriticalCount,
)
from .estimates import Estimate, nested_means, stabilization_verdict

PROB_TOL = 1e-12
CONDITION_D_TOL = 1e-6
OVERFLOW_GUARD = 1e300
DEFAULT_TAIL_TOL = 1e-10
GEOMETRIC_TRUNCATION = 1e-17


# ---------------------------------------------------------------------------
# realization containers


@dataclass(frozen=True)
class PointSample:
    """One realization, weights sorted nonincreasing."""

    weights: np.ndarray
    truncation_bound: float = 0.0


@dataclass(frozen=True)
class PointBatch:
    """Many realizations stored flat: ``owner[k]`` is the realization of point k."""

    weights: np.ndarray
    owner: np.ndarray
    count: int
    truncation_bound: float = 0.0

    def sums(self, power: float = 1.0) -> np.ndarray:
        w = self.weights if power == 1.0 else self.weights**power
        return np.bincount(self.owner, weights=w, minlength=self.count)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.count)

    def realization(self, j: int) -> np.ndarray:
        return np.sort(self.weights[self.owner == j])[::-1]


@dataclass(frozen=True)
class RealizationLaw:
    """Finite enumeration of the realization law.

    Realization j consists of ``counts[j, u]`` copies of ``values[u]`` and
    has probability ``probs[j]``. ``dropped`` is the probability removed
    by truncating an infinite enumeration (renormalized away).
    """

    values: np.ndarray
    counts: np.ndarray
    probs: np.ndarray
    dropped: float = 0.0

    def power_sums(self, beta: float) -> np.ndarray:
        return self.counts @ (self.values**beta)


def _parse_real(v) -> float:
    if isinstance(v, bool):
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse number {v!r}") from exc
    raise ConfigError(f"expected a number, got {v!r}")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ConfigError(f"probabilities must be nonnegative and sum to 1 (got sum {p.sum()!r})")
    return p / p.sum()


def _finite_or_divergent(value: float, what: str) -> float:
    if not math.isfinite(value) or abs(value) > OVERFLOW_GUARD:
        raise Divergent(f"{what} is not finite ({value!r})")
    return value


# ---------------------------------------------------------------------------
# model kinds


class WeightModel:
    kind = "abstract"
    lattice_span: float | None = None
    exact_moments: bool = True

    # structure
    def mean_count(self) -> float:
        raise NotImplementedError

    def count_is_finite(self) -> bool:
        return True

    def is_degenerate(self) -> bool:
        raise NotImplementedError

    def realization_law(self) -> RealizationLaw | None:
        return None

    # sampling
    def sample_batch(self, count: int, rng, tail_tol: float = DEFAULT_TAIL_TOL) -> PointBatch:
        raise NotImplementedError

    def sample_size_biased(self, beta: float, count: int, rng, tail_tol: float = DEFAULT_TAIL_TOL):
        """Realizations drawn with probability proportional to sum X_i^beta.

        Returns ``(batch, spine)`` where ``spine[j]`` is the flat index of
        the point of realization j chosen with probability X_i^beta / sum.
        The law is exact; normalization uses the closed-form t(beta).
        """
        raise NotImplementedError

    # closed forms
    def exact_t(self, beta: float) -> float:
        raise NotImplementedError

    def exact_dt(self, beta: float) -> float:
        raise NotImplementedError

    def exact_sum_moment(self, p: float) -> float:
        raise NotImplementedError

    def exact_xlogx(self, beta: float) -> float:
        """E S log+ S with S = sum X_i^beta."""
        law = self.realization_law()
        if law is None:
            raise NotImplementedError
        s = law.power_sums(beta)
        with np.errstate(divide="ignore"):
            v = np.where(s > 1.0, s * np.log(np.maximum(s, 1.0)), 0.0)
        return float(law.probs @ v)

    def log_weight_law(self, beta: float):
        """Exact law of log B under chi*_beta as (values, probs), when discrete."""
        law = self.realization_law()
        if law is None:
            return None
        t = self.exact_t(beta)
        mass = (law.probs @ law.counts) * law.values**beta / t
        return np.log(law.values), mass / mass.sum()

    def to_json(self) -> dict:
        raise NotImplementedError

    def _extra_json(self, out):
        if self.lattice_span is not None:
            out["lattice_span"] = self.lattice_span
        if not self.exact_moments:
            out["exact_moments"] = False
        return out


def _expand(values_per_real: list[np.ndarray], idx: np.ndarray):
    """Flatten realizations ``values_per_real[idx[j]]`` into a PointBatch layout."""
    lengths = np.array([v.size for v in values_per_real])
    flat = np.concatenate(values_per_real)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    n = lengths[idx]
    owner = np.repeat(np.arange(idx.size), n)
    starts = np.concatenate([[0], np.cumsum(n)[:-1]])
    pos = np.arange(n.sum()) - np.repeat(starts, n)
    weights = flat[np.repeat(offsets[idx], n) + pos]
    return weights, owner, starts


class FixedWeights(WeightModel):
    kind = "FixedWeights"

    def __init__(self, weights, lattice_span=None, exact_moments=True):
        w = np.array([_parse_real(v) for v in weights], dtype=float)
        if w.size == 0 or np.any(~(w > 0)) or np.any(~np.isfinite(w)):
            raise ConfigError("fixed weights must be a nonempty list of positive reals")
        self.weights = np.sort(w)[::-1]
        self.lattice_span = lattice_span
        self.exact_moments = exact_moments

    def mean_count(self):
        return float(self.weights.size)

    def is_degenerate(self):
        return bool(np.all(self.weights == 1.0))

    def realization_law(self):
        vals, cnt = np.unique(self.weights, return_counts=True)
        return RealizationLaw(vals, cnt[None, :].astype(float), np.array([1.0]))

    def sample_batch(self, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        n = self.weights.size
        return PointBatch(np.tile(self.weights, count), np.repeat(np.arange(count), n), count)

    def sample_size_biased(self, beta, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        batch = self.sample_batch(count, rng)
        p = self.weights**beta
        pick = rng.choice(self.weights.size, size=count, p=p / p.sum())
        return batch, np.arange(count) * self.weights.size + pick

    def exact_t(self, beta):
        return float(np.sum(self.weights**beta))

    def exact_dt(self, beta):
        return float(np.sum(self.weights**beta * np.log(self.weights)))

    def exact_sum_moment(self, p):
        return float(np.sum(self.weights) ** p)

    def to_json(self):
        return self._extra_json({"kind": self.kind, "weights": [float(v) for v in self.weights]})


class CommonRandomWeight(WeightModel):
    kind = "CommonRandomWeight"

    def __init__(self, count, atoms, lattice_span=None, exact_moments=True):
        count = int(count)
        if count < 1:
            raise ConfigError("count must be a positive integer")
        vals = np.array([_parse_real(a) for a, _ in atoms], dtype=float)
        probs = _check_probs([_parse_real(p) for _, p in atoms])
        if np.any(~(vals > 0)) or np.any(~np.isfinite(vals)):
            raise ConfigError("atom values must be positive reals")
        self.count = count
        self.values = vals
        self.probs = probs
        self.lattice_span = lattice_span
        self.exact_moments = exact_moments

    def mean_count(self):
        return float(self.count)

    def is_degenerate(self):
        return bool(np.all(self.values[self.probs > 0] == 1.0))

    def realization_law(self):
        k = self.values.size
        return RealizationLaw(self.values, np.eye(k) * self.count, self.probs)

    def sample_batch(self, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        a = self.values[rng.choice(self.values.size, size=count, p=self.probs)]
        return PointBatch(np.repeat(a, self.count), np.repeat(np.arange(count), self.count), count)

    def sample_size_biased(self, beta, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        q = self.probs * self.values**beta
        a = self.values[rng.choice(self.values.size, size=count, p=q / q.sum())]
        batch = PointBatch(np.repeat(a, self.count), np.repeat(np.arange(count), self.count), count)
        pick = rng.integers(0, self.count, size=count)
        return batch, np.arange(count) * self.count + pick

    def exact_t(self, beta):
        return float(self.count * np.sum(self.probs * self.values**beta))

    def exact_dt(self, beta):
        return float(self.count * np.sum(self.probs * self.values**beta * np.log(self.values)))

    def exact_sum_moment(self, p):
        return float(self.count**p * np.sum(self.probs * self.values**p))

    def to_json(self):
        atoms = [[float(v), float(p)] for v, p in zip(self.values, self.probs)]
        return self._extra_json({"kind": self.kind, "count": self.count, "atoms": atoms})


class RandomCountFixedWeight(WeightModel):
    """L copies of ``weight``; L is geometric(q) on {1,2,...} or an atom list."""

    kind = "RandomCountFixedWeight"

    def __init__(self, weight, geometric_q=None, count_atoms=None, lattice_span=None,
                 exact_moments=True):
        self.weight = _parse_real(weight)
        if not self.weight > 0 or not math.isfinite(self.weight):
            raise ConfigError("weight must be a positive real")
        if (geometric_q is None) == (count_atoms is None):
            raise ConfigError("give exactly one of a geometric parameter or a count atom list")
        self.geometric_q = None
        self.count_values = None
        self.count_probs = None
        if geometric_q is not None:
            q = _parse_real(geometric_q)
            if not 0.0 <= q < 1.0:
                raise ConfigError("geometric parameter q must lie in [0, 1)")
            self.geometric_q = q
        else:
            ks = np.array([int(_parse_real(k)) for k, _ in count_atoms])
            if np.any(ks < 1):
                raise ConfigError("counts live on {1, 2, ...}")
            self.count_values = ks
            self.count_probs = _check_probs([_parse_real(p) for _, p in count_atoms])
        self.lattice_span = lattice_span
        self.exact_moments = exact_moments

    def _count_law(self):
        if self.geometric_q is None:
            return self.count_values, self.count_probs, 0.0
        q = self.geometric_q
        if q == 0.0:
            return np.array([1]), np.array([1.0]), 0.0
        kmax = max(1, int(math.ceil(math.log(GEOMETRIC_TRUNCATION) / math.log(q))))
        ks = np.arange(1, kmax + 1)
        pk = (1 - q) * q ** (ks - 1)
        dropped = q**kmax
        return ks, pk / pk.sum(), dropped

    def _count_power_moment(self, p):
        if self.geometric_q is None:
            return float(np.sum(self.count_probs * self.count_values.astype(float) ** p))
        q = self.geometric_q
        if p == 1.0:
            return 1.0 / (1.0 - q)
        if p == 2.0:
            return (1.0 + q) / (1.0 - q) ** 2
        # series summed until terms are negligible
        total, k = 0.0, 1
        while True:
            term = (1 - q) * q ** (k - 1) * float(k) ** p
            total += term
            if k > 10 and term < 1e-18 * total:
                return total
            k += 1
            if k > 10**6:
                raise Divergent("count moment series did not converge")

    def mean_count(self):
        return self._count_power_moment(1.0)

    def is_degenerate(self):
        return self.weight == 1.0

    def realization_law(self):
        ks, pk, dropped = self._count_law()
        return RealizationLaw(np.array([self.weight]), ks[:, None].astype(float), pk, dropped)

    def _draw_counts(self, count, rng, biased=False):
        if self.geometric_q is not None:
            p = 1.0 - self.geometric_q
            if biased:
                return 1 + rng.negative_binomial(2, p, size=count)
            return rng.geometric(p, size=count)
        probs = self.count_probs
        if biased:
            probs = probs * self.count_values
            probs = probs / probs.sum()
        return self.count_values[rng.choice(self.count_values.size, size=count, p=probs)]

    def _batch_from_counts(self, n):
        count = n.size
        return PointBatch(np.full(int(n.sum()), self.weight), np.repeat(np.arange(count), n), count)

    def sample_batch(self, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        return self._batch_from_counts(self._draw_counts(count, rng))

    def sample_size_biased(self, beta, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        n = self._draw_counts(count, rng, biased=True)
        batch = self._batch_from_counts(n)
        starts = np.concatenate([[0], np.cumsum(n)[:-1]])
        pick = np.floor(rng.random(count) * n).astype(np.int64)
        return batch, starts + pick

    def exact_t(self, beta):
        return float(self.mean_count() * self.weight**beta)

    def exact_dt(self, beta):
        return float(self.mean_count() * self.weight**beta * math.log(self.weight))

    def exact_sum_moment(self, p):
        return float(self.weight**p * self._count_power_moment(p))

    def exact_xlogx(self, beta):
        wb = self.weight**beta
        if self.geometric_q is None:
            s = self.count_values * wb
            v = np.where(s > 1.0, s * np.log(np.maximum(s, 1.0)), 0.0)
            return float(self.count_probs @ v)
        q = self.geometric_q
        total, k = 0.0, 1
        while True:
            s = k * wb
            term = (1 - q) * q ** (k - 1) * (s * math.log(s) if s > 1.0 else 0.0)
            total += term
            if k > 10 and term <= 1e-18 * max(total, 1e-300) and (1 - q) * q ** (k - 1) < 1e-17:
                return total
            k += 1

    def to_json(self):
        if self.geometric_q is not None:
            count = {"geometric": self.geometric_q}
        else:
            count = {"atoms": [[int(k), float(p)] for k, p in zip(self.count_values, self.count_probs)]}
        return self._extra_json({"kind": self.kind, "count": count, "weight": self.weight})


class ShotNoise(WeightModel):
    """Weights h(tau_i) for a Poisson flow of intensity lambda."""

    kind = "ShotNoise"

    def __init__(self, h: DecayProfile, intensity: float = 1.0, lattice_span=None,
                 exact_moments=True):
        if not isinstance(h, DecayProfile):
            raise ConfigError("ShotNoise needs a DecayProfile")
        lam = _parse_real(intensity)
        if not lam > 0:
            raise ConfigError("intensity must be positive")
        if not math.isfinite(h.integral()):
            raise ConfigError("decay profile must be integrable")
        self.h = h
        self.intensity = lam
        self.lattice_span = lattice_span
        self.exact_moments = exact_moments

    def mean_count(self):
        return self.intensity * self.h.support_end

    def count_is_finite(self):
        return math.isfinite(self.h.support_end)

    def is_degenerate(self):
        return self.h.is_unit_step()

    def horizon(self, tail_tol):
        return self.h.horizon(tail_tol / self.intensity)

    def sample_batch(self, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        T = self.horizon(tail_tol)
        bound = self.intensity * self.h.tail_integral(T)
        n = rng.poisson(self.intensity * T, size=count)
        tau = rng.random(int(n.sum())) * T
        owner = np.repeat(np.arange(count), n)
        return PointBatch(self.h(tau), owner, count, bound)

    def sample_size_biased(self, beta, count, rng, tail_tol=DEFAULT_TAIL_TOL):
        # Mecke: biasing by sum h(tau_i)^beta adds one point with density
        # proportional to h^beta; that extra point is the chosen one.
        base = self.sample_batch(count, rng, tail_tol)
        extra_t = self.h.sample_power_biased_times(beta, count, rng)
        extra = self.h(extra_t)
        weights = np.concatenate([base.weights, extra])
        owner = np.concatenate([base.owner, np.arange(count)])
        order = np.argsort(owner, kind="stable")
        spine = np.empty(count, dtype=np.int64)
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        spine[:] = inv[base.weights.size + np.arange(count)]
        batch = PointBatch(weights[order], owner[order], count, base.truncation_bound)
        return batch, spine

    def exact_t(self, beta):
        return float(self.intensity * self.h.power_integral(beta))

    def exact_dt(self, beta):
        return float(self.intensity * self.h.power_log_integral(beta))

    def cumulant(self, n: int) -> float:
        return self.intensity * self.h.power_integral(float(n))

    def exact_sum_moment(self, p):
        if float(p) != int(p):
            raise NotImplementedError
        n = int(p)
        kappa = [0.0] + [self.cumulant(k) for k in range(1, n + 1)]
        moments = [1.0]
        for j in range(1, n + 1):
            moments.append(sum(math.comb(j - 1, k - 1) * kappa[k] * moments[j - k]
                               for k in range(1, j + 1)))
        return float(moments[n])

    def exact_xlogx(self, beta):
        raise NotImplementedError

    def to_json(self):
        return self._extra_json({"kind": self.kind, "h": self.h.to_json(), "intensity": self.intensity})


# ---------------------------------------------------------------------------
# construction from JSON

_KIND_ALIASES = {
    "fixedweights": "FixedWeights",
    "fixed": "FixedWeights",
    "commonrandomweight": "CommonRandomWeight",
    "common": "CommonRandomWeight",
    "randomcountfixedweight": "RandomCountFixedWeight",
    "randomcount": "RandomCountFixedWeight",
    "shotnoise": "ShotNoise",
}


def model_from_json(obj) -> WeightModel:
    if isinstance(obj, WeightModel):
        return obj
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError("model must be a JSON object with a 'kind'")
    key = str(obj["kind"]).replace("-", "").replace("_", "").lower()
    kind = _KIND_ALIASES.get(key)
    span = obj.get("lattice_span")
    span = None if span is None else _parse_real(span)
    if span is not None and not span > 0:
        raise ConfigError("lattice_span must be positive")
    exact = bool(obj.get("exact_moments", True))
    try:
        if kind == "FixedWeights":
            return FixedWeights(obj["weights"], span, exact)
        if kind == "CommonRandomWeight":
            return CommonRandomWeight(obj["count"], obj["atoms"], span, exact)
        if kind == "RandomCountFixedWeight":
            count = obj["count"]
            if not isinstance(count, dict):
                raise ConfigError("count must be {'geometric': q} or {'atoms': [[k, p], ...]}")
            if "geometric" in count:
                return RandomCountFixedWeight(obj["weight"], geometric_q=count["geometric"],
                                              lattice_span=span, exact_moments=exact)
            return RandomCountFixedWeight(obj["weight"], count_atoms=count["atoms"],
                                          lattice_span=span, exact_moments=exact)
        if kind == "ShotNoise":
            return ShotNoise(decay_from_json(obj["h"]), obj.get("intensity", 1.0), span, exact)
    except KeyError as exc:
        raise ConfigError(f"model is missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed model: {exc}") from exc
    raise ConfigError(f"unknown model kind {obj['kind']!r}")


def geometric_model(q: float = 0.5, weight: float = 0.5) -> RandomCountFixedWeight:
    return RandomCountFixedWeight(weight, geometric_q=q)


def two_point_model() -> CommonRandomWeight:
    """Two equal weights A with E A = E A^2 = 1/2, so t(1) = t(2) = 1."""
    return CommonRandomWeight(2, [("4/3", "9/34"), ("1/5", "25/34")])


def oscillating_model() -> CommonRandomWeight:
    """t(1) = 1 is a tangent root and log B is +-arccosh(2) with equal odds."""
    r = math.sqrt(3.0)
    return CommonRandomWeight(2, [(2.0 + r, (2.0 - r) / 4.0), (2.0 - r, (2.0 + r) / 4.0)])


def exp_shot_noise(rate: float = 1.0, intensity: float = 1.0) -> ShotNoise:
    return ShotNoise(ExpDecay(rate), intensity)


# ---------------------------------------------------------------------------
# operations


def validate_model(model: WeightModel) -> None:
    if model.is_degenerate():
        raise DegenerateWeights("all weights are almost surely in {0, 1}")
    if model.count_is_finite():
        el = model.mean_count()
        if el <= 1.0 + 1e-12:
            raise SubcriticalCount(f"E L = {el!r} <= 1")


def sample_points(model: WeightModel, rng, tail_tol: float = DEFAULT_TAIL_TOL) -> PointSample:
    if not tail_tol > 0:
        raise ValueError("tail_tol must be positive")
    batch = model.sample_batch(1, rng, tail_tol)
    return PointSample(np.sort(batch.weights)[::-1], float(batch.truncation_bound))


def _mc_stat(model, fn, mc_budget, rng, tail_tol, workers=None):
    def chunk(g, size):
        return fn(model.sample_batch(size, g, tail_tol))

    vals = parallel.chunked_concat(chunk, int(mc_budget), rng, workers=workers)
    return vals


def _rng(rng):
    return np.random.default_rng(0) if rng is None else rng


def t_beta(model: WeightModel, beta: float, mc_budget: int = 100_000, rng=None,
           exact: bool | None = None, tail_tol: float = DEFAULT_TAIL_TOL, workers=None) -> Estimate:
    if not beta > 0:
        raise ValueError("beta must be positive")
    use_exact = model.exact_moments if exact is None else exact
    if use_exact:
        return Estimate.exact(_finite_or_divergent(model.exact_t(beta), f"t({beta})"))
    vals = _mc_stat(model, lambda b: b.sums(beta), mc_budget, _rng(rng), tail_tol, workers)
    est = Estimate.from_samples(vals)
    _finite_or_divergent(est.value, f"t({beta})")
    return est


def t_beta_derivative(model: WeightModel, beta: float, mc_budget: int = 100_000, rng=None,
                      exact: bool | None = None, tail_tol: float = DEFAULT_TAIL_TOL,
                      workers=None) -> Estimate:
    if not beta > 0:
        raise ValueError("beta must be positive")
    use_exact = model.exact_moments if exact is None else exact
    if use_exact:
        return Estimate.exact(_finite_or_divergent(model.exact_dt(beta), f"t'({beta})"))

    def stat(b):
        w = b.weights
        return np.bincount(b.owner, weights=w**beta * np.log(w), minlength=b.count)

    est = Estimate.from_samples(_mc_stat(model, stat, mc_budget, _rng(rng), tail_tol, workers))
    _finite_or_divergent(est.value, f"t'({beta})")
    return est


def sum_weights_moment(model: WeightModel, p: float, mc_budget: int = 100_000, rng=None,
                       exact: bool | None = None, tail_tol: float = DEFAULT_TAIL_TOL,
                       workers=None) -> Estimate:
    if p < 1:
        raise ValueError("p must be at least 1")
    use_exact = model.exact_moments if exact is None else exact
    if use_exact:
        try:
            v = model.exact_sum_moment(p)
            return Estimate.exact(_finite_or_divergent(v, f"E(sum X)^{p}"), verdict="finite")
        except NotImplementedError:
            pass
    vals = _mc_stat(model, lambda b: b.sums(1.0) ** p, mc_budget, _rng(rng), tail_tol, workers)
    est = Estimate.from_samples(vals)
    _finite_or_divergent(est.value, f"E(sum X)^{p}")
    # discarded summands contribute at most p * E[S^(p-1)] * bound to first order
    if isinstance(model, ShotNoise):
        T = model.horizon(tail_tol)
        bound = model.intensity * model.h.tail_integral(T)
        sums = vals ** (1.0 / p)
        fold = p * float(np.mean(sums ** (p - 1.0))) * bound
        est = Estimate.monte_carlo(est.value, est.std_error + fold)
    return est.with_verdict(stabilization_verdict(nested_means(vals)))


def check_condition_d(model: WeightModel, beta: float, mc_budget: int = 100_000, rng=None) -> Estimate:
    est = t_beta(model, beta, mc_budget, rng)
    tol = CONDITION_D_TOL if est.kind == "exact" else 3.0 * est.std_error
    if abs(est.value - 1.0) > tol:
        raise ConditionDViolated(f"t({beta}) = {est.value!r} differs from 1")
    return est


def sample_size_biased_node(model: WeightModel, beta: float, rng, count: int = 1,
                            pool: int | None = None, tail_tol: float = DEFAULT_TAIL_TOL,
                            check: bool = True):
    """Spine node draws ``(M, N)``.

    M is the chosen point's weight raised to beta (law chi*_beta) and N is
    the sum of X_i^beta over the same realization (size-biased law). With
    ``pool=None`` the size-biased realization is drawn exactly; with an
    integer ``pool`` each node resamples from that many fresh realizations.
    """
    if check:
        check_condition_d(model, beta, rng=np.random.default_rng(0))
    if pool is None:
        batch, spine = model.sample_size_biased(beta, count, rng, tail_tol)
        return batch.weights[spine] ** beta, batch.sums(beta)
    return _pool_resampled_nodes(model, beta, rng, count, int(pool), tail_tol)


def _pool_resampled_nodes(model, beta, rng, count, pool, tail_tol):
    batch = model.sample_batch(count * pool, rng, tail_tol)
    sums = batch.sums(beta).reshape(count, pool)
    cum = np.cumsum(sums, axis=1)
    u = rng.random(count) * cum[:, -1]
    choice = (cum < u[:, None]).sum(axis=1)
    real = np.arange(count) * pool + choice
    sizes = batch.sizes()
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    M = np.empty(count)
    for j in range(count):
        r = real[j]
        w = batch.weights[starts[r]: starts[r] + sizes[r]] ** beta
        c = np.cumsum(w)
        k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
        M[j] = w[min(k, w.size - 1)]
    return M, sums[np.arange(count), choice]
