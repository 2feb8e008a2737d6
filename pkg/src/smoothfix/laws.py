"""Closed-form reference laws used as oracles (KS targets, seeds, metrics)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import ConfigError

_SERIES_CUT = 1e-2


def _expm1_minus_id(z):
    """exp(z) - 1 - z for complex z without cancellation near 0."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < _SERIES_CUT
    zs = np.where(small, z, 0.0)
    series = zs * zs / 2.0 * (1.0 + zs / 3.0 * (1.0 + zs / 4.0 * (1.0 + zs / 5.0)))
    return np.where(small, series, np.expm1(np.where(small, 0.0, z)) - z)


def _log1p_minus_id(y):
    """log(1 + y) - y for complex y without cancellation near 0."""
    y = np.asarray(y, dtype=complex)
    small = np.abs(y) < _SERIES_CUT
    ys = np.where(small, y, 0.0)
    series = -ys * ys * (0.5 - ys / 3.0 + ys * ys / 4.0 - ys**3 / 5.0)
    return np.where(small, series, np.log1p(np.where(small, 0.0, y)) - y)


@dataclass(frozen=True)
class Exponential:
    rate: float = 1.0

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, -np.expm1(-self.rate * np.maximum(x, 0.0)), 0.0)

    def lst(self, s):
        return self.rate / (self.rate + np.asarray(s, dtype=float))

    def lst_tail(self, s):
        s = np.asarray(s, dtype=float)
        return s / (self.rate + s)

    def charfn(self, s):
        return self.rate / (self.rate - 1j * np.asarray(s, dtype=float))

    def charfn_increment(self, s):
        """E[exp(isX) - 1 - isX]."""
        s = np.asarray(s, dtype=float)
        return -s * s / (self.rate * (self.rate - 1j * s))

    @property
    def mean(self):
        return 1.0 / self.rate

    def moment(self, p):
        return special.gamma(p + 1.0) / self.rate**p

    def sample(self, size, rng):
        return rng.exponential(1.0 / self.rate, size)

    def to_json(self):
        return {"name": "exponential", "rate": self.rate}


@dataclass(frozen=True)
class Gamma:
    shape: float
    rate: float = 1.0

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return special.gammainc(self.shape, self.rate * np.maximum(x, 0.0))

    def lst(self, s):
        return (self.rate / (self.rate + np.asarray(s, dtype=float))) ** self.shape

    def lst_tail(self, s):
        s = np.asarray(s, dtype=float)
        return -np.expm1(-self.shape * np.log1p(s / self.rate))

    def charfn(self, s):
        return (1.0 - 1j * np.asarray(s, dtype=float) / self.rate) ** (-self.shape)

    def charfn_increment(self, s):
        """E[exp(isX) - 1 - isX]."""
        y = -1j * np.asarray(s, dtype=float) / self.rate
        lm = _log1p_minus_id(y)
        z = -self.shape * (y + lm)
        return _expm1_minus_id(z) - self.shape * lm

    @property
    def mean(self):
        return self.shape / self.rate

    def moment(self, p):
        return special.gamma(self.shape + p) / special.gamma(self.shape) / self.rate**p

    def sample(self, size, rng):
        return rng.gamma(self.shape, 1.0 / self.rate, size)

    def to_json(self):
        return {"name": "gamma", "shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class PointMass:
    at: float = 1.0

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.at, 1.0, 0.0)

    def lst(self, s):
        return np.exp(-self.at * np.asarray(s, dtype=float))

    def lst_tail(self, s):
        return -np.expm1(-self.at * np.asarray(s, dtype=float))

    def charfn(self, s):
        return np.exp(1j * self.at * np.asarray(s, dtype=float))

    def charfn_increment(self, s):
        return _expm1_minus_id(1j * self.at * np.asarray(s, dtype=float))

    @property
    def mean(self):
        return self.at

    def moment(self, p):
        return self.at**p

    def sample(self, size, rng):
        return np.full(size, self.at)

    def to_json(self):
        return {"name": "point", "at": self.at}


@dataclass(frozen=True)
class StableLaw:
    """Positive strictly alpha-stable law with transform exp(-s**alpha)."""

    alpha: float

    def lst(self, s):
        return np.exp(-np.asarray(s, dtype=float) ** self.alpha)

    def lst_tail(self, s):
        return -np.expm1(-np.asarray(s, dtype=float) ** self.alpha)

    def cdf(self, x):
        # scipy's levy_stable S1 parametrisation: beta=1, scale cos(pi a / 2)^(1/a)
        a = self.alpha
        scale = np.cos(np.pi * a / 2) ** (1.0 / a)
        return stats.levy_stable.cdf(np.asarray(x, dtype=float), a, 1.0, loc=0.0, scale=scale)

    @property
    def mean(self):
        return np.inf

    def to_json(self):
        return {"name": "stable", "alpha": self.alpha}


NAMED_LAWS = (Exponential, Gamma, PointMass)


def law_from_json(obj):
    if not isinstance(obj, dict) or "name" not in obj:
        raise ConfigError(f"named law must be an object with a 'name': {obj!r}")
    name = str(obj["name"]).lower()
    if name in ("exponential", "exp"):
        return Exponential(float(obj.get("rate", 1.0)))
    if name == "gamma":
        return Gamma(float(obj["shape"]), float(obj.get("rate", 1.0)))
    if name in ("point", "pointmass", "delta"):
        return PointMass(float(obj.get("at", 1.0)))
    raise ConfigError(f"unknown named law {obj['name']!r}")
