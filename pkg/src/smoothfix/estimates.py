"""Numbers with provenance.

Every reported quantity is one of three kinds: an exact closed form, a
Monte Carlo mean with a standard error, or a quadrature result with an
error bound. ``Estimate`` carries the kind alongside the value so that
reports never lose track of where a number came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

EXACT = "exact"
MONTE_CARLO = "monte-carlo"
QUADRATURE = "quadrature"


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float = 0.0
    kind: str = EXACT
    bound: float = 0.0
    verdict: str | None = None

    @classmethod
    def exact(cls, value, verdict=None):
        return cls(float(value), 0.0, EXACT, 0.0, verdict)

    @classmethod
    def monte_carlo(cls, value, std_error, verdict=None):
        return cls(float(value), float(std_error), MONTE_CARLO, 0.0, verdict)

    @classmethod
    def quadrature(cls, value, bound, std_error=0.0, verdict=None):
        return cls(float(value), float(std_error), QUADRATURE, float(bound), verdict)

    @classmethod
    def from_samples(cls, samples, verdict=None):
        x = np.asarray(samples, dtype=float)
        if x.size == 0:
            raise ValueError("no samples")
        se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
        return cls.monte_carlo(float(x.mean()), se, verdict)

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.value)

    @property
    def provenance(self) -> str:
        if self.kind == MONTE_CARLO:
            return f"monte-carlo({_fmt(self.std_error)})"
        if self.kind == QUADRATURE:
            return f"quadrature({_fmt(self.bound)})"
        return EXACT

    def with_verdict(self, verdict):
        return replace(self, verdict=verdict)

    def scaled(self, factor):
        f = abs(float(factor))
        return replace(self, value=self.value * float(factor),
                       std_error=self.std_error * f, bound=self.bound * f)

    def to_json(self):
        out = {
            "value": _json_float(self.value),
            "std_error": _json_float(self.std_error),
            "provenance": self.provenance,
        }
        if self.kind == QUADRATURE:
            out["bound"] = _json_float(self.bound)
        if self.verdict is not None:
            out["verdict"] = self.verdict
        return out

    def __float__(self):
        return self.value


def _fmt(x):
    return repr(float(x))


def _json_float(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def stabilization_verdict(values, rel_tol=0.10):
    """Finite/suspect-infinite verdict from estimates at growing sample sizes.

    ``values`` are estimates at N/4, N/2, N (or any nested sequence). The
    verdict is "finite" when every value lies within ``rel_tol`` of the
    last one.
    """
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        return "suspect-infinite"
    ref = v[-1]
    scale = max(abs(ref), 1e-300)
    if ref == 0.0:
        return "finite" if np.all(v == 0.0) else "suspect-infinite"
    return "finite" if np.all(np.abs(v - ref) <= rel_tol * scale) else "suspect-infinite"


def nested_means(x, parts=(4, 2, 1)):
    """Means of the leading N/k prefixes of ``x`` for k in ``parts``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    return [float(x[: max(1, n // k)].mean()) for k in parts]
