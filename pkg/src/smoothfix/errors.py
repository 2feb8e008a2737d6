"""Exception hierarchy.

Two families matter to callers. ``VerdictError`` subclasses mean the
mathematics rejected the input (no root, no fixed point, hypotheses
fail); the command line maps them to exit code 1. Everything else
derived from ``SmoothfixError`` is a tool or input failure (exit 2).
"""

from __future__ import annotations


class SmoothfixError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class VerdictError(SmoothfixError):
    """The computation ran and the answer is negative."""

    exit_code = 1


class ConfigError(SmoothfixError):
    """Malformed model or scenario description."""


# models
class DegenerateWeights(VerdictError):
    pass


class SubcriticalCount(VerdictError):
    pass


class HorizonUnbounded(VerdictError):
    pass


class Divergent(VerdictError):
    pass


class ConditionDViolated(VerdictError):
    pass


# criteria
class NoRoot(VerdictError):
    pass


class EvaluationFailed(SmoothfixError):
    pass


class GridTooCoarse(SmoothfixError):
    pass


# lst
class ProductUnderflow(VerdictError):
    pass


class QuadratureFailure(SmoothfixError):
    pass


class NoConvergence(VerdictError):
    """Raised with the best iterate and the iteration trace attached."""

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best
        self.trace = trace


class MeanMismatch(SmoothfixError):
    pass


class NoCharacteristicFunction(SmoothfixError):
    pass


class DegenerateAtZero(VerdictError):
    pass


class IdenticalInputs(SmoothfixError):
    pass


# montecarlo
class PopulationCapExceeded(SmoothfixError):
    pass


class EmptyPool(SmoothfixError):
    pass


class MeanCollapse(VerdictError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ZeroMean(SmoothfixError):
    pass


# tails
class TooFewSamples(SmoothfixError):
    pass


class HypothesesViolated(VerdictError):
    pass


class NoisyDifference(VerdictError):
    pass


# pitmanyor
class DivergentInverseMoment(VerdictError):
    pass


class MassDeficit(VerdictError):
    pass


class NoNontrivialSolution(VerdictError):
    pass
