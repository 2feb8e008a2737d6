"""Fixed points of branching-random-walk smoothing transforms."""

__version__ = "0.1.0"
