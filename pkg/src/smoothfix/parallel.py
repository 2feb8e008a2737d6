"""Replica-parallel Monte Carlo with worker-count-invariant results.

Randomness is split into fixed-size chunks. One root integer is drawn
from the caller's generator; chunk ``k`` gets its own generator seeded
by ``SeedSequence([root, k])``. Because the chunk layout depends only on
the total replica count, the concatenated output is identical whether
chunks run on one thread or many.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 16384
ENV_VAR = "SMOOTHFIX_WORKERS"

_default_workers: int | None = None


def set_default_workers(workers: int | None) -> None:
    global _default_workers
    if workers is not None and workers < 1:
        raise ValueError("workers must be positive")
    _default_workers = workers


def resolve_workers(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    if _default_workers is not None:
        return _default_workers
    env = os.environ.get(ENV_VAR)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def chunk_sizes(total: int, chunk: int = CHUNK) -> list[int]:
    total = int(total)
    if total <= 0:
        return []
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def spawn_root(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def chunk_rng(root: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([root, k]))


def chunked_map(fn, total, rng, workers=None, chunk=CHUNK):
    """Run ``fn(chunk_rng, size)`` over chunks covering ``total`` replicas.

    Returns the per-chunk results in chunk order.
    """
    sizes = chunk_sizes(total, chunk)
    root = spawn_root(rng)
    tasks = [(chunk_rng(root, k), size) for k, size in enumerate(sizes)]
    n_workers = min(resolve_workers(workers), max(1, len(tasks)))
    if n_workers == 1:
        return [fn(g, size) for g, size in tasks]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(lambda args: fn(*args), tasks))


def chunked_concat(fn, total, rng, workers=None, chunk=CHUNK):
    """``chunked_map`` for functions returning arrays (or tuples of arrays)."""
    parts = chunked_map(fn, total, rng, workers=workers, chunk=chunk)
    if not parts:
        return np.empty(0)
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(len(parts[0])))
    return np.concatenate(parts)
