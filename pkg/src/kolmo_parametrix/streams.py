"""Counter-based random streams and a block-parallel map.

Work is cut into fixed-size blocks; block ``b`` of a computation tagged
``tag`` always draws from the Philox stream keyed by ``(seed, tag, b)``.
Results are gathered in block order, so they do not depend on the number
of worker threads.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple, Sequence, TypeVar

import numpy as np

BLOCK_SIZE = 8192
THREADS_ENV = "KOLMO_PARAMETRIX_THREADS"

T = TypeVar("T")

_default_threads: int | None = None


class MCEstimate(NamedTuple):
    value: float
    stderr: float


def set_default_threads(threads: int | None) -> None:
    global _default_threads
    if threads is not None and threads < 1:
        raise ValueError("threads must be at least 1")
    _default_threads = threads


def resolve_threads(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    if _default_threads is not None:
        return _default_threads
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def block_generator(seed: int, tag: str, block: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    ss = np.random.SeedSequence([int(seed), tag_id(tag), int(block)])
    return np.random.Generator(np.random.Philox(ss))


def block_sizes(total: int, block: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(int(total), block)
    return [block] * full + ([rest] if rest else [])


def map_blocks(fn: Callable[[int, int], T], total: int, block: int = BLOCK_SIZE,
               threads: int | None = None) -> list[T]:
    """Evaluate ``fn(block_index, block_size)`` over all blocks, in order."""
    sizes = block_sizes(total, block)
    workers = min(resolve_threads(threads), len(sizes)) if sizes else 1
    if workers <= 1:
        return [fn(i, m) for i, m in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(sizes)), sizes))


def summarize(weights: Sequence[float] | np.ndarray) -> MCEstimate:
    w = np.asarray(weights, dtype=float)
    if w.size < 2:
        raise ValueError("need at least two replicas for a standard error")
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite Monte Carlo weight")
    return MCEstimate(float(np.mean(w)), float(np.std(w, ddof=1) / np.sqrt(w.size)))
