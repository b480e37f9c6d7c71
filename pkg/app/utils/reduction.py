"""
Deterministic reductions. Arrays are split into a fixed number of chunks,
each chunk is summed with numpy, and the partials are folded with
`math.fsum` in chunk order, so the result depends only on the chunk count,
never on how many threads computed the partials.
"""

import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

import numpy as np

from app.config import get_settings

T = TypeVar("T")
R = TypeVar("R")


def chunk_bounds(n: int, chunks: int | None = None) -> list[tuple[int, int]]:
    """Half-open [start, stop) ranges of a fixed chunking of range(n)."""
    k = chunks if chunks is not None else get_settings().reduction_chunks
    k = max(1, min(k, n))
    edges = np.linspace(0, n, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def chunked_sum(values: np.ndarray, chunks: int | None = None) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return 0.0
    bounds = chunk_bounds(values.size, chunks)
    partials = [float(np.sum(values[a:b])) for a, b in bounds]
    return math.fsum(partials)


def parallel_chunked_sum(
    fn: Callable[[int, int], float],
    n: int,
    threads: int = 1,
    chunks: int | None = None,
) -> float:
    """Fold fn(start, stop) over a fixed chunking of range(n).

    fn returns the partial sum of its chunk. Partials are combined in chunk
    order, so the value is identical for every thread count.
    """
    bounds = chunk_bounds(n, chunks) if n else []
    partials = ordered_map(lambda ab: fn(*ab), bounds, threads)
    return math.fsum(partials)


def ordered_map(
    fn: Callable[[T], R], items: Sequence[T], threads: int = 1
) -> list[R]:
    """map() whose results keep item order for any thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
