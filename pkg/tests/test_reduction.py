import numpy as np
import pytest

from app.services.bench_service import reduction_rows
from app.utils.reduction import (
    chunk_bounds,
    chunked_sum,
    ordered_map,
    parallel_chunked_sum,
)


def test_chunk_bounds_cover_range():
    bounds = chunk_bounds(103, 8)
    assert len(bounds) == 8
    assert bounds[0][0] == 0 and bounds[-1][1] == 103
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))


def test_more_chunks_than_items():
    assert chunk_bounds(3, 16) == [(0, 1), (1, 2), (2, 3)]


def test_chunked_sum_empty():
    assert chunked_sum(np.array([])) == 0.0


@pytest.mark.parametrize("threads", [1, 2, 3, 8])
def test_sum_independent_of_threads(threads):
    values = np.random.default_rng(0).standard_normal(100_003) * 1e6
    serial = parallel_chunked_sum(
        lambda a, b: float(np.sum(values[a:b])), values.size, 1
    )
    threaded = parallel_chunked_sum(
        lambda a, b: float(np.sum(values[a:b])), values.size, threads
    )
    assert threaded == serial
    assert serial == chunked_sum(values)


def test_ordered_map_keeps_order():
    assert ordered_map(lambda x: x * x, list(range(50)), 4) == [
        x * x for x in range(50)
    ]


def test_bench_reductions_agree():
    rows = reduction_rows(50_000, [1, 2, 4], seed=3)
    assert len({r.value for r in rows}) == 1
    assert [r.threads for r in rows] == [1, 2, 4]
