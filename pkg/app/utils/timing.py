import time
from contextlib import contextmanager
from typing import Iterator


@contextmanager
def stopwatch(timings: dict[str, float], key: str) -> Iterator[None]:
    """Accumulate wall-clock seconds of the block into timings[key]."""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[key] = timings.get(key, 0.0) + time.perf_counter() - start
