"""Chunked map-reduce helpers shared by every data-parallel stage.

Chunk boundaries depend only on the data size and the chunk size, never on
the number of workers, and results are always reduced in chunk order.  That
keeps every floating-point sum bit-identical between a 1-worker and an
N-worker run.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")

DEFAULT_CHUNK = 65536
WORKERS_ENV = "EADMNC_WORKERS"


def resolve_workers(workers: int | None = None) -> int:
    """Explicit value, then $EADMNC_WORKERS, then the number of usable cores."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        if env:
            workers = int(env)
        else:
            try:
                workers = len(os.sched_getaffinity(0))
            except AttributeError:
                workers = os.cpu_count() or 1
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def chunk_bounds(n: int, chunk_size: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    if n <= 0:
        return []
    return [(start, min(start + chunk_size, n)) for start in range(0, n, chunk_size)]


def map_chunks(
    fn: Callable[[int, int], T],
    n: int,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> list[T]:
    """Apply ``fn(start, stop)`` to consecutive slices of ``range(n)``.

    Results come back in chunk order regardless of completion order.
    """
    bounds = chunk_bounds(n, chunk_size)
    if workers <= 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def map_items(fn: Callable[[T], object], items: Sequence[T], workers: int = 1) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


@contextmanager
def single_threaded_blas() -> Iterator[None]:
    """Pin BLAS/OpenMP to one thread so ``workers`` is the only parallelism knob."""
    with threadpool_limits(limits=1):
        yield
