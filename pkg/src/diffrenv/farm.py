"""Chunked execution of nogil kernels over a thread pool.

Work is cut into chunks whose boundaries depend only on the problem size,
never on the worker count, and results are reassembled in chunk order, so
outputs are identical for any number of workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

CHUNK = 512

_workers = None


def default_workers() -> int:
    return os.cpu_count() or 1


def set_workers(n: int | None) -> None:
    global _workers
    _workers = None if n is None else max(1, int(n))


def get_workers() -> int:
    return _workers or default_workers()


def chunks(n: int, size: int = CHUNK):
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def map_chunks(fn, n: int, size: int = CHUNK, workers: int | None = None):
    """Apply ``fn(start, stop)`` to fixed chunks of range(n); results in order."""
    parts = chunks(n, size)
    w = workers or get_workers()
    if w == 1 or len(parts) <= 1:
        return [fn(a, b) for a, b in parts]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(lambda ab: fn(*ab), parts))
