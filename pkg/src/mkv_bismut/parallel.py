"""Deterministic chunked parallel map.

Chunk boundaries depend only on the problem size, never on the thread count,
and results are concatenated in chunk order.  Per-row arithmetic is therefore
identical for any number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

CHUNK = 256
THREADS_ENV = "MKV_BISMUT_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def chunks(n: int, size: int = CHUNK) -> list[slice]:
    return [slice(a, min(a + size, n)) for a in range(0, n, size)]


def map_rows(fn: Callable[[slice], np.ndarray], n: int, threads: int | None = None,
             size: int = CHUNK) -> np.ndarray:
    """Apply ``fn`` to fixed row slices of range(n) and stack the results."""
    parts = chunks(n, size)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(parts) == 1:
        return np.concatenate([fn(s) for s in parts], axis=0)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(fn, parts)), axis=0)
