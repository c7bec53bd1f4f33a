import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def thread_count() -> int:
    """Worker cap from EVMC_THREADS; 0 (the default) means single-threaded."""
    try:
        return max(0, int(os.environ.get("EVMC_THREADS", "0")))
    except ValueError:
        return 0


def chunked_sum(fn, n_items: int, min_chunk: int = 50_000):
    """Sum ``fn(lo, hi)`` over contiguous chunks of ``range(n_items)``.

    Partial results are reduced in chunk order, so the output only depends on
    the chunking, never on scheduling.
    """
    workers = thread_count()
    if workers <= 1 or n_items < 2 * min_chunk:
        return fn(0, n_items)
    bounds = np.linspace(0, n_items, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda i: fn(bounds[i], bounds[i + 1]), range(workers)))
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    return total
