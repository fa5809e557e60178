"""Per-example fan-out with a CVTR_THREADS worker cap.

Attacks and metrics are pure functions of an immutable model snapshot, so
they may run in parallel across examples; each example's expression graph
stays confined to its worker thread. Results come back in input order, so
thread count never changes what is computed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("CVTR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CVTR_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def ordered_map(fn, items):
    """map() preserving order, threaded when CVTR_THREADS > 1."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
