from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Worker cap from BSDE_LAB_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get("BSDE_LAB_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("BSDE_LAB_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map over independent jobs; results come back in input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
