"""Order-preserving parallel map.

Work items are dispatched to a thread pool but results are collected by
input position, so output is bit-identical for any thread count as long
as the function itself is pure.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

__all__ = ["ordered_map"]


def ordered_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
