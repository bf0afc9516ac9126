from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count(threads: int | None = None) -> int:
    """Worker count: explicit argument, else ``MAET_THREADS``, else 1."""
    if threads is None:
        raw = os.environ.get("MAET_THREADS", "1").strip() or "1"
        try:
            threads = int(raw)
        except ValueError:
            threads = 1
    return max(1, int(threads))


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> Iterator[R]:
    """Map ``fn`` over ``items`` yielding results in input order.

    At most ``threads`` results are in flight, so memory stays bounded by
    ``threads`` times the largest single result.
    """
    n = thread_count(threads)
    if n == 1:
        for item in items:
            yield fn(item)
        return
    pending: deque = deque()
    with ThreadPoolExecutor(max_workers=n) as pool:
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= n:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
