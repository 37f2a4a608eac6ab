#!/usr/bin/env python3
import asyncio
import logging
import os
from typing import Callable, List, Optional, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

log = logging.getLogger(__name__)


def thread_count() -> int:
    """Worker count from HYPE_THREADS (the only environment knob), default 1."""
    raw = os.environ.get("HYPE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("Ignoring non-integer HYPE_THREADS=%r", raw)
        return 1


async def _run_bounded(fn: Callable[[T], R], items: Sequence[T], max_concurrent: int) -> List[R]:
    semaphore = asyncio.Semaphore(max_concurrent)

    async def one(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    # gather keeps input order regardless of completion order
    return list(await asyncio.gather(*(one(item) for item in items)))


def run_parallel(fn: Callable[[T], R], items: Sequence[T], max_concurrent: Optional[int] = None) -> List[R]:
    """Apply `fn` to every item with at most `max_concurrent` in flight; results in input order."""
    items = list(items)
    limit = max_concurrent or thread_count()
    if limit <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return asyncio.run(_run_bounded(fn, items, limit))
