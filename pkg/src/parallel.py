from __future__ import annotations

from collections.abc import Callable, Sequence
from typing import TypeVar

import anyio
import anyio.to_thread
import structlog


logger = structlog.get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


async def _map_async(func: Callable[[T], R], items: Sequence[T], threads: int) -> list[R]:
    limiter = anyio.CapacityLimiter(threads)
    results: list[R | None] = [None] * len(items)

    async def _run(index: int, item: T) -> None:
        results[index] = await anyio.to_thread.run_sync(func, item, limiter=limiter)

    async with anyio.create_task_group() as tg:
        for index, item in enumerate(items):
            tg.start_soon(_run, index, item)
    return results  # type: ignore[return-value]


def ordered_map(func: Callable[[T], R], items: Sequence[T], *, threads: int = 1) -> list[R]:
    """Apply ``func`` to every item, at most ``threads`` at a time, returning results in item order.

    With ``threads == 1`` the items are processed inline, so single-threaded runs
    stay bit-reproducible and free of event-loop overhead.
    """
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    if threads == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug("parallel_map_started", items=len(items), threads=threads)
    return anyio.run(_map_async, func, items, threads)


__all__ = ["ordered_map"]
