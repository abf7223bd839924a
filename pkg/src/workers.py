"""Bounded worker pool for CPU-bound pipeline stages."""

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(seed: int, *coords: int) -> int:
    """Seed for one work item, a pure function of (seed, coordinates)."""
    state = np.random.SeedSequence([int(seed), *(int(c) for c in coords)])
    return int(state.generate_state(1, dtype=np.uint32)[0])


async def _run_item(
    loop: asyncio.AbstractEventLoop,
    executor: ThreadPoolExecutor,
    semaphore: asyncio.Semaphore,
    func: Callable[[T], R],
    index: int,
    item: T,
) -> tuple[int, R]:
    """Run one item with semaphore control; returns (index, result)."""
    async with semaphore:
        result = await loop.run_in_executor(executor, func, item)
        return index, result


async def _run_all(
    func: Callable[[T], R],
    items: list[T],
    jobs: int,
    progress_callback: Optional[Callable[[int, int], None]],
) -> list[R]:
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(jobs)
    results: list[Optional[R]] = [None] * len(items)

    with ThreadPoolExecutor(max_workers=jobs) as executor:
        # Must be actual Task objects for cancellation
        tasks = [
            asyncio.create_task(_run_item(loop, executor, semaphore, func, i, item))
            for i, item in enumerate(items)
        ]

        done = 0
        try:
            for coro in asyncio.as_completed(tasks):
                index, result = await coro
                results[index] = result
                done += 1
                if progress_callback:
                    progress_callback(done, len(items))
        except BaseException:
            for task in tasks:
                if not task.done():
                    task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            raise

    return results  # type: ignore[return-value]


def run_parallel(
    func: Callable[[T], R],
    items: Iterable[T],
    jobs: int = 1,
    progress_callback: Optional[Callable[[int, int], None]] = None,
) -> list[R]:
    """
    Apply func to every item with at most `jobs` items in flight.

    Results come back in input order whatever the completion order, so any
    reduction over them is schedule-independent. The first failure cancels
    pending items and is re-raised.

    Args:
        func: work function, must not share mutable state between items
        items: work items
        jobs: maximum concurrent items; <= 1 runs serially in-process
        progress_callback: optional callback(done, total)

    Returns:
        list: func(item) for every item, in input order
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        results = []
        for i, item in enumerate(items, 1):
            results.append(func(item))
            if progress_callback:
                progress_callback(i, len(items))
        return results

    logger.debug("Dispatching %d items to %d workers", len(items), jobs)
    return asyncio.run(_run_all(func, items, jobs, progress_callback))
