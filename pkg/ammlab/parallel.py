"""Bounded worker pool for independent jobs (sweep points, design cells)."""
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Generic, List, Optional, Sequence, TypeVar

import anyio
import anyio.to_thread
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "AMMLAB_THREADS"


@dataclass(frozen=True)
class JobOutcome(Generic[T]):
    """Result of one job; exactly one of `result` and `error` is set."""

    item: Any
    result: Optional[T] = None
    error: Optional[BaseException] = None

    @property
    def success(self) -> bool:
        return self.error is None


def resolve_threads(threads: Optional[int] = None) -> int:
    """Worker count: explicit value, then AMMLAB_THREADS, then the CPU count."""
    if threads is not None:
        return max(1, int(threads))
    load_dotenv()
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={env!r}")
    return os.cpu_count() or 1


async def _run_job(func: Callable[[Any], R], item: Any, index: int, results: List[Optional[JobOutcome]],
                   limiter: anyio.CapacityLimiter) -> None:
    try:
        value = await anyio.to_thread.run_sync(func, item, limiter=limiter)
        results[index] = JobOutcome(item, result=value)
    except Exception as e:
        logger.error(f"Job {index} ({item!r}) failed: {type(e).__name__}: {e}")
        results[index] = JobOutcome(item, error=e)


async def _run_all(func: Callable[[Any], R], items: Sequence[Any], threads: int) -> List[JobOutcome]:
    limiter = anyio.CapacityLimiter(threads)
    results: List[Optional[JobOutcome]] = [None] * len(items)
    logger.info(f"Running {len(items)} jobs on {threads} worker threads")
    async with anyio.create_task_group() as tg:
        for index, item in enumerate(items):
            tg.start_soon(_run_job, func, item, index, results, limiter)
    return results  # type: ignore[return-value]


def run_parallel(func: Callable[[Any], R], items: Sequence[Any], threads: Optional[int] = None) -> List[JobOutcome]:
    """Apply `func` to every item on worker threads.

    Args:
        func: Blocking callable taking one item
        items: Job inputs
        threads: Worker cap; see resolve_threads

    Returns:
        JobOutcome per item, in input order. A failing job is captured, not raised.
    """
    workers = resolve_threads(threads)
    if workers == 1 or len(items) <= 1:
        outcomes = []
        for index, item in enumerate(items):
            try:
                outcomes.append(JobOutcome(item, result=func(item)))
            except Exception as e:
                logger.error(f"Job {index} ({item!r}) failed: {type(e).__name__}: {e}")
                outcomes.append(JobOutcome(item, error=e))
        return outcomes
    return anyio.run(_run_all, func, items, workers)
