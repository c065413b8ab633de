#!/usr/bin/env python3
"""
Worker Fan-out
Runs independent jobs (expert runs, evaluation seeds) on a thread pool and
returns their results in submission order
"""

import asyncio
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import torch

logger = logging.getLogger(__name__)

THREADS_ENV = "DISTILLFORGE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_budget(default: Optional[int] = None) -> int:
    """Worker cap from DISTILLFORGE_THREADS, else the CPU count"""
    raw = os.getenv(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
        else:
            if value >= 1:
                return value
            logger.warning(f"Ignoring {THREADS_ENV}={value}; it must be >= 1")
    return default or os.cpu_count() or 1


def configure_torch_threads() -> Optional[int]:
    """Apply DISTILLFORGE_THREADS to torch's intra-op pool; unset leaves torch's default"""
    if not os.getenv(THREADS_ENV):
        return None
    threads = thread_budget()
    torch.set_num_threads(threads)
    logger.debug(f"torch intra-op threads set to {threads}")
    return threads


async def _gather(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=workers) as executor:
        tasks = [loop.run_in_executor(executor, fn, item) for item in items]
        results = await asyncio.gather(*tasks, return_exceptions=True)

    for item, result in zip(items, results):
        if isinstance(result, BaseException):
            logger.error(f"Job {item!r} failed: {result}")
            raise result
    return list(results)


def fan_out(fn: Callable[[T], R], items: Sequence[T], workers: Optional[int] = None) -> List[R]:
    """fn applied to every item; results keep the order of items.

    The first failing job's exception is re-raised once all jobs finished.
    """
    items = list(items)
    workers = min(workers or thread_budget(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    return asyncio.run(_gather(fn, items, workers))
