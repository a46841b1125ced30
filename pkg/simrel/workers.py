"""Bounded thread pool for independent work items."""

import concurrent.futures
from typing import Callable, List, Sequence, TypeVar

from .config import DEFAULT_THREADS

T = TypeVar("T")
R = TypeVar("R")


def run_parallel(fn: Callable[[T], R], items: Sequence[T], threads: int = DEFAULT_THREADS) -> List[R]:
    """Apply fn to every item using up to ``threads`` workers.

    Args:
        fn: Function applied to each item. Must not depend on scheduling order.
        items: Work items.
        threads: Maximum number of worker threads; 1 runs inline.

    Returns:
        Results in item order, so the output never depends on the thread count.
        The first failure is re-raised after all workers finish.
    """
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    if threads == 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List = [None] * len(items)
    errors = {}

    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}

        for future in concurrent.futures.as_completed(future_to_index):
            i = future_to_index[future]
            try:
                results[i] = future.result()
            except Exception as e:
                print(f"Warning: work item {i} failed: {e}")
                errors[i] = e

    if errors:
        raise errors[min(errors)]
    return results
