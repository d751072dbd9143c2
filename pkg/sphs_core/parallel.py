import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, Tuple, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar('T')

DEFAULT_BATCH_SIZE = 128


def batch_ranges(total: int, batch_size: int = DEFAULT_BATCH_SIZE) -> List[Tuple[int, int]]:
    """Split [0, total) into consecutive half-open ranges of at most batch_size items."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return [(start, min(start + batch_size, total)) for start in range(0, total, batch_size)]


def ordered_map(func: Callable[[Tuple[int, int]], T], batches: Sequence[Tuple[int, int]],
                workers: int = 1) -> List[T]:
    """
    Run func over path batches and return the results in batch order.

    Batches are fixed before any work is scheduled and each batch draws its random
    numbers from per-path streams, so the results do not depend on the number of
    workers. numpy releases the GIL inside the linear algebra, so threads suffice.
    """
    workers = max(1, int(workers))
    if workers == 1 or len(batches) <= 1:
        return [func(batch) for batch in batches]

    logger.debug(f"Dispatching {len(batches)} batches to {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, batches))
