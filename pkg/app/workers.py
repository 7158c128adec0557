import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS = int(os.environ.get("APP_THREADS", "1"))
_POOL: Optional[ThreadPoolExecutor] = None


def configure_pool(threads: int) -> None:
    """Resize the shared worker pool; takes effect on the next `get_pool` call."""
    global THREADS
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    if threads != THREADS:
        reset_pool()
    THREADS = threads


def get_pool() -> Optional[ThreadPoolExecutor]:
    """Return the shared pool, or None when running single-threaded."""
    global _POOL
    if THREADS <= 1:
        return None
    if _POOL is None:
        logger.info(f"Starting worker pool with {THREADS} threads")
        _POOL = ThreadPoolExecutor(max_workers=THREADS, thread_name_prefix="splat")
    return _POOL


def reset_pool() -> None:
    """Shut the pool down. Use between runs or in tests."""
    global _POOL
    if _POOL is not None:
        _POOL.shutdown(wait=True)
        _POOL = None


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
    """Apply `fn` to every item; results come back in input order regardless of scheduling."""
    pool = get_pool()
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))
