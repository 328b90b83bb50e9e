"""
Replica execution adapters.

Every Monte Carlo estimate is a map over independent replica ids. This module
provides interchangeable backends for that map: in-process serial execution and
a process pool. Results always come back in replica-id order, so aggregation
never depends on scheduling.
"""

import logging
import os
import sys
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional, TypeVar

from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def get_default_workers() -> int:
    """Get the default worker count from env or default."""
    return max(1, int(os.environ.get("RTREE_WORKERS", "1")))


def _show_progress() -> bool:
    return sys.stderr.isatty() and os.environ.get("RTREE_PROGRESS", "1") != "0"


class ReplicaRunner(ABC):
    """Abstract base class for replica execution backends."""

    workers: int = 1

    @abstractmethod
    def map(self, fn: Callable[[T], R], items: Iterable[T], desc: str = "replicas") -> list[R]:
        """Apply fn to every item and return results in input order."""
        pass

    @abstractmethod
    def is_available(self) -> bool:
        """Check if the backend can run in this environment."""
        pass


class SerialRunner(ReplicaRunner):
    """Runs replicas one after another in the calling process."""

    def map(self, fn: Callable[[T], R], items: Iterable[T], desc: str = "replicas") -> list[R]:
        items = list(items)
        return [fn(item) for item in tqdm(items, desc=desc, disable=not _show_progress(), leave=False)]

    def is_available(self) -> bool:
        return True


class ProcessPoolRunner(ReplicaRunner):
    """
    Runs replicas on a pool of worker processes.

    Workers share nothing; each replica derives its own random stream from
    (seed, replica id), so results match SerialRunner exactly.
    """

    def __init__(self, workers: int, chunksize: Optional[int] = None):
        """
        Initialize the pool runner.

        Args:
            workers: Number of worker processes (>= 1)
            chunksize: Items per task; defaults to an even split into 4 tasks per worker
        """
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self.chunksize = chunksize
        logger.info(f"ProcessPoolRunner initialized (workers={workers})")

    def map(self, fn: Callable[[T], R], items: Iterable[T], desc: str = "replicas") -> list[R]:
        items = list(items)
        if not items:
            return []
        chunksize = self.chunksize or max(1, len(items) // (self.workers * 4))
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            results = pool.map(fn, items, chunksize=chunksize)
            return list(tqdm(results, total=len(items), desc=desc, disable=not _show_progress(), leave=False))

    def is_available(self) -> bool:
        return (os.cpu_count() or 1) > 1


def get_runner(workers: Optional[int] = None) -> ReplicaRunner:
    """
    Get a replica runner for the requested worker count.

    Args:
        workers: Worker count; None reads RTREE_WORKERS (default 1)

    Returns:
        SerialRunner for one worker, otherwise a ProcessPoolRunner
    """
    workers = get_default_workers() if workers is None else workers
    if workers <= 1:
        return SerialRunner()
    runner = ProcessPoolRunner(workers)
    if not runner.is_available():
        logger.warning("Only one CPU visible, falling back to serial replica execution")
        return SerialRunner()
    return runner
