"""
Parallel processing utilities for per-pair and per-view work.

Provides a bounded thread pool, task tracking, and ordered result collection
so downstream reductions do not depend on scheduling.
"""

import time
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence

from mvgc.config import threads_from_env

logger = logging.getLogger(__name__)


def _elapsed(start: Optional[float], end: Optional[float]) -> float:
    if start is None:
        return 0.0
    return (end or time.time()) - start


@dataclass
class WorkTask:
    """One item of a parallel map and its outcome."""

    task_id: int
    label: str
    status: str = "pending"  # pending, running, completed, failed
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    error_message: Optional[str] = None

    @property
    def duration(self) -> float:
        return _elapsed(self.start_time, self.end_time)

    def begin(self) -> "WorkTask":
        self.start_time = time.time()
        self.status = "running"
        return self

    def settle(self, error: Optional[BaseException] = None) -> None:
        self.end_time = time.time()
        if error is None:
            self.status = "completed"
        else:
            self.status = "failed"
            self.error_message = str(error)


@dataclass
class TaskStats:
    """Statistics for one parallel map."""

    name: str
    total_tasks: int = 0
    workers: int = 1
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    tasks: List[WorkTask] = field(default_factory=list)

    @property
    def completed_tasks(self) -> int:
        return sum(1 for t in self.tasks if t.status == "completed")

    @property
    def failed_tasks(self) -> int:
        return sum(1 for t in self.tasks if t.status == "failed")

    @property
    def duration(self) -> float:
        return _elapsed(self.start_time, self.end_time)

    def record(self, task: WorkTask, error: Optional[BaseException] = None) -> None:
        task.settle(error)
        self.tasks.append(task)
        if error is not None:
            logger.error(f"✗ {self.name}: task {task.label} failed: {error}")

    def log_summary(self):
        logger.debug(
            f"{self.name}: {self.completed_tasks}/{self.total_tasks} tasks "
            f"on {self.workers} worker(s) in {format_duration(self.duration)}"
        )
        if self.failed_tasks:
            logger.warning(f"  ⚠ {self.failed_tasks} task(s) failed")


class ParallelMapper:
    """
    Map a function over work items with a bounded thread pool.

    numpy releases the GIL inside its kernels, so threads give real speedups
    for raster work without pickling large arrays. Results are returned in
    input order; the first failure is re-raised after all tasks settle.
    A single worker runs inline and stops at the first failure.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = threads_from_env(max_workers)
        self.stats: Optional[TaskStats] = None

    def map(
        self,
        func: Callable[[Any], Any],
        items: Sequence[Any],
        name: str = "parallel map",
        labels: Optional[Sequence[str]] = None,
    ) -> List[Any]:
        items = list(items)
        labels = list(labels) if labels is not None else [str(i) for i in range(len(items))]
        workers = max(1, min(self.max_workers, len(items)))
        stats = TaskStats(name=name, total_tasks=len(items), workers=workers, start_time=time.time())
        self.stats = stats
        results: List[Any] = [None] * len(items)
        errors: List[BaseException] = []

        if workers == 1:
            for i, item in enumerate(items):
                task = WorkTask(task_id=i, label=labels[i]).begin()
                try:
                    results[i] = func(item)
                except Exception as e:
                    stats.record(task, e)
                    errors.append(e)
                    break
                stats.record(task)
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                pending = {
                    executor.submit(func, item): WorkTask(task_id=i, label=labels[i]).begin()
                    for i, item in enumerate(items)
                }
                for future in as_completed(pending):
                    task = pending[future]
                    error = future.exception()
                    if error is None:
                        results[task.task_id] = future.result()
                    else:
                        errors.append(error)
                    stats.record(task, error)

        stats.end_time = time.time()
        stats.log_summary()
        if errors:
            raise errors[0]
        return results


def format_duration(seconds: float) -> str:
    """Format duration as human-readable string."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    if seconds < 3600:
        return f"{seconds / 60:.1f}m"
    return f"{seconds / 3600:.1f}h"
