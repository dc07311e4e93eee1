"""
Benchmark Job Queue
===================
Runs independent benchmark jobs on a thread pool with status tracking.

Features:
- UUID-based job identification
- Status tracking: pending, running, completed, failed
- Thread-safe status updates
- Result and error storage
- Timestamp tracking for auditing

Each job owns its model, tape and allocator state (all thread-local), so
jobs never share mutable numerics.
"""

import logging
import threading
import traceback
import uuid
from concurrent.futures import Future, ThreadPoolExecutor, wait
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Callable, Dict, Optional

logger = logging.getLogger(__name__)


class TaskStatus(str, Enum):
    """Job execution status."""
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class TaskNotFoundError(KeyError):
    """Raised when a job ID is not found in the queue."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class JobQueue:
    """
    Thread-pool job queue.

    Example:
        with JobQueue(workers=2) as queue:
            job_id = queue.add_task(run_cell, config, label="bitfit__parity")
            queue.join()
            status = queue.get_task_status(job_id)
    """

    def __init__(self, workers: int = 1):
        self._tasks: Dict[str, Dict[str, Any]] = {}
        self._futures: Dict[str, Future] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pf-bench")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.shutdown()
        return False

    def add_task(self, task_fn: Callable[..., Any], *args, label: Optional[str] = None, **kwargs) -> str:
        """
        Queue ``task_fn(*args, **kwargs)`` and return its job id.

        Args:
            task_fn: Function to execute
            label: Human-readable job name used in logs
        """
        task_id = str(uuid.uuid4())
        with self._lock:
            self._tasks[task_id] = {
                "task_id": task_id,
                "label": label or getattr(task_fn, "__name__", "unknown"),
                "status": TaskStatus.PENDING,
                "result": None,
                "error": None,
                "created_at": _now(),
                "started_at": None,
                "completed_at": None,
            }
        self._futures[task_id] = self._executor.submit(self._execute_task, task_id, task_fn, *args, **kwargs)
        logger.info(f"Job {task_id[:8]} queued: {self._tasks[task_id]['label']}")
        return task_id

    def _execute_task(self, task_id: str, task_fn: Callable[..., Any], *args, **kwargs) -> None:
        """Run one job, recording result or error; never raises."""
        with self._lock:
            self._tasks[task_id]["status"] = TaskStatus.RUNNING
            self._tasks[task_id]["started_at"] = _now()
        label = self._tasks[task_id]["label"]
        logger.info(f"Job {label} started")

        try:
            result = task_fn(*args, **kwargs)
        except Exception as e:
            error_details = {
                "error_type": type(e).__name__,
                "error_message": str(e),
                "exit_code": getattr(e, "exit_code", 4),
                "traceback": traceback.format_exc(),
            }
            with self._lock:
                self._tasks[task_id]["status"] = TaskStatus.FAILED
                self._tasks[task_id]["error"] = error_details
                self._tasks[task_id]["completed_at"] = _now()
            logger.error(f"Job {label} failed: {e}")
            logger.debug("Job %s traceback:\n%s", label, error_details["traceback"])
            return

        with self._lock:
            self._tasks[task_id]["status"] = TaskStatus.COMPLETED
            self._tasks[task_id]["result"] = result
            self._tasks[task_id]["completed_at"] = _now()
        logger.info(f"Job {label} completed")

    def join(self) -> None:
        """Block until every queued job has finished."""
        wait(list(self._futures.values()))

    def get_task_status(self, task_id: str) -> Dict[str, Any]:
        """
        Raises:
            TaskNotFoundError: If task_id not found
        """
        with self._lock:
            if task_id not in self._tasks:
                raise TaskNotFoundError(f"Job {task_id} not found in queue")
            return self._tasks[task_id].copy()

    def list_tasks(self, status_filter: Optional[TaskStatus] = None) -> list[Dict[str, Any]]:
        with self._lock:
            tasks = [t.copy() for t in self._tasks.values()]
        if status_filter:
            tasks = [t for t in tasks if t["status"] == status_filter]
        return tasks

    def get_queue_stats(self) -> Dict[str, Any]:
        """
        Example:
            queue.get_queue_stats()
            # {"total": 6, "pending": 0, "running": 1, "completed": 4, "failed": 1}
        """
        stats = {"total": 0, **{status.value: 0 for status in TaskStatus}}
        for task in self.list_tasks():
            stats["total"] += 1
            stats[task["status"].value] += 1
        return stats

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True)
