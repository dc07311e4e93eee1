import pytest

from peftlab.core.errors import DataError
from peftlab.core.jobs import JobQueue, TaskNotFoundError, TaskStatus


def fail_with_data_error():
    raise DataError("bad record")


def test_results_and_failures_are_recorded():
    with JobQueue(workers=2) as queue:
        ok = queue.add_task(sum, [1, 2, 3], label="sum")
        bad = queue.add_task(fail_with_data_error, label="broken")
        crash = queue.add_task(lambda: 1 / 0, label="crash")
        queue.join()
        assert queue.get_task_status(ok)["result"] == 6
        failed = queue.get_task_status(bad)
        assert failed["status"] == TaskStatus.FAILED
        assert failed["error"]["exit_code"] == 3
        assert queue.get_task_status(crash)["error"]["exit_code"] == 4
        assert queue.get_queue_stats() == {"total": 3, "pending": 0, "running": 0, "completed": 1, "failed": 2}
        assert len(queue.list_tasks(TaskStatus.FAILED)) == 2


def test_unknown_task():
    with JobQueue() as queue:
        with pytest.raises(TaskNotFoundError):
            queue.get_task_status("missing")
