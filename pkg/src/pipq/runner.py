"""Worker-thread launching shared by campaigns, benchmarks and SSSP."""

import threading
from typing import Callable, List, Optional

import structlog

logger = structlog.get_logger(__name__)


def run_threads(
    nthreads: int,
    target: Callable[[int, threading.Barrier], None],
    name: str = "worker",
) -> None:
    """Run ``target(index, barrier)`` on ``nthreads`` threads and join them.

    The barrier has one party per worker so targets can line up their start.
    The first exception raised by any worker is re-raised here.
    """
    barrier = threading.Barrier(nthreads)
    errors: List[BaseException] = []
    errors_lock = threading.Lock()

    def body(index: int) -> None:
        try:
            target(index, barrier)
        except BaseException as e:
            with errors_lock:
                errors.append(e)
            barrier.abort()

    threads = [
        threading.Thread(target=body, args=(i,), name=f"{name}-{i}", daemon=True)
        for i in range(nthreads)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    first: Optional[BaseException] = None
    for e in errors:
        if not isinstance(e, threading.BrokenBarrierError):
            first = e
            break
    if first is None and errors:
        first = errors[0]
    if first is not None:
        logger.error("Worker thread failed", name=name, error=str(first))
        raise first
