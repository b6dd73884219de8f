"""Coarse-locked binary heap with the Pipq API, used as a comparison curve."""

import heapq
import itertools
import threading
from typing import List, Optional, Tuple

import structlog

from .config import KEY_MAX, KEY_MIN, Key, ThreadId, Value
from .pipq import PipqStats, RegistrationError
from .worker_heap import HeapEntry

logger = structlog.get_logger(__name__)


class CoarseLockedQueue:
    """heapq under a single lock."""

    def __init__(self, threads: int = 8) -> None:
        self.threads = threads
        self._heap: List[Tuple[Key, int, Value]] = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self._next_tid = 0
        self._local = threading.local()

    def register_thread(self, numa_hint: Optional[int] = None) -> ThreadId:
        with self._lock:
            if self._next_tid >= self.threads:
                raise RegistrationError(f"All {self.threads} thread ids are registered")
            tid = self._next_tid
            self._next_tid += 1
        self._local.tid = tid
        return tid

    def current_tid(self) -> ThreadId:
        tid = getattr(self._local, "tid", None)
        if tid is None:
            raise RegistrationError("Calling thread is not registered")
        return tid

    def insert(self, key: Key, val: Value = 0) -> None:
        if not KEY_MIN <= key <= KEY_MAX:
            raise ValueError(f"Key {key} outside the unsigned 64-bit range")
        with self._lock:
            heapq.heappush(self._heap, (key, next(self._seq), val))

    def delete_min(self) -> Optional[HeapEntry]:
        with self._lock:
            if not self._heap:
                return None
            key, _, val = heapq.heappop(self._heap)
        return key, val

    def drain_stats(self) -> PipqStats:
        return PipqStats(
            paths=[],
            fast=0,
            slower=0,
            slowest=0,
            batch_histogram={},
            coordinator_batches=0,
            batch_mean=0.0,
            coordinator_upserts=0,
            helper_upserts=0,
        )

    def residual_contents(self) -> List[HeapEntry]:
        with self._lock:
            return [(key, val) for key, _, val in self._heap]

    def __len__(self) -> int:
        return len(self._heap)
