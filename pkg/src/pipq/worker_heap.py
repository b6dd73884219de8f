"""Per-thread binary min-heap guarded by a sequence lock.

Storage is a chain of fixed-capacity segments (first segment ``HLS`` slots,
each further segment double the previous one) addressed as one logical flat
array. The heap itself is not synchronized; callers hold ``lock``.
"""

from typing import Iterator, List, Optional, Tuple

import structlog

from .atomic import SeqLock
from .config import Key, Value

logger = structlog.get_logger(__name__)

HeapEntry = Tuple[Key, Value]


def _parent(idx: int) -> int:
    return (idx - 1) // 2


class WorkerHeap:
    """Binary min-heap with chained segments and a parity sequence lock."""

    def __init__(self, segment_capacity: int) -> None:
        if segment_capacity < 1:
            raise ValueError("segment_capacity must be positive")
        self._base = segment_capacity
        self._segments: List[List[Optional[HeapEntry]]] = [[None] * segment_capacity]
        self._capacity = segment_capacity
        self.size = 0
        self.lock = SeqLock()

    # Locking

    def heap_lock(self) -> int:
        """Spin for the heap lock; returns the release token."""
        return self.lock.acquire()

    def heap_try_lock(self) -> Optional[int]:
        """One attempt at the heap lock; None when held elsewhere."""
        return self.lock.try_acquire()

    def heap_unlock(self, token: int) -> None:
        """Release the heap lock taken with ``token``."""
        self.lock.release(token)

    # Logical array over the segment chain

    @property
    def capacity(self) -> int:
        """Slots across all chained segments."""
        return self._capacity

    @property
    def segment_count(self) -> int:
        return len(self._segments)

    def _locate(self, idx: int) -> Tuple[List[Optional[HeapEntry]], int]:
        # Segment k starts at base * (2**k - 1).
        k = (idx // self._base + 1).bit_length() - 1
        return self._segments[k], idx - self._base * ((1 << k) - 1)

    def _get(self, idx: int) -> HeapEntry:
        segment, offset = self._locate(idx)
        entry = segment[offset]
        assert entry is not None
        return entry

    def _set(self, idx: int, entry: HeapEntry) -> None:
        segment, offset = self._locate(idx)
        segment[offset] = entry

    def _grow(self) -> None:
        new_size = len(self._segments[-1]) * 2
        self._segments.append([None] * new_size)
        self._capacity += new_size
        logger.debug("Worker heap segment chained", segments=len(self._segments), capacity=self._capacity)

    # Heap operations (caller holds the lock)

    def worker_insert(self, key: Key, val: Value) -> None:
        """Sift (key, val) up into place, chaining a segment when full."""
        if self.size == self._capacity:
            self._grow()

        if self.size == 0:
            self._set(0, (key, val))
            self.size = 1
            return

        idx = self.size
        p_idx = _parent(idx)
        while idx > 0 and key < self._get(p_idx)[0]:
            self._set(idx, self._get(p_idx))
            idx = p_idx
            p_idx = _parent(idx)
        self._set(idx, (key, val))
        self.size += 1

    def worker_delete_min(self) -> Optional[HeapEntry]:
        """Pop the root, or None when empty."""
        if self.size == 0:
            return None

        if self.size == 1:
            self.size = 0
            ret = self._get(0)
            self._set(0, None)  # type: ignore[arg-type]
            return ret

        ret = self._get(0)
        key, val = self._get(self.size - 1)
        self._set(self.size - 1, None)  # type: ignore[arg-type]
        self.size -= 1

        size = self.size
        idx = 0
        left_idx, right_idx = 1, 2
        while (left_idx < size and key > self._get(left_idx)[0]) or (
            right_idx < size and key > self._get(right_idx)[0]
        ):
            # Ties prefer the right child.
            if right_idx < size and self._get(left_idx)[0] >= self._get(right_idx)[0]:
                self._set(idx, self._get(right_idx))
                idx = right_idx
            else:
                self._set(idx, self._get(left_idx))
                idx = left_idx
            left_idx, right_idx = 2 * idx + 1, 2 * idx + 2

        self._set(idx, (key, val))
        return ret

    def heap_peek_min(self) -> Optional[Key]:
        """Smallest key without removing it."""
        if self.size == 0:
            return None
        return self._get(0)[0]

    # Inspection

    def items(self) -> Iterator[HeapEntry]:
        """Occupied entries in logical array order."""
        for idx in range(self.size):
            yield self._get(idx)

    def heap_order_violations(self) -> List[int]:
        """Indices whose key is smaller than their parent's (full scan)."""
        return [
            idx
            for idx in range(1, self.size)
            if self._get(_parent(idx))[0] > self._get(idx)[0]
        ]

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"WorkerHeap(size={self.size}, segments={len(self._segments)}, lock={self.lock.value})"
