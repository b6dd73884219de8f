"""Epoch-based deferred reclamation for leader-list node handles.

A thread pins the current global epoch for the duration of a list
operation. Handles retired while the global epoch is ``e`` are handed back to
the retiring thread's allocation pool once the epoch has reached ``e + 2``,
at which point no pinned traversal can still hold them.
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List

import structlog

from .atomic import AtomicWord

logger = structlog.get_logger(__name__)

# Retirements between attempts to advance the global epoch.
ADVANCE_EVERY = 64


class EpochRecord:
    """Per-thread reclamation state."""

    __slots__ = ("active", "epoch", "limbo", "pool", "retired_since_advance", "depth")

    def __init__(self) -> None:
        self.active = AtomicWord(0)
        self.epoch = AtomicWord(0)
        self.limbo: Dict[int, List[int]] = {}
        self.pool: List[int] = []
        self.retired_since_advance = 0
        # Pin nesting, read only by the owning thread.
        self.depth = 0


class EpochManager:
    """Global epoch plus lazily registered per-thread records."""

    def __init__(self, is_protected: Callable[[int], bool] = lambda handle: False) -> None:
        self._global = AtomicWord(0)
        self._records: List[EpochRecord] = []
        self._registry_lock = threading.Lock()
        self._local = threading.local()
        self._is_protected = is_protected
        self.freed = 0

    @property
    def global_epoch(self) -> int:
        return self._global.load()

    def record(self) -> EpochRecord:
        """The calling thread's record, created on first use."""
        rec = getattr(self._local, "record", None)
        if rec is None:
            rec = EpochRecord()
            with self._registry_lock:
                self._records.append(rec)
            self._local.record = rec
        return rec

    @contextmanager
    def pin(self) -> Iterator[EpochRecord]:
        rec = self.record()
        if rec.depth:
            # Nested pin: the outer one already protects us.
            yield rec
            return
        rec.depth = 1
        rec.active.store(1)
        epoch = self._global.load()
        rec.epoch.store(epoch)
        try:
            self._collect(rec, epoch)
            yield rec
        finally:
            rec.active.store(0)
            rec.depth = 0

    def retire(self, handle: int) -> None:
        rec = self.record()
        epoch = self._global.load()
        rec.limbo.setdefault(epoch, []).append(handle)
        rec.retired_since_advance += 1
        if rec.retired_since_advance >= ADVANCE_EVERY:
            rec.retired_since_advance = 0
            self.try_advance()

    def try_advance(self) -> bool:
        """Advance the global epoch if every pinned thread has observed it."""
        epoch = self._global.load()
        with self._registry_lock:
            records = list(self._records)
        for rec in records:
            if rec.active.load() and rec.epoch.load() != epoch:
                return False
        return self._global.cas(epoch, epoch + 1)

    def _collect(self, rec: EpochRecord, epoch: int) -> None:
        ripe = [e for e in rec.limbo if e + 2 <= epoch]
        for e in ripe:
            kept = []
            for handle in rec.limbo.pop(e):
                if self._is_protected(handle):
                    kept.append(handle)
                else:
                    rec.pool.append(handle)
                    self.freed += 1
            if kept:
                rec.limbo.setdefault(epoch, []).extend(kept)

    def pending(self) -> int:
        """Handles retired but not yet freed, across all threads."""
        with self._registry_lock:
            records = list(self._records)
        return sum(len(handles) for rec in records for handles in rec.limbo.values())
