"""PIPQ: per-thread worker heaps under a lock-free leader list.

Inserts mostly land in the caller's own heap. Every delete-min is served by
a single coordinator from the leader list, which always holds each thread's
smallest elements. Threads waiting on their delete-min promote their own heap
minimum into the list to keep it stocked.
"""

import threading
from collections import Counter
from enum import Enum
from typing import Dict, List, Optional

import structlog
from pydantic import BaseModel

from .atomic import AtomicWord, SeqLock, pause
from .config import (
    KEY_MAX,
    KEY_MIN,
    ConfigError,
    HelpingSite,
    Key,
    PathCounters,
    PipqConfig,
    ThreadId,
    Value,
    ensure_valid,
)
from .leader_list import LargestHandle, LeaderList
from .topology import TopologyMap
from .worker_heap import HeapEntry, WorkerHeap

logger = structlog.get_logger(__name__)

# The coordinator pulls an element up when a thread's count drops below this.
COUNTER_MIN = 2


class RegistrationError(Exception):
    """Operation from an unregistered thread, or no thread id left to hand out."""


class Role(str, Enum):
    """How a delete-min caller left coordinator election."""

    SERVED = "served"
    COORDINATOR = "coordinator"


class AnnounceSlot:
    """Delete-min request/response cell of one thread.

    ``key``/``val`` are written before ``status`` is cleared; ``key`` None
    means the queue was empty.
    """

    __slots__ = ("status", "key", "val")

    def __init__(self) -> None:
        self.status = AtomicWord(0)
        self.key: Optional[Key] = None
        self.val: Optional[Value] = None

    def result(self) -> Optional[HeapEntry]:
        if self.key is None:
            return None
        return self.key, self.val  # type: ignore[return-value]


class _ThreadContext:
    __slots__ = ("tid", "node", "slot_index", "slot", "heap", "counter", "largest", "paths", "last_role")

    def __init__(self, q: "Pipq", tid: ThreadId) -> None:
        self.tid = tid
        self.node = q.topology.node_of_thread[tid]
        self.slot_index = q.topology.slot_index(tid)
        self.slot = q.announce[self.node][self.slot_index]
        self.heap = q.worker_heaps[tid]
        self.counter = q.leader_counters[tid]
        self.largest = q.largest_handles[tid]
        self.paths = q.path_counters[tid]
        self.last_role: Optional["Role"] = None


class PipqStats(BaseModel):
    """Instrumentation snapshot returned by ``Pipq.drain_stats``."""

    paths: List[Dict[str, int]]
    fast: int
    slower: int
    slowest: int
    batch_histogram: Dict[int, int]
    coordinator_batches: int
    batch_mean: float
    coordinator_upserts: int
    helper_upserts: int
    served_waits: int = 0

    @property
    def inserts(self) -> int:
        return self.fast + self.slower + self.slowest

    def path_fractions(self) -> Dict[str, float]:
        total = self.inserts
        if total == 0:
            return {"fast": 0.0, "slower": 0.0, "slowest": 0.0}
        return {
            "fast": self.fast / total,
            "slower": self.slower / total,
            "slowest": self.slowest / total,
        }


class Pipq:
    """The two-level strict priority queue.

    Every thread calls ``register_thread`` once before its first operation;
    ``config.threads`` bounds how many may register.
    """

    def __init__(
        self,
        config: Optional[PipqConfig] = None,
        topology: Optional[TopologyMap] = None,
    ) -> None:
        self.config = ensure_valid(config or PipqConfig())
        cfg = self.config

        if topology is None:
            topology = TopologyMap.block(cfg.threads, cfg.numa_nodes)
        if topology.threads != cfg.threads:
            raise ConfigError("topology_thread_count_mismatch")
        self.topology = topology

        self.worker_heaps = [WorkerHeap(cfg.heap_segment_capacity) for _ in range(cfg.threads)]
        self.leader_list = LeaderList(cfg.max_offset)
        self.leader_counters = [AtomicWord(0, signed=True) for _ in range(cfg.threads)]
        self.largest_handles: List[LargestHandle] = [
            self.leader_list.new_largest_handle() for _ in range(cfg.threads)
        ]
        self.announce = [
            [AnnounceSlot() for _ in range(n)] for n in topology.threads_per_node
        ]
        self.compete_coord_locks = [SeqLock() for _ in range(topology.numa_nodes)]
        self.coord_lock = SeqLock()
        self.path_counters = [PathCounters() for _ in range(cfg.threads)]

        self._helper_upserts = [0] * cfg.threads
        self._served_waits = [0] * cfg.threads
        self._coordinator_upserts = 0
        self._batch_histogram: Counter = Counter()

        self._registered = [False] * cfg.threads
        self._registry_lock = threading.Lock()
        self._local = threading.local()

        logger.debug(
            "PIPQ instance created",
            threads=cfg.threads,
            numa_nodes=topology.numa_nodes,
            helping_site=cfg.helping_site.value,
        )

    # Thread context -------------------------------------------------------

    def register_thread(self, numa_hint: Optional[int] = None) -> ThreadId:
        """Bind the calling thread to the lowest free id (on ``numa_hint`` if given)."""
        if getattr(self._local, "ctx", None) is not None:
            raise RegistrationError("Thread already registered")
        if numa_hint is not None and not 0 <= numa_hint < self.topology.numa_nodes:
            raise RegistrationError(f"No NUMA node {numa_hint}")

        with self._registry_lock:
            free = [
                tid
                for tid, taken in enumerate(self._registered)
                if not taken
                and (numa_hint is None or self.topology.node_of_thread[tid] == numa_hint)
            ]
            if not free:
                raise RegistrationError(
                    f"All {self.config.threads} thread ids are registered"
                    + ("" if numa_hint is None else f" on node {numa_hint}")
                )
            tid = free[0]
            self._registered[tid] = True

        ctx = _ThreadContext(self, tid)
        self._local.ctx = ctx
        logger.debug("Thread registered", tid=tid, node=ctx.node, slot=ctx.slot_index)
        return tid

    def current_tid(self) -> ThreadId:
        """Id bound to the calling thread."""
        return self._context().tid

    def _context(self) -> _ThreadContext:
        ctx = getattr(self._local, "ctx", None)
        if ctx is None:
            raise RegistrationError("Calling thread is not registered")
        return ctx

    # Insert -----------------------------------------------------------------

    def insert(self, key: Key, val: Value = 0) -> None:
        if not KEY_MIN <= key <= KEY_MAX:
            raise ValueError(f"Key {key} outside the unsigned 64-bit range")
        ctx = self._context()

        token = ctx.heap.heap_lock()
        try:
            path = self._insert_locked(ctx, key, val)
            if self.config.helping_site is HelpingSite.ON_INSERT:
                if ctx.counter.load() < self.config.cntr_min and self._promote_heap_min(ctx.tid):
                    self._helper_upserts[ctx.tid] += 1
        finally:
            ctx.heap.heap_unlock(token)

        if self.config.instrumentation:
            setattr(ctx.paths, path, getattr(ctx.paths, path) + 1)

    def _insert_locked(self, ctx: _ThreadContext, key: Key, val: Value) -> str:
        heap = ctx.heap
        heap_min = heap.heap_peek_min()
        if heap_min is not None and key >= heap_min:
            heap.worker_insert(key, val)
            return "fast"

        if ctx.counter.load() >= self.config.cntr_max:
            largest_key = self.leader_list.largest_key(ctx.largest, ctx.tid)
            if largest_key is not None and key >= largest_key:
                heap.worker_insert(key, val)
                return "fast"

            self.leader_list.l_insert(ctx.largest, key, val, ctx.tid)
            moved_key, moved_val = self.leader_list.l_delete_maxp(ctx.largest, ctx.tid)
            heap.worker_insert(moved_key, moved_val)
            return "slowest"

        self.leader_list.l_insert(ctx.largest, key, val, ctx.tid)
        ctx.counter.add_and_fetch(1)
        return "slower"

    def _promote_heap_min(self, tid: ThreadId) -> bool:
        """Move H_tid's minimum into L; caller holds H_tid's lock."""
        entry = self.worker_heaps[tid].worker_delete_min()
        if entry is None:
            return False
        key, val = entry
        self.leader_list.l_insert(self.largest_handles[tid], key, val, tid)
        self.leader_counters[tid].add_and_fetch(1)
        return True

    # Delete-min ---------------------------------------------------------------

    def delete_min(self) -> Optional[HeapEntry]:
        """Remove and return the minimum (key, val), or None when empty."""
        ctx = self._context()
        ctx.slot.status.store(1)
        role = self.try_compete_coordinator(ctx)
        ctx.last_role = role
        if role is Role.SERVED and self.config.instrumentation:
            self._served_waits[ctx.tid] += 1
        return ctx.slot.result()

    def last_role(self) -> Optional[Role]:
        """How the calling thread's most recent delete-min left the election."""
        return self._context().last_role

    def help_upsert(self) -> bool:
        """Promote the caller's heap minimum if its list count is below CNTR_MIN."""
        return self._help_upsert(self._context())

    def _help_upsert(self, ctx: _ThreadContext) -> bool:
        if ctx.counter.load() >= self.config.cntr_min:
            return False
        token = ctx.heap.heap_try_lock()
        if token is None:
            return False
        try:
            promoted = self._promote_heap_min(ctx.tid)
        finally:
            ctx.heap.heap_unlock(token)
        if promoted:
            self._helper_upserts[ctx.tid] += 1
        return promoted

    def _wait(self, ctx: _ThreadContext) -> None:
        if self.config.helping_site is HelpingSite.ON_DELETE_MIN_WAIT:
            self._help_upsert(ctx)
        pause()

    def try_compete_coordinator(self, ctx: _ThreadContext) -> Role:
        """Compete for the caller's NUMA-node lock; the winner goes on to coordinate."""
        lock = self.compete_coord_locks[ctx.node]
        while True:
            if not ctx.slot.status.load():
                return Role.SERVED
            token = lock.try_acquire()
            if token is not None:
                try:
                    self.try_become_coordinator(ctx)
                finally:
                    lock.release(token)
                return Role.COORDINATOR

            lock_val = lock.value
            if lock_val % 2 == 1:
                while lock.value == lock_val:
                    self._wait(ctx)
                    if not ctx.slot.status.load():
                        return Role.SERVED

    def try_become_coordinator(self, ctx: _ThreadContext) -> None:
        """Compete with the other node leaders for the single coordinator lock."""
        while True:
            token = self.coord_lock.try_acquire()
            if token is not None:
                try:
                    self.coordinate(ctx.node, ctx.tid)
                finally:
                    self.coord_lock.release(token)
                return

            lock_val = self.coord_lock.value
            if lock_val % 2 == 1:
                # Only this node's own coordinator may serve us.
                while self.coord_lock.value == lock_val:
                    self._wait(ctx)

    def coordinate(self, node: int, coordinator_tid: ThreadId) -> int:
        """Serve every pending slot of ``node`` in index order; returns the batch size."""
        served = 0
        for idx, slot in enumerate(self.announce[node]):
            if slot.status.load():
                self.execute_announced_delete_min(node, idx, coordinator_tid)
                slot.status.store(0)
                served += 1
        if served and self.config.instrumentation:
            self._batch_histogram[served] += 1
        return served

    def execute_announced_delete_min(
        self, node: int, idx: int, coordinator_tid: ThreadId
    ) -> None:
        """Answer one announced delete-min, then refill its owner's list share."""
        slot = self.announce[node][idx]
        result = self.leader_list.l_delete_min()
        if result is None:
            slot.key = slot.val = None
            return

        key, val, tid = result
        counter = self.leader_counters[tid]
        counter.add_and_fetch(-1)
        slot.key, slot.val = key, val

        if counter.load() >= COUNTER_MIN:
            return

        heap = self.worker_heaps[tid]
        own_heap = tid == coordinator_tid
        while True:
            token = None if own_heap else heap.heap_try_lock()
            if own_heap or token is not None:
                try:
                    if counter.load() == 0:
                        self.largest_handles[tid].handle = None
                    if self._promote_heap_min(tid):
                        self._coordinator_upserts += 1
                finally:
                    if token is not None:
                        heap.heap_unlock(token)
                return

            lock_val = heap.lock.value
            if lock_val % 2 == 1:
                while heap.lock.value == lock_val:
                    if counter.load() >= COUNTER_MIN:
                        # The owner promoted an element itself.
                        return
                    pause()

    # Instrumentation ----------------------------------------------------------

    def drain_stats(self) -> PipqStats:
        """Snapshot of the path counters, batch sizes and upsert tallies."""
        paths = [pc.as_dict() for pc in self.path_counters]
        histogram = dict(sorted(self._batch_histogram.items()))
        batches = sum(histogram.values())
        ops = sum(size * count for size, count in histogram.items())
        return PipqStats(
            paths=paths,
            fast=sum(p["fast"] for p in paths),
            slower=sum(p["slower"] for p in paths),
            slowest=sum(p["slowest"] for p in paths),
            batch_histogram=histogram,
            coordinator_batches=batches,
            batch_mean=ops / batches if batches else 0.0,
            coordinator_upserts=self._coordinator_upserts,
            helper_upserts=sum(self._helper_upserts),
            served_waits=sum(self._served_waits),
        )

    # Quiescent accessors (no operation may be in flight) ----------------------

    def leader_counts(self) -> List[int]:
        return [c.load() for c in self.leader_counters]

    def heap_contents(self, tid: ThreadId) -> List[HeapEntry]:
        return list(self.worker_heaps[tid].items())

    def heap_min(self, tid: ThreadId) -> Optional[Key]:
        return self.worker_heaps[tid].heap_peek_min()

    def largest_key(self, tid: ThreadId) -> Optional[Key]:
        return self.leader_list.largest_key(self.largest_handles[tid], tid)

    def residual_contents(self) -> List[HeapEntry]:
        """Every element still held, heaps first then the list's active suffix."""
        residual = [entry for heap in self.worker_heaps for entry in heap.items()]
        residual.extend((k, v) for k, v, _ in self.leader_list.scan().active_elements())
        return residual

    def __repr__(self) -> str:
        return (
            f"Pipq(threads={self.config.threads}, numa_nodes={self.topology.numa_nodes}, "
            f"counts={self.leader_counts()})"
        )
