"""Sequential reference queue, history recording, linearizability checking
and quiescent-state auditing."""

import heapq
import itertools
import threading
from collections import Counter
from typing import IO, Dict, Iterable, List, NamedTuple, Optional, Tuple

import structlog
from pydantic import BaseModel

from .atomic import AtomicWord
from .config import Key, ThreadId, Value
from .worker_heap import HeapEntry

logger = structlog.get_logger(__name__)

INSERT = "insert"
DELETE_MIN = "delete_min"
INVOKE = "invoke"
RESPOND = "respond"

DEFAULT_CHECK_BUDGET = 2_000_000


class HistoryFormatError(ValueError):
    """Malformed line in a dumped history."""

    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class IncompleteHistoryError(Exception):
    """History is structurally broken or was truncated while recording."""


class CheckBudgetExceeded(Exception):
    """The linearizability search gave up before reaching a verdict."""

    def __init__(self, explored: int) -> None:
        super().__init__(f"search budget exhausted after {explored} states")
        self.explored = explored


# Sequential reference ---------------------------------------------------------


class SeqPQ:
    """Sorted multiset of (key, val) with strict delete-min."""

    def __init__(self, items: Iterable[HeapEntry] = ()) -> None:
        self._seq = itertools.count()
        self._heap = [(k, next(self._seq), v) for k, v in items]
        heapq.heapify(self._heap)

    def insert(self, key: Key, val: Value = 0) -> None:
        heapq.heappush(self._heap, (key, next(self._seq), val))

    def delete_min(self) -> Optional[HeapEntry]:
        if not self._heap:
            return None
        key, _, val = heapq.heappop(self._heap)
        return key, val

    def min_key(self) -> Optional[Key]:
        return self._heap[0][0] if self._heap else None

    def contents(self) -> List[HeapEntry]:
        return sorted((k, v) for k, _, v in self._heap)

    def __len__(self) -> int:
        return len(self._heap)


State = Tuple[HeapEntry, ...]


def _state_insert(state: State, entry: HeapEntry) -> State:
    items = list(state)
    items.append(entry)
    items.sort()
    return tuple(items)


def _state_remove(state: State, entry: HeapEntry) -> Optional[State]:
    """Remove ``entry`` if it holds the minimum key; None if that is illegal."""
    if not state or entry[0] != state[0][0]:
        return None
    for i, item in enumerate(state):
        if item[0] != entry[0]:
            break
        if item == entry:
            return state[:i] + state[i + 1:]
    return None


# Histories -----------------------------------------------------------------


class HistoryEvent(NamedTuple):
    """One invocation or response.

    Inserts carry their argument on both events; a delete-min response
    carries its result, with key None for EMPTY.
    """

    ts: int
    tid: ThreadId
    phase: str
    op: str
    key: Optional[Key] = None
    val: Optional[Value] = None

    def render(self) -> str:
        key = "-" if self.key is None else str(self.key)
        val = "-" if self.val is None else str(self.val)
        return f"{self.ts} {self.tid} {self.phase} {self.op} {key} {val}"


class HistoryRecorder:
    """Per-thread event shards stamped from one shared atomic ticket."""

    def __init__(self, capacity: Optional[int] = None) -> None:
        self._ticket = AtomicWord(0)
        self._shards: Dict[ThreadId, List[HistoryEvent]] = {}
        self._lock = threading.Lock()
        self.capacity = capacity

    def _shard(self, tid: ThreadId) -> List[HistoryEvent]:
        shard = self._shards.get(tid)
        if shard is None:
            with self._lock:
                shard = self._shards.setdefault(tid, [])
        return shard

    def record(
        self,
        tid: ThreadId,
        phase: str,
        op: str,
        key: Optional[Key] = None,
        val: Optional[Value] = None,
    ) -> HistoryEvent:
        shard = self._shard(tid)
        if self.capacity is not None and len(shard) >= self.capacity:
            raise IncompleteHistoryError(f"history shard of thread {tid} is full")
        event = HistoryEvent(self._ticket.fetch_add(1), tid, phase, op, key, val)
        shard.append(event)
        return event

    def events(self) -> List[HistoryEvent]:
        """All shards merged by timestamp."""
        with self._lock:
            shards = list(self._shards.values())
        return sorted((e for shard in shards for e in shard), key=lambda e: e.ts)

    def __len__(self) -> int:
        return sum(len(s) for s in self._shards.values())


class RecordingQueue:
    """Wraps a queue so every operation lands in ``recorder``."""

    def __init__(self, queue, recorder: HistoryRecorder) -> None:
        self.queue = queue
        self.recorder = recorder

    def register_thread(self, numa_hint: Optional[int] = None) -> ThreadId:
        return self.queue.register_thread(numa_hint)

    def insert(self, key: Key, val: Value = 0) -> None:
        tid = self.queue.current_tid()
        self.recorder.record(tid, INVOKE, INSERT, key, val)
        self.queue.insert(key, val)
        self.recorder.record(tid, RESPOND, INSERT, key, val)

    def delete_min(self) -> Optional[HeapEntry]:
        tid = self.queue.current_tid()
        self.recorder.record(tid, INVOKE, DELETE_MIN)
        result = self.queue.delete_min()
        key, val = result if result is not None else (None, None)
        self.recorder.record(tid, RESPOND, DELETE_MIN, key, val)
        return result


def dump_history(events: Iterable[HistoryEvent], fh: IO[str]) -> None:
    for event in events:
        fh.write(event.render() + "\n")


def load_history(lines: Iterable[str]) -> List[HistoryEvent]:
    """Parse ``ts tid phase op key val`` lines; blank and ``#`` lines are skipped."""
    events = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 6:
            raise HistoryFormatError(f"expected 6 fields, got {len(fields)}", lineno)
        ts, tid, phase, op, key, val = fields
        if phase not in (INVOKE, RESPOND):
            raise HistoryFormatError(f"unknown phase {phase!r}", lineno)
        if op not in (INSERT, DELETE_MIN):
            raise HistoryFormatError(f"unknown operation {op!r}", lineno)
        try:
            events.append(
                HistoryEvent(
                    int(ts),
                    int(tid),
                    phase,
                    op,
                    None if key == "-" else int(key),
                    None if val == "-" else int(val),
                )
            )
        except ValueError as e:
            raise HistoryFormatError(str(e), lineno)
    return sorted(events, key=lambda e: e.ts)


# Linearizability -------------------------------------------------------------


class Operation(NamedTuple):
    """An invocation paired with its response (``respond_ts`` None if pending)."""

    index: int
    tid: ThreadId
    op: str
    key: Optional[Key]
    val: Optional[Value]
    invoke_ts: int
    respond_ts: Optional[int]

    @property
    def pending(self) -> bool:
        return self.respond_ts is None


def pair_operations(events: Iterable[HistoryEvent]) -> List[Operation]:
    """Match each thread's invoke/respond events in order."""
    open_ops: Dict[ThreadId, HistoryEvent] = {}
    ops: List[Operation] = []
    for event in sorted(events, key=lambda e: e.ts):
        if event.phase == INVOKE:
            if event.tid in open_ops:
                raise IncompleteHistoryError(
                    f"thread {event.tid} invoked at ts {event.ts} with an operation pending"
                )
            open_ops[event.tid] = event
            continue

        inv = open_ops.pop(event.tid, None)
        if inv is None or inv.op != event.op:
            raise IncompleteHistoryError(
                f"response at ts {event.ts} of thread {event.tid} has no matching invocation"
            )
        if event.op == INSERT:
            key, val = inv.key, inv.val
        else:
            key, val = event.key, event.val
        ops.append(Operation(len(ops), event.tid, event.op, key, val, inv.ts, event.ts))

    for inv in open_ops.values():
        ops.append(Operation(len(ops), inv.tid, inv.op, inv.key, inv.val, inv.ts, None))

    ops.sort(key=lambda o: o.invoke_ts)
    return [o._replace(index=i) for i, o in enumerate(ops)]


class LinearizabilityResult(BaseModel):
    linearizable: bool
    witness: List[int] = []
    counterexample: List[str] = []
    explored: int = 0


class _Search:
    """Depth-first search over linearization frontiers with memoised failures."""

    def __init__(self, ops: List[Operation], budget: int) -> None:
        self.ops = ops
        self.budget = budget
        self.explored = 0
        self.failed: set = set()
        self.required = 0
        for o in ops:
            if not o.pending:
                self.required |= 1 << o.index

    def _successors(self, state: State, o: Operation) -> List[State]:
        if o.op == INSERT:
            return [_state_insert(state, (o.key, o.val))]  # type: ignore[arg-type]
        if o.pending:
            if not state:
                return [state]
            low = state[0][0]
            return [
                state[:i] + state[i + 1:]
                for i, item in enumerate(state)
                if item[0] == low and (i == 0 or state[i - 1] != item)
            ]
        if o.key is None:
            return [state] if not state else []
        nxt = _state_remove(state, (o.key, o.val))  # type: ignore[arg-type]
        return [] if nxt is None else [nxt]

    def run(self, done: int, state: State, order: List[int]) -> bool:
        if done & self.required == self.required:
            return True
        memo = (done, state)
        if memo in self.failed:
            return False
        self.explored += 1
        if self.explored > self.budget:
            raise CheckBudgetExceeded(self.explored)

        horizon = min(
            (o.respond_ts for o in self.ops if not (done >> o.index) & 1 and not o.pending),
            default=None,
        )
        for o in self.ops:
            if (done >> o.index) & 1:
                continue
            if horizon is not None and o.invoke_ts > horizon:
                break
            for nxt in self._successors(state, o):
                order.append(o.index)
                if self.run(done | (1 << o.index), nxt, order):
                    return True
                order.pop()

        self.failed.add(memo)
        return False


def _linearizable(events: List[HistoryEvent], budget: int) -> Tuple[bool, List[int], int]:
    ops = pair_operations(events)
    search = _Search(ops, budget)
    order: List[int] = []
    ok = search.run(0, (), order)
    return ok, order, search.explored


def check_linearizable(
    events: Iterable[HistoryEvent], budget: int = DEFAULT_CHECK_BUDGET
) -> LinearizabilityResult:
    """Decide whether a history has a legal sequential priority-queue order.

    Pending operations may take effect any time after their invocation or
    not at all. On failure the counterexample is the shortest prefix ending
    in a response that is already non-linearizable.
    """
    ordered = sorted(events, key=lambda e: e.ts)
    ok, order, explored = _linearizable(ordered, budget)
    if ok:
        return LinearizabilityResult(linearizable=True, witness=order, explored=explored)

    cut_points = [i + 1 for i, e in enumerate(ordered) if e.phase == RESPOND]
    lo, hi = 0, len(cut_points) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _linearizable(ordered[:cut_points[mid]], budget)[0]:
            lo = mid + 1
        else:
            hi = mid
    prefix = ordered[:cut_points[lo]] if cut_points else ordered
    return LinearizabilityResult(
        linearizable=False,
        counterexample=[e.render() for e in prefix],
        explored=explored,
    )


# Quiescent audit ---------------------------------------------------------------


class AuditReport(BaseModel):
    """Named invariant violations found at a quiescent point."""

    violations: List[str] = []
    threads: int = 0
    list_length: int = 0
    prefix_length: int = 0
    residual: int = 0
    operations: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations


class QuiescentAuditor:
    """Checks the two-level invariants of a parked Pipq instance."""

    def validate_list(self, q) -> Tuple[bool, List[str]]:
        scan = q.leader_list.scan()
        issues = scan.check_invariants()
        return len(issues) == 0, issues

    def validate_levels(self, q) -> Tuple[bool, List[str]]:
        """Per-thread level invariant, counters, largest handles and heap locks."""
        issues = []
        cfg = q.config
        active_by_tid: Dict[ThreadId, List[Key]] = {}
        for key, _, tid in q.leader_list.scan().active_elements():
            active_by_tid.setdefault(tid, []).append(key)

        for tid, count in enumerate(q.leader_counts()):
            heap = q.worker_heaps[tid]
            keys = active_by_tid.get(tid, [])
            heap_min = q.heap_min(tid)

            if heap.lock.is_locked():
                issues.append(f"heap_lock_held:tid={tid}")
            if heap.heap_order_violations():
                issues.append(f"heap_order:tid={tid}")
            if heap_min is not None and keys and max(keys) > heap_min:
                issues.append(f"level_order:tid={tid}:list_max={max(keys)}:heap_min={heap_min}")
            if heap_min is not None and count < 2:
                issues.append(f"nonempty_heap_with_low_count:tid={tid}:count={count}")
            if count != len(keys):
                issues.append(f"counter_accuracy:tid={tid}:counter={count}:actual={len(keys)}")
            if not 0 <= count <= cfg.cntr_max:
                issues.append(f"counter_range:tid={tid}:counter={count}")
            if keys:
                largest = q.largest_key(tid)
                if largest is None or largest < max(keys):
                    issues.append(f"largest_handle:tid={tid}:largest={largest}:max={max(keys)}")

        return len(issues) == 0, issues

    def validate_conservation(
        self, residual: List[HeapEntry], inserted: Counter, deleted: Counter
    ) -> Tuple[bool, List[str]]:
        issues = []
        phantom = deleted - inserted
        if phantom:
            issues.append(f"conservation_phantom_deletes:{sorted(phantom.elements())[:5]}")
        expected = inserted - deleted
        actual = Counter(residual)
        if actual != expected:
            missing = expected - actual
            extra = actual - expected
            issues.append(
                f"conservation_mismatch:missing={sum(missing.values())}:extra={sum(extra.values())}"
            )
        return len(issues) == 0, issues


def audit_quiescent(
    q, inserted: Optional[Counter] = None, deleted: Optional[Counter] = None
) -> AuditReport:
    """Audit a parked queue; conservation is checked when both tallies are given."""
    auditor = QuiescentAuditor()
    scan = q.leader_list.scan()
    residual = q.residual_contents()

    violations: List[str] = []
    violations.extend(auditor.validate_list(q)[1])
    violations.extend(auditor.validate_levels(q)[1])
    if inserted is not None and deleted is not None:
        violations.extend(auditor.validate_conservation(residual, inserted, deleted)[1])

    report = AuditReport(
        violations=violations,
        threads=q.config.threads,
        list_length=len(scan.entries),
        prefix_length=scan.prefix_length,
        residual=len(residual),
    )
    if violations:
        logger.warning("Audit found violations", count=len(violations), first=violations[0])
    return report
