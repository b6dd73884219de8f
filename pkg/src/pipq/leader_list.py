"""The lock-free sorted leader-level list with dual mark bits.

Nodes live in an arena and are addressed by integer handles whose two low
bits are zero (handle = arena index << 2), so a successor word packs the
successor handle together with two marks:

* bit 0, DELMIN: set on a predecessor's word by L-DeleteMin; the successor is
  logically deleted. Logically deleted nodes always form a prefix of the list.
* bit 1, MOVING: set on a node's own word by L-DeleteMaxP; the node is being
  demoted to its owner's worker heap and is unlinked by whoever sees it next.

Usage contract: any number of concurrent ``l_insert``; a single
``l_delete_min`` caller at a time (the coordinator); ``l_delete_maxp`` for a
given tid only under that tid's heap lock.
"""

import threading
from typing import Iterator, List, NamedTuple, Optional, Tuple

import structlog

from .atomic import AtomicWord
from .config import NEG_INF, POS_INF, Key, ThreadId, Value
from .epoch import EpochManager

logger = structlog.get_logger(__name__)

DELMIN = 0b01
MOVING = 0b10
MARK_MASK = DELMIN | MOVING

HEAD = 0 << 2
TAIL = 1 << 2

# Node state flags (independent of the successor word).
TAKEN = 0b01  # returned by L-DeleteMin
RETIRED = 0b10  # handed to the reclaimer


# Mark helpers -------------------------------------------------------------


def encode(handle: int, delmin: bool = False, moving: bool = False) -> int:
    return handle | (DELMIN if delmin else 0) | (MOVING if moving else 0)


def is_logdel_ref(word: int) -> bool:
    return bool(word & DELMIN)


def is_moving_ref(word: int) -> bool:
    return bool(word & MOVING)


def is_marked_ref(word: int) -> bool:
    return bool(word & MARK_MASK)


def get_logdel_ref(word: int) -> int:
    return word | DELMIN


def get_moving_ref(word: int) -> int:
    return word | MOVING


def get_notlogdel_ref(word: int) -> int:
    return word & ~DELMIN


def get_unmarked_ref(word: int) -> int:
    return word & ~MARK_MASK


class LeaderNode:
    """A (key, val, tid) element plus its atomic successor word."""

    __slots__ = ("key", "val", "tid", "next", "state")

    def __init__(self, key: Key, val: Value, tid: ThreadId, next_word: int) -> None:
        self.key = key
        self.val = val
        self.tid = tid
        self.next = AtomicWord(next_word)
        self.state = AtomicWord(0)


class LargestHandle:
    """Designates the owner's largest-key active element in L, or None.

    Read and written only under the owning thread's heap lock.
    """

    __slots__ = ("handle",)

    def __init__(self) -> None:
        self.handle: Optional[int] = None

    def __repr__(self) -> str:
        return f"LargestHandle({self.handle})"


class ScanEntry(NamedTuple):
    handle: int
    key: Key
    val: Value
    tid: ThreadId
    delmin_bit: bool
    moving_bit: bool
    logically_deleted: bool


class ListScan:
    """Snapshot of every node reachable from head, in list order."""

    def __init__(self, entries: List[ScanEntry], terminated: bool) -> None:
        self.entries = entries
        self.terminated = terminated

    @property
    def prefix_length(self) -> int:
        n = 0
        for entry in self.entries:
            if not entry.logically_deleted:
                break
            n += 1
        return n

    def active(self) -> List[ScanEntry]:
        return [e for e in self.entries if not e.logically_deleted and not e.moving_bit]

    def active_elements(self) -> List[Tuple[Key, Value, ThreadId]]:
        return [(e.key, e.val, e.tid) for e in self.active()]

    def check_invariants(self) -> List[str]:
        """Named violations of termination, prefix, sortedness and marking rules."""
        issues = []
        if not self.terminated:
            issues.append("list_not_terminated")

        seen_active = False
        for entry in self.entries:
            label = f"{entry.key}({entry.tid})"
            if entry.delmin_bit and entry.moving_bit:
                issues.append(f"both_marks_set:{label}")
            if entry.logically_deleted and seen_active:
                issues.append(f"deleted_node_outside_prefix:{label}")
            if not entry.logically_deleted:
                seen_active = True
            if entry.moving_bit and not entry.logically_deleted:
                issues.append(f"moving_node_still_linked:{label}")

        keys = [e.key for e in self.active()]
        for before, after in zip(keys, keys[1:]):
            if before > after:
                issues.append(f"active_suffix_unsorted:{before}>{after}")
                break

        return issues

    def render(self) -> str:
        tokens = []
        for e in self.entries:
            flags = ("D" if e.logically_deleted else "") + ("M" if e.moving_bit else "")
            tokens.append(f"{e.key}({e.tid})" + (f"[{flags}]" if flags else ""))
        return " -> ".join(["HEAD", *tokens, "TAIL"])


class LeaderList:
    """Sorted lock-free list L of (key, val, tid) between two sentinels."""

    def __init__(self, max_offset: int) -> None:
        if max_offset < 1:
            raise ValueError("max_offset must be positive")
        self.max_offset = max_offset
        self._nodes: List[LeaderNode] = [
            LeaderNode(NEG_INF, 0, -1, TAIL),
            LeaderNode(POS_INF, 0, -1, HEAD),  # never followed
        ]
        self._grow_lock = threading.Lock()
        self._largest: List[LargestHandle] = []
        self.epochs = EpochManager(is_protected=self._is_designated)

    # Arena ----------------------------------------------------------------

    def node(self, handle: int) -> LeaderNode:
        return self._nodes[handle >> 2]

    @property
    def arena_size(self) -> int:
        return len(self._nodes)

    def new_largest_handle(self) -> LargestHandle:
        """Create a largest handle the reclaimer will respect."""
        handle = LargestHandle()
        self._largest.append(handle)
        return handle

    def _is_designated(self, handle: int) -> bool:
        return any(h.handle == handle for h in self._largest)

    def _alloc(self, key: Key, val: Value, tid: ThreadId, next_word: int) -> int:
        rec = self.epochs.record()
        if rec.pool:
            handle = rec.pool.pop()
            node = self.node(handle)
            node.key, node.val, node.tid = key, val, tid
            node.next.store(next_word)
            node.state.store(0)
            return handle

        node = LeaderNode(key, val, tid, next_word)
        with self._grow_lock:
            handle = len(self._nodes) << 2
            self._nodes.append(node)
        return handle

    def _retire(self, handle: int) -> None:
        if self.node(handle).state.fetch_or(RETIRED) & RETIRED:
            return
        self.epochs.retire(handle)

    def _retire_chain(self, first: int, stop: int) -> None:
        """Retire the unlinked run [first, stop); their successor words are frozen."""
        x = first
        while x != stop and x != TAIL:
            nxt = get_unmarked_ref(self.node(x).next.load())
            self._retire(x)
            x = nxt

    # Search variants --------------------------------------------------------

    def search(self, key: Key) -> Tuple[int, int]:
        """Adjacent (l_node, r_node) with r_node the first active node of key >= ``key``."""
        with self.epochs.pin():
            return self._search(key)

    def _search(self, key: Key) -> Tuple[int, int]:
        nodes = self._nodes
        while True:
            x = HEAD
            x_next = nodes[HEAD >> 2].next.load()
            l_node, l_node_next = HEAD, get_notlogdel_ref(x_next)

            # 1. Find l_node and r_node.
            while True:
                if not is_moving_ref(x_next):
                    l_node = x
                    l_node_next = get_notlogdel_ref(x_next)
                x = get_unmarked_ref(x_next)
                if x == TAIL:
                    break
                prev_log_del = is_logdel_ref(x_next)
                node = nodes[x >> 2]
                x_next = node.next.load()
                if (
                    node.key >= key
                    and not is_moving_ref(x_next)
                    and not prev_log_del
                ):
                    break
            r_node = x

            # 2. Already adjacent.
            if l_node_next == r_node:
                if self._neighbourhood_changed(l_node, r_node):
                    continue
                return l_node, r_node

            # 3. Unlink the moving nodes between them.
            if self.node(l_node).next.cas(l_node_next, r_node):
                self._retire_chain(l_node_next, r_node)
                if self._neighbourhood_changed(l_node, r_node):
                    continue
                return l_node, r_node

    def _neighbourhood_changed(self, l_node: int, r_node: int) -> bool:
        if is_logdel_ref(self.node(l_node).next.load()):
            return True
        return r_node != TAIL and is_moving_ref(self.node(r_node).next.load())

    def search_delete(
        self, largest: LargestHandle, start_lead_largest: Optional[int], tid: ThreadId
    ) -> Tuple[int, int]:
        """Locate the owner's demotion target and its predecessor.

        Traverses from head towards ``start_lead_largest``, tracking the nearest
        preceding active tid-node so ``largest`` can be reset to it. If the
        start node is no longer active, the last active tid-node is the target.
        """
        with self.epochs.pin():
            return self._search_delete(largest, start_lead_largest, tid)

    def _search_delete(
        self, largest: LargestHandle, start_lead_largest: Optional[int], tid: ThreadId
    ) -> Tuple[int, int]:
        nodes = self._nodes
        while True:
            r_node: Optional[int] = None
            new_lead_largest: Optional[int] = None
            l_node = l_node_next = HEAD
            x = HEAD
            x_next = self.node(x).next.load()
            cur_l_node, cur_l_node_next = HEAD, get_notlogdel_ref(x_next)

            # 1. Find l_node and r_node.
            while True:
                if not is_moving_ref(x_next):
                    cur_l_node = x
                    cur_l_node_next = get_notlogdel_ref(x_next)
                x = get_unmarked_ref(x_next)
                if x == TAIL:
                    break
                prev_log_del = is_logdel_ref(x_next)
                node = nodes[x >> 2]
                x_next = node.next.load()
                if (
                    not is_moving_ref(x_next)
                    and not prev_log_del
                    and node.tid == tid
                ):
                    new_lead_largest = r_node
                    l_node, l_node_next, r_node = cur_l_node, cur_l_node_next, x
                    if x == start_lead_largest:
                        break

            if r_node is None:
                raise RuntimeError(f"L-DeleteMaxP found no active element of thread {tid}")

            largest.handle = new_lead_largest

            # 2. Already adjacent.
            if l_node_next == r_node:
                return l_node, r_node

            # 3. Unlink the moving nodes between them, else retry from head.
            if self.node(l_node).next.cas(l_node_next, r_node):
                self._retire_chain(l_node_next, r_node)
                return l_node, r_node

    def search_phys_del(self, search_node: int) -> None:
        """Ensure ``search_node`` (already MOVING) is physically unlinked."""
        with self.epochs.pin():
            self._search_phys_del(search_node)

    def _search_phys_del(self, search_node: int) -> None:
        while True:
            found = False
            x = HEAD
            x_next = self.node(x).next.load()
            l_node, l_node_next = HEAD, get_notlogdel_ref(x_next)

            # 1. Find l_node and r_node.
            while True:
                if not is_moving_ref(x_next):
                    l_node = x
                    l_node_next = get_notlogdel_ref(x_next)
                x = get_unmarked_ref(x_next)
                if x == TAIL:
                    break
                if x == search_node:
                    found = True
                prev_log_del = is_logdel_ref(x_next)
                x_next = self.node(x).next.load()
                if found and not is_moving_ref(x_next) and not prev_log_del:
                    break

            if not found:
                # Removed by another thread.
                return
            r_node = x

            # 2. Unlink r_node's moving predecessors, search_node among them.
            if self.node(l_node).next.cas(l_node_next, r_node):
                self._retire_chain(l_node_next, r_node)
                return

    # Public operations ------------------------------------------------------

    def l_insert(
        self, largest: LargestHandle, key: Key, val: Value, tid: ThreadId
    ) -> int:
        """Link (key, val, tid) in sorted position; returns the new node's handle.

        Caller holds the heap lock of ``tid``. Among equal keys the new node is
        placed first.
        """
        with self.epochs.pin():
            new_node: Optional[int] = None
            while True:
                l_node, r_node = self._search(key)
                if new_node is None:
                    new_node = self._alloc(key, val, tid, r_node)
                else:
                    self.node(new_node).next.store(r_node)
                if self.node(l_node).next.cas(r_node, new_node):
                    break

            current = self.largest_key(largest, tid)
            if current is None or key > current:
                largest.handle = new_node
            return new_node

    def l_delete_min(self) -> Optional[Tuple[Key, Value, ThreadId]]:
        """Logically delete and return the first active element, or None if empty.

        Only the coordinator calls this, so the prefix relink is a plain store.
        """
        with self.epochs.pin():
            offset = 0
            x = HEAD
            while True:
                offset += 1
                x_next = self.node(x).next.load()
                if get_notlogdel_ref(x_next) == TAIL:
                    return None
                if is_logdel_ref(x_next):
                    x = get_unmarked_ref(x_next)
                    continue
                x_next = self.node(x).next.fetch_or(DELMIN)
                if get_unmarked_ref(x_next) == TAIL:
                    # The last element was unlinked under us; undo the mark on tail.
                    self.node(x).next.cas(get_logdel_ref(x_next), x_next)
                    return None
                x = get_unmarked_ref(x_next)
                if not is_logdel_ref(x_next):
                    break

            new_head = x
            deleted = self.node(new_head)
            deleted.state.fetch_or(TAKEN)

            if offset > self.max_offset:
                head = self.node(HEAD)
                old_first = get_unmarked_ref(head.next.load())
                head.next.store(get_logdel_ref(new_head))
                self._retire_chain(old_first, new_head)

            return deleted.key, deleted.val, deleted.tid

    def l_delete_maxp(self, largest: LargestHandle, tid: ThreadId) -> Tuple[Key, Value]:
        """Demote the element designated by ``largest``; returns its (key, val).

        Caller holds the heap lock of ``tid`` and the thread has at least two
        active elements in L.
        """
        with self.epochs.pin():
            self.largest_key(largest, tid)
            start_lead_largest = largest.handle
            while True:
                l_node, r_node = self._search_delete(largest, start_lead_largest, tid)
                r_node_next = self.node(r_node).next.load()
                if not is_marked_ref(r_node_next) and self.node(r_node).next.cas(
                    r_node_next, get_moving_ref(r_node_next)
                ):
                    break

            if self.node(l_node).next.cas(r_node, r_node_next):
                self._retire(r_node)
            else:
                self._search_phys_del(r_node)

            moved = self.node(r_node)
            return moved.key, moved.val

    # Largest-handle maintenance ---------------------------------------------

    def largest_key(self, largest: LargestHandle, tid: ThreadId) -> Optional[Key]:
        """Key designated by ``largest``, re-deriving the handle if it went stale.

        A handle goes stale when L-DeleteMin takes the designated node while the
        owner still has elements in L (possible with duplicate keys, or when the
        owner inserts before the coordinator clears an emptied handle).
        """
        handle = largest.handle
        if handle is None:
            return None
        if self.node(handle).state.load() & TAKEN:
            handle = self._last_active_of(tid)
            largest.handle = handle
            if handle is None:
                return None
        return self.node(handle).key

    def _last_active_of(self, tid: ThreadId) -> Optional[int]:
        with self.epochs.pin():
            found: Optional[int] = None
            x_next = self.node(HEAD).next.load()
            while True:
                x = get_unmarked_ref(x_next)
                if x == TAIL:
                    return found
                prev_log_del = is_logdel_ref(x_next)
                node = self.node(x)
                x_next = node.next.load()
                if node.tid == tid and not prev_log_del and not is_moving_ref(x_next):
                    found = x

    # Inspection -------------------------------------------------------------

    def iter_nodes(self, limit: Optional[int] = None) -> Iterator[Tuple[int, int, bool]]:
        """Yield (handle, successor word, logically_deleted) from head to tail."""
        if limit is None:
            limit = len(self._nodes) + 1
        x_next = self.node(HEAD).next.load()
        steps = 0
        while True:
            x = get_unmarked_ref(x_next)
            if x == TAIL or steps > limit:
                return
            deleted = is_logdel_ref(x_next)
            x_next = self.node(x).next.load()
            yield x, x_next, deleted
            steps += 1

    def scan(self) -> ListScan:
        """Stop-the-world snapshot; callers ensure no list operation is running."""
        entries = []
        seen = set()
        terminated = True
        limit = len(self._nodes) + 1
        for handle, word, deleted in self.iter_nodes(limit):
            if handle in seen or len(entries) >= limit:
                terminated = False
                break
            seen.add(handle)
            node = self.node(handle)
            entries.append(
                ScanEntry(
                    handle=handle,
                    key=node.key,
                    val=node.val,
                    tid=node.tid,
                    delmin_bit=is_logdel_ref(word),
                    moving_bit=is_moving_ref(word),
                    logically_deleted=deleted,
                )
            )
        return ListScan(entries, terminated)

    def dump(self) -> str:
        """Render as ``key(tid)[D|M]`` tokens joined by arrows."""
        return self.scan().render()

    def __repr__(self) -> str:
        return f"LeaderList(max_offset={self.max_offset}, arena={len(self._nodes)})"
