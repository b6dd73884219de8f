"""Tests for the two-level PIPQ queue."""

import heapq
import random
import sys
import threading
import time
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from pipq.config import ConfigError, HelpingSite, PipqConfig
from pipq.oracle import audit_quiescent
from pipq.pipq import COUNTER_MIN, Pipq, RegistrationError, Role
from pipq.runner import run_threads
from pipq.topology import TopologyMap


def make_queue(**overrides):
    params = dict(heap_segment_capacity=4, threads=4, cntr_min=2, cntr_max=2, max_offset=2)
    params.update(overrides)
    q = Pipq(PipqConfig(**params))
    q.register_thread()
    return q


def active_keys(q):
    return [k for k, _, _ in q.leader_list.scan().active_elements()]


@pytest.mark.unit
class TestInsertPaths:
    """Test which insert path each key takes."""

    def test_first_insert_is_slower(self, registered_queue):
        """Test (42, v) on a fresh instance lands in L with count 1."""
        q = registered_queue

        q.insert(42, 7)

        assert q.leader_list.scan().active_elements() == [(42, 7, 0)]
        assert q.leader_counts()[0] == 1
        assert q.drain_stats().slower == 1

    def test_key_above_heap_min_is_fast(self, registered_queue):
        """Test key 50 with heap min 10 goes to the heap only."""
        q = registered_queue
        for k in (1, 2, 10):
            q.insert(k)
        assert q.heap_min(0) == 10
        before = q.leader_list.dump()

        q.insert(50)

        assert q.leader_list.dump() == before
        assert sorted(k for k, _ in q.heap_contents(0)) == [10, 50]
        assert q.drain_stats().paths[0] == {"fast": 2, "slower": 2, "slowest": 0}

    def test_slowest_path_demotes_largest(self, registered_queue):
        """Test 10, 30, 20 at CNTR_MAX=2: 20 enters L and 30 is demoted."""
        q = registered_queue
        q.insert(10)
        q.insert(30)
        assert q.largest_key(0) == 30

        q.insert(20)

        assert active_keys(q) == [10, 20]
        assert q.heap_contents(0) == [(30, 0)]
        assert q.leader_counts()[0] == 2
        assert q.largest_key(0) == 20
        assert q.drain_stats().slowest == 1

    def test_key_above_largest_at_cap_is_fast(self, registered_queue):
        """Test a key at or above the largest listed key skips L when full."""
        q = registered_queue
        q.insert(10)
        q.insert(30)

        q.insert(30)

        assert active_keys(q) == [10, 30]
        assert q.heap_contents(0) == [(30, 0)]

    def test_key_outside_u64(self, registered_queue):
        """Test keys outside the unsigned 64-bit range are rejected."""
        with pytest.raises(ValueError):
            registered_queue.insert(-1)
        with pytest.raises(ValueError):
            registered_queue.insert(1 << 64)

    def test_extreme_keys(self, registered_queue, drain_queue):
        """Test 0 and 2**64-1 are legal keys."""
        q = registered_queue
        q.insert((1 << 64) - 1)
        q.insert(0)

        assert [k for k, _ in drain_queue(q)] == [0, (1 << 64) - 1]


@pytest.mark.unit
class TestDeleteMin:
    """Test single-threaded delete-min semantics."""

    def test_empty_instance(self, registered_queue):
        """Test delete-min on a fresh queue is EMPTY."""
        assert registered_queue.delete_min() is None

    def test_two_keys_then_empty(self, registered_queue):
        """Test {5,9} yields 5, 9 and then EMPTY."""
        q = registered_queue
        q.insert(9, 1)
        q.insert(5, 2)

        assert q.delete_min() == (5, 2)
        assert q.delete_min() == (9, 1)
        assert q.delete_min() is None

    def test_default_config_round_trip(self):
        """Test a default one-thread queue returns 5 then 9 and coordinates itself."""
        q = Pipq(PipqConfig(threads=1))
        q.register_thread()
        q.insert(9)
        q.insert(5)

        assert q.delete_min() == (5, 0)
        assert q.last_role() is Role.COORDINATOR
        assert q.delete_min() == (9, 0)
        assert q.delete_min() is None
        assert q.drain_stats().served_waits == 0

    def test_coordinator_refills_from_own_heap(self, registered_queue):
        """Test count 2 -> 1 promotes heap min 17 back into L."""
        q = registered_queue
        for k in (5, 9, 17):
            q.insert(k)
        assert q.heap_min(0) == 17

        assert q.delete_min() == (5, 0)

        assert q.leader_counts()[0] == 2
        assert active_keys(q) == [9, 17]
        assert q.heap_contents(0) == []
        assert q.drain_stats().coordinator_upserts == 1

    def test_coordinator_refills_other_heap(self, registered_queue, run_in_thread):
        """Test a different thread's delete-min refills the owner's list share."""
        q = registered_queue
        for k in (5, 9, 17):
            q.insert(k)

        assert run_in_thread(lambda: (q.register_thread(), q.delete_min())[1]) == (5, 0)

        assert q.leader_counts()[0] == 2
        assert q.heap_contents(0) == []
        assert not q.worker_heaps[0].lock.is_locked()

    def test_count_one_with_empty_heap(self, registered_queue):
        """Test count stays at 1 when the owner's heap has nothing to give."""
        q = registered_queue
        q.insert(5)
        q.insert(9)

        q.delete_min()

        assert q.leader_counts()[0] == 1
        assert audit_quiescent(q).passed

    def test_last_element_clears_largest(self, registered_queue):
        """Test the largest handle is cleared when the count reaches zero."""
        q = registered_queue
        q.insert(5)

        q.delete_min()

        assert q.largest_handles[0].handle is None
        assert q.largest_key(0) is None

    def test_batch_histogram(self, registered_queue):
        """Test each single-threaded delete is a batch of one."""
        q = registered_queue
        for k in range(3):
            q.insert(k)
        for _ in range(4):
            q.delete_min()

        stats = q.drain_stats()

        assert stats.batch_histogram == {1: 4}
        assert stats.batch_mean == 1.0

    def test_prefix_relink_during_drain(self, registered_queue, drain_queue):
        """Test long drains relink head past the deleted prefix."""
        q = registered_queue
        for k in range(20):
            q.insert(k, k)

        assert [k for k, _ in drain_queue(q)] == list(range(20))
        assert q.leader_list.scan().prefix_length <= q.config.max_offset
        assert q.leader_list.epochs.pending() + q.leader_list.epochs.freed > 0


@pytest.mark.unit
class TestCoordinate:
    """Test the coordinator's batch over announce slots."""

    def test_serves_slots_in_index_order(self):
        """Test four announced delete-mins on one node get 1, 2, 3, 4 in slot order."""
        q = make_queue()
        for k in range(1, 9):
            q.insert(k, k)
        slots = q.announce[0]
        for slot in slots:
            slot.status.store(1)

        served = q.coordinate(0, coordinator_tid=0)

        assert served == 4
        assert [slot.result() for slot in slots] == [(1, 1), (2, 2), (3, 3), (4, 4)]
        assert all(slot.status.load() == 0 for slot in slots)
        assert q.drain_stats().batch_histogram == {4: 1}

    def test_serves_only_pending_slots(self):
        """Test slots without a pending request are skipped."""
        q = make_queue()
        q.insert(3)
        q.announce[0][2].status.store(1)

        assert q.coordinate(0, coordinator_tid=0) == 1
        assert q.announce[0][2].result() == (3, 0)

    def test_empty_answer(self):
        """Test an announced delete-min on an empty queue gets EMPTY."""
        q = make_queue()
        q.announce[0][1].status.store(1)

        q.coordinate(0, coordinator_tid=0)

        assert q.announce[0][1].result() is None


def wait_until(predicate, timeout=10.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        assert time.monotonic() < deadline, "condition not reached"
        time.sleep(0.001)


def start_worker(q, numa_hint=None):
    """Register a fresh thread that performs one delete-min once ``go`` is set."""
    box = {}
    registered = threading.Event()
    go = threading.Event()

    def body():
        try:
            box["tid"] = q.register_thread(numa_hint)
            registered.set()
            go.wait()
            box["result"] = q.delete_min()
            box["role"] = q.last_role()
        except BaseException as e:  # re-raised on the test thread
            box["error"] = e
            registered.set()

    t = threading.Thread(target=body, daemon=True)
    t.start()
    registered.wait()
    box["go"] = go
    box["thread"] = t
    return box


def finish(box):
    box["thread"].join(timeout=10)
    assert not box["thread"].is_alive()
    if "error" in box:
        raise box["error"]
    return box["result"], box["role"]


@pytest.mark.concurrency
class TestCoordinatorElection:
    """Test the node-leader and coordinator election under fixed schedules."""

    def test_same_node_leader_serves_waiter(self):
        """Test two callers on one node: the leader coordinates and the other is served."""
        q = make_queue(threads=3, numa_nodes=1)
        q.insert(5)
        q.insert(9)
        leader = start_worker(q)
        waiter = start_worker(q)
        coord_token = q.coord_lock.try_acquire()

        leader["go"].set()
        wait_until(q.compete_coord_locks[0].is_locked)
        waiter["go"].set()
        wait_until(lambda: q.announce[0][waiter["tid"]].status.load() == 1)
        q.coord_lock.release(coord_token)

        assert finish(leader) == ((5, 0), Role.COORDINATOR)
        assert finish(waiter) == ((9, 0), Role.SERVED)
        stats = q.drain_stats()
        assert stats.batch_histogram == {2: 1}
        assert stats.batch_mean > 1
        assert stats.served_waits == 1

    def test_leaders_of_two_nodes_both_coordinate(self):
        """Test callers on different nodes each lead their node and coordinate in turn."""
        q = Pipq(PipqConfig(heap_segment_capacity=4, threads=3, cntr_min=2, cntr_max=2, numa_nodes=2))
        assert q.register_thread(numa_hint=0) == 0
        q.insert(5)
        q.insert(9)
        first = start_worker(q, numa_hint=0)
        second = start_worker(q, numa_hint=1)
        assert q.topology.node_of_thread[first["tid"]] != q.topology.node_of_thread[second["tid"]]
        coord_token = q.coord_lock.try_acquire()

        first["go"].set()
        second["go"].set()
        wait_until(lambda: all(lock.is_locked() for lock in q.compete_coord_locks))
        q.coord_lock.release(coord_token)

        results = [finish(first), finish(second)]
        assert sorted(r for r, _ in results) == [(5, 0), (9, 0)]
        assert [role for _, role in results] == [Role.COORDINATOR, Role.COORDINATOR]
        assert q.drain_stats().batch_histogram == {1: 2}

    def test_owner_promotion_ends_coordinator_wait(self):
        """Test the coordinator stops waiting on a held heap once the owner refills its share."""
        q = make_queue(threads=2)
        for k in (1, 2, 10):
            q.insert(k)
        assert q.heap_contents(0) == [(10, 0)]
        owner_heap = q.worker_heaps[0]
        owner_token = owner_heap.heap_lock()
        coordinator = start_worker(q)

        coordinator["go"].set()
        wait_until(lambda: q.leader_counts()[0] == COUNTER_MIN - 1)
        assert q._promote_heap_min(0)
        result = finish(coordinator)
        owner_heap.heap_unlock(owner_token)

        assert result == ((1, 0), Role.COORDINATOR)
        assert q.leader_counts()[0] == 2
        assert active_keys(q) == [2, 10]
        assert q.drain_stats().coordinator_upserts == 0
        assert audit_quiescent(q).passed


@pytest.mark.unit
class TestHelpUpsert:
    """Test promotion of the caller's heap minimum."""

    @pytest.fixture
    def queue_with_low_count(self):
        """Count CNTR_MIN-1 = 2 with heap minimum 12."""
        q = make_queue(cntr_min=3, cntr_max=3)
        for k in (1, 2, 3, 12):
            q.insert(k)
        q.delete_min()
        assert q.leader_counts()[0] == 2
        return q

    def test_promotes_heap_min(self, queue_with_low_count):
        """Test heap min 12 moves to L and the count rises."""
        q = queue_with_low_count

        assert q.help_upsert() is True

        assert q.leader_counts()[0] == 3
        assert 12 in active_keys(q)
        assert q.drain_stats().helper_upserts == 1

    def test_noop_at_cntr_min(self, queue_with_low_count):
        """Test nothing happens once the count reaches CNTR_MIN."""
        q = queue_with_low_count
        q.help_upsert()

        assert q.help_upsert() is False
        assert q.leader_counts()[0] == 3

    def test_empty_heap(self, registered_queue):
        """Test a low count with an empty heap changes nothing."""
        q = registered_queue
        q.insert(4)

        assert q.help_upsert() is False
        assert q.leader_counts()[0] == 1
        assert not q.worker_heaps[0].lock.is_locked()

    def test_insert_site_helping(self):
        """Test on_insert mode promotes before releasing the heap lock."""
        q = make_queue(cntr_min=3, cntr_max=3, helping_site=HelpingSite.ON_INSERT)
        for k in (1, 2, 3, 12):
            q.insert(k)
        q.delete_min()

        q.insert(20)

        assert q.leader_counts()[0] == 3
        assert active_keys(q) == [2, 3, 12]
        assert q.heap_contents(0) == [(20, 0)]
        assert q.drain_stats().helper_upserts == 1


@pytest.mark.unit
class TestRegistration:
    """Test thread registration rules."""

    def test_ids_assigned_lowest_first(self, run_in_thread):
        """Test ids are handed out in order and capacity is enforced."""
        q = Pipq(PipqConfig(threads=2))

        assert q.register_thread() == 0
        assert run_in_thread(q.register_thread) == 1
        with pytest.raises(RegistrationError, match="registered"):
            run_in_thread(q.register_thread)

    def test_double_registration(self, registered_queue):
        """Test a thread cannot register twice."""
        with pytest.raises(RegistrationError, match="already"):
            registered_queue.register_thread()

    def test_unregistered_caller(self):
        """Test operations require registration."""
        q = Pipq(PipqConfig(threads=1))

        with pytest.raises(RegistrationError):
            q.insert(1)
        with pytest.raises(RegistrationError):
            q.delete_min()

    def test_numa_hint(self, run_in_thread):
        """Test a hint picks an id on the requested node."""
        q = Pipq(PipqConfig(threads=4, numa_nodes=2))

        assert q.register_thread(numa_hint=1) == 2
        assert run_in_thread(q.register_thread, 1) == 3
        with pytest.raises(RegistrationError, match="node 1"):
            run_in_thread(q.register_thread, 1)
        with pytest.raises(RegistrationError, match="No NUMA node"):
            run_in_thread(q.register_thread, 5)

    def test_topology_mismatch(self):
        """Test a topology for another thread count is rejected."""
        with pytest.raises(ConfigError, match="topology_thread_count_mismatch"):
            Pipq(PipqConfig(threads=4), TopologyMap.block(3, 1))


@pytest.mark.property
@given(
    st.lists(
        st.one_of(st.integers(min_value=0, max_value=50), st.none()),
        max_size=120,
    )
)
def test_single_thread_matches_heapq(ops):
    """Any single-threaded op sequence matches a heapq oracle (None = delete-min)."""
    q = make_queue(threads=1, cntr_min=2, cntr_max=3)
    oracle = []
    for i, op in enumerate(ops):
        if op is None:
            got = q.delete_min()
            expected = heapq.heappop(oracle) if oracle else None
            assert (got[0] if got else None) == (expected[0] if expected else None)
        else:
            q.insert(op, i)
            heapq.heappush(oracle, (op, i))
    assert audit_quiescent(q).passed


@pytest.mark.concurrency
class TestConcurrentQueue:
    """Test multi-threaded behaviour on small configurations."""

    @pytest.mark.parametrize("numa_nodes", [1, 2])
    def test_concurrent_drain_is_sorted_per_thread(self, numa_nodes):
        """Test concurrent inserts then concurrent deletes return every element once."""
        q = Pipq(PipqConfig(heap_segment_capacity=4, threads=4, cntr_min=2, cntr_max=4, numa_nodes=numa_nodes))
        inserted = [[] for _ in range(4)]
        results = [[] for _ in range(4)]
        phase = threading.Barrier(4)

        def work(index, barrier):
            tid = q.register_thread()
            barrier.wait()
            for i in range(300):
                entry = ((i * 7919 + tid * 31) % 1000, tid * 1000 + i)
                q.insert(*entry)
                inserted[index].append(entry)
            phase.wait()
            while (got := q.delete_min()) is not None:
                results[index].append(got)

        run_threads(4, work, name="pipq-test")

        for part in results:
            keys = [k for k, _ in part]
            assert keys == sorted(keys)
        assert Counter(e for part in results for e in part) == Counter(e for part in inserted for e in part)
        assert audit_quiescent(q).passed

    def test_mixed_workload_conserves(self):
        """Test a mixed run leaves exactly inserts minus deletes."""
        q = Pipq(PipqConfig(heap_segment_capacity=4, threads=4, cntr_min=2, cntr_max=3, numa_nodes=2))
        inserted = [Counter() for _ in range(4)]
        deleted = [Counter() for _ in range(4)]

        def work(index, barrier):
            tid = q.register_thread()
            barrier.wait()
            for i in range(400):
                if (i + index) % 3:
                    entry = ((i * 37 + index) % 97, tid)
                    q.insert(*entry)
                    inserted[index][entry] += 1
                else:
                    got = q.delete_min()
                    if got is not None:
                        deleted[index][got] += 1

        run_threads(4, work, name="pipq-mixed")

        report = audit_quiescent(q, sum(inserted, Counter()), sum(deleted, Counter()))
        assert report.violations == []
        stats = q.drain_stats()
        assert stats.inserts == sum(sum(c.values()) for c in inserted)
        assert stats.coordinator_batches >= 1

    def test_insert_heavy_run_batches_deletes(self):
        """Test a 95%-insert run on one node serves some delete-mins in shared batches."""
        q = Pipq(PipqConfig(heap_segment_capacity=8, threads=4, cntr_min=2, cntr_max=8))
        inserted = [Counter() for _ in range(4)]
        deleted = [Counter() for _ in range(4)]

        def work(index, barrier):
            tid = q.register_thread()
            rng = random.Random(index)
            barrier.wait()
            for _ in range(600):
                if rng.random() < 0.95:
                    entry = (rng.randrange(10_000), tid)
                    q.insert(*entry)
                    inserted[index][entry] += 1
                else:
                    got = q.delete_min()
                    if got is not None:
                        deleted[index][got] += 1

        interval = sys.getswitchinterval()
        sys.setswitchinterval(1e-5)
        try:
            run_threads(4, work, name="pipq-batch")
        finally:
            sys.setswitchinterval(interval)

        stats = q.drain_stats()
        assert stats.coordinator_batches >= 1
        assert stats.batch_mean > 1
        assert stats.served_waits >= 1
        report = audit_quiescent(q, sum(inserted, Counter()), sum(deleted, Counter()))
        assert report.violations == []
