"""Verification campaigns: sequential equivalence, randomized linearizability
histories and multi-threaded stress runs followed by audits."""

import heapq
import threading
from collections import Counter
from typing import List, Optional

import numpy as np
import structlog
from pydantic import BaseModel

from .config import PipqConfig, ensure_valid
from .oracle import (
    AuditReport,
    CheckBudgetExceeded,
    HistoryRecorder,
    RecordingQueue,
    audit_quiescent,
    check_linearizable,
)
from .pipq import Pipq
from .runner import run_threads

logger = structlog.get_logger(__name__)


class LincheckSummary(BaseModel):
    threads: int
    ops_per_thread: int
    histories: int = 0
    failures: int = 0
    budget_exhausted: int = 0
    first_counterexample: List[str] = []

    @property
    def passed(self) -> bool:
        return self.failures == 0


def run_sequential_equivalence(
    seed: int,
    ops: int = 10_000,
    config: Optional[PipqConfig] = None,
    insert_pct: float = 50.0,
    key_max: int = 1000,
) -> int:
    """Replay a random single-threaded workload against an oracle; returns mismatches.

    A delete-min matches when it returns a pair still present in the oracle
    with the oracle's minimum key (equal keys are interchangeable).
    """
    base = config or PipqConfig()
    q = Pipq(ensure_valid(base.model_copy(update={"threads": 1, "numa_nodes": 1})))
    rng = np.random.default_rng(seed)
    is_insert = rng.random(ops) < insert_pct / 100.0
    keys = rng.integers(1, key_max + 1, size=ops)

    heap: List[tuple] = []
    live: Counter = Counter()
    mismatches = 0

    def register_and_run(index: int, barrier: threading.Barrier) -> None:
        nonlocal mismatches
        q.register_thread()
        for i in range(ops):
            if is_insert[i]:
                entry = (int(keys[i]), i)
                q.insert(*entry)
                heapq.heappush(heap, entry)
                live[entry] += 1
                continue

            got = q.delete_min()
            while heap and live[heap[0]] == 0:
                heapq.heappop(heap)
            if got is None:
                if heap:
                    mismatches += 1
                continue
            if not heap or got[0] != heap[0][0] or live[got] == 0:
                mismatches += 1
                continue
            live[got] -= 1

    # Own thread so the caller's registrations stay untouched.
    run_threads(1, register_and_run, name="seq-equivalence")

    if mismatches:
        logger.warning("Sequential equivalence mismatches", seed=seed, mismatches=mismatches)
    return mismatches


def lincheck_config(threads: int) -> PipqConfig:
    """Small thresholds so short histories reach every insert path and the prefix relink."""
    return PipqConfig(
        threads=threads,
        numa_nodes=min(2, threads),
        heap_segment_capacity=4,
        cntr_min=2,
        cntr_max=3,
        max_offset=2,
    )


def run_lincheck(
    threads: int = 3,
    ops_per_thread: int = 8,
    iters: int = 100,
    seed: int = 0,
    key_max: int = 16,
    config: Optional[PipqConfig] = None,
    insert_pct: float = 60.0,
) -> LincheckSummary:
    """Record ``iters`` randomized concurrent histories and check each one."""
    cfg = config or lincheck_config(threads)
    if cfg.threads < threads:
        raise ValueError(f"config has {cfg.threads} thread ids for {threads} workers")
    summary = LincheckSummary(threads=threads, ops_per_thread=ops_per_thread)
    streams = np.random.SeedSequence(seed).spawn(iters)

    for it in range(iters):
        q = Pipq(cfg)
        recorder = HistoryRecorder(capacity=2 * ops_per_thread)
        recording = RecordingQueue(q, recorder)
        thread_rngs = [np.random.default_rng(s) for s in streams[it].spawn(threads)]

        def work(index: int, barrier: threading.Barrier) -> None:
            rng = thread_rngs[index]
            tid = recording.register_thread()
            inserts = rng.random(ops_per_thread) < insert_pct / 100.0
            keys = rng.integers(1, key_max + 1, size=ops_per_thread)
            barrier.wait()
            for i in range(ops_per_thread):
                if inserts[i]:
                    recording.insert(int(keys[i]), tid * ops_per_thread + i)
                else:
                    recording.delete_min()

        run_threads(threads, work, name="lincheck")
        summary.histories += 1

        try:
            result = check_linearizable(recorder.events())
        except CheckBudgetExceeded as e:
            summary.budget_exhausted += 1
            logger.warning("Linearizability check budget exhausted", iteration=it, explored=e.explored)
            continue
        if not result.linearizable:
            summary.failures += 1
            if not summary.first_counterexample:
                summary.first_counterexample = result.counterexample
                logger.error(
                    "Non-linearizable history", iteration=it, prefix_events=len(result.counterexample)
                )

    logger.info(
        "Linearizability campaign finished",
        histories=summary.histories,
        failures=summary.failures,
        budget_exhausted=summary.budget_exhausted,
    )
    return summary


def run_stress(
    threads: int = 8,
    ops: int = 1_000_000,
    insert_pct: float = 50.0,
    seed: int = 0,
    campaigns: int = 1,
    config: Optional[PipqConfig] = None,
    key_max: int = 1_000_000,
    drain: bool = True,
) -> List[AuditReport]:
    """Mixed workloads on ``threads`` workers, each followed by a quiescent audit.

    With ``drain`` the parked queue is also emptied from one extra thread,
    which must yield exactly the residual multiset in non-decreasing order.
    """
    base = config or PipqConfig()
    # One spare thread id for the draining thread.
    cfg = ensure_valid(base.model_copy(update={"threads": threads + 1}))
    base_share, extra = divmod(ops, threads)
    shares = [base_share + (1 if i < extra else 0) for i in range(threads)]
    reports = []

    for campaign, stream in enumerate(np.random.SeedSequence(seed).spawn(campaigns)):
        q = Pipq(cfg)
        thread_rngs = [np.random.default_rng(s) for s in stream.spawn(threads)]
        inserted = [Counter() for _ in range(threads)]
        deleted = [Counter() for _ in range(threads)]
        executed = [0] * threads

        def work(index: int, barrier: threading.Barrier) -> None:
            rng = thread_rngs[index]
            tid = q.register_thread()
            ins, dels = inserted[index], deleted[index]
            barrier.wait()
            done = 0
            while done < shares[index]:
                chunk = min(4096, shares[index] - done)
                is_insert = rng.random(chunk) < insert_pct / 100.0
                keys = rng.integers(1, key_max + 1, size=chunk)
                for i in range(chunk):
                    if is_insert[i]:
                        entry = (int(keys[i]), tid)
                        q.insert(*entry)
                        ins[entry] += 1
                    else:
                        got = q.delete_min()
                        if got is not None:
                            dels[got] += 1
                done += chunk
            executed[index] = done

        run_threads(threads, work, name="stress")

        total_inserted = sum(inserted, Counter())
        total_deleted = sum(deleted, Counter())
        report = audit_quiescent(q, total_inserted, total_deleted)
        report.operations = sum(executed)
        if drain:
            report.violations.extend(_drain_violations(q))

        logger.info(
            "Stress campaign audited",
            campaign=campaign,
            threads=threads,
            ops=report.operations,
            residual=report.residual,
            violations=len(report.violations),
        )
        reports.append(report)

    return reports


def _drain_violations(q: Pipq) -> List[str]:
    expected = sorted(q.residual_contents())
    drained: List[tuple] = []

    def drain(index: int, barrier: threading.Barrier) -> None:
        q.register_thread()
        while True:
            got = q.delete_min()
            if got is None:
                return
            drained.append(got)

    run_threads(1, drain, name="drain")

    issues = []
    keys = [k for k, _ in drained]
    if any(a > b for a, b in zip(keys, keys[1:])):
        issues.append("drain_not_sorted")
    if sorted(drained) != expected:
        issues.append(f"drain_mismatch:expected={len(expected)}:drained={len(drained)}")
    return issues
