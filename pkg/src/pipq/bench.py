"""Mixed, designated-thread and phased workloads with throughput, latency and
insert-path metrics."""

import csv
import json
import threading
import time
from collections import Counter
from enum import Enum
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel

from .config import HelpingSite
from .runner import run_threads
from .topology import pin_current_thread

logger = structlog.get_logger(__name__)

# Operations generated per RNG draw.
CHUNK = 1024

QueueFactory = Callable[[int], Any]


class WorkloadError(ValueError):
    """Workload parameters that cannot be run."""


class WorkloadKind(str, Enum):
    MIXED = "mixed"
    DESIGNATED = "designated"
    PHASED = "phased"


class WorkloadSpec(BaseModel):
    kind: WorkloadKind = WorkloadKind.MIXED
    insert_pct: float = 50.0
    delete_fraction: float = 0.5
    insert_count: int = 0
    delete_count: int = 0
    seconds: float = 5.0
    trials: int = 3
    warmup_seconds: float = 1.0
    key_max: int = 1_000_000
    seed: int = 0
    latency_every: int = 64


class WorkloadValidator:
    def validate(self, spec: WorkloadSpec) -> Tuple[bool, List[str]]:
        issues = []
        if not 0 <= spec.insert_pct <= 100:
            issues.append("insert_pct_out_of_range")
        if not 0 < spec.delete_fraction < 1:
            issues.append("delete_fraction_out_of_range")
        if spec.kind is WorkloadKind.PHASED:
            if spec.insert_count < 1 or spec.delete_count < 1:
                issues.append("phase_counts_not_positive")
            elif spec.delete_count > spec.insert_count:
                issues.append("phase_deletes_exceed_inserts")
        elif spec.seconds <= 0:
            issues.append("seconds_not_positive")
        if spec.trials < 1:
            issues.append("trials_not_positive")
        if spec.key_max < 1:
            issues.append("key_max_not_positive")
        if spec.latency_every < 1:
            issues.append("latency_every_not_positive")
        return len(issues) == 0, issues


def _ensure_valid(spec: WorkloadSpec) -> None:
    _, issues = WorkloadValidator().validate(spec)
    if issues:
        raise WorkloadError(issues[0])


class LatencySummary(BaseModel):
    samples: int = 0
    mean_us: float = 0.0
    p50_us: float = 0.0
    p90_us: float = 0.0
    p99_us: float = 0.0

    @classmethod
    def from_ns(cls, samples: Sequence[int]) -> "LatencySummary":
        if not samples:
            return cls()
        us = np.asarray(samples, dtype=np.float64) / 1000.0
        p50, p90, p99 = np.percentile(us, [50, 90, 99])
        return cls(
            samples=len(us),
            mean_us=float(us.mean()),
            p50_us=float(p50),
            p90_us=float(p90),
            p99_us=float(p99),
        )


class TrialMetrics(BaseModel):
    trial: int
    seconds: float
    ops: int
    inserts: int
    deletes: int
    empty_deletes: int
    mops: float
    insert_mops: float
    delete_mops: float
    insert_latency: LatencySummary
    delete_latency: LatencySummary
    path_fractions: Dict[str, float]
    batch_mean: float
    phase1_mops: Optional[float] = None
    phase2_mops: Optional[float] = None
    drain_sorted: Optional[bool] = None
    conserved: Optional[bool] = None


class MetricsReport(BaseModel):
    workload: str
    queue: str
    threads: int
    config_header: str = ""
    trials: List[TrialMetrics] = []

    def _mean(self, field: str) -> float:
        values = [getattr(t, field) for t in self.trials if getattr(t, field) is not None]
        return float(np.mean(values)) if values else 0.0

    @property
    def throughput(self) -> float:
        """Mean million operations per second over trials."""
        return self._mean("mops")

    @property
    def path_distribution(self) -> Dict[str, float]:
        names = ("fast", "slower", "slowest")
        return {
            n: float(np.mean([t.path_fractions.get(n, 0.0) for t in self.trials])) if self.trials else 0.0
            for n in names
        }

    @property
    def coordinator_batch_mean(self) -> float:
        return self._mean("batch_mean")

    def summary(self) -> Dict[str, Any]:
        return {
            "mops": self.throughput,
            "insert_mops": self._mean("insert_mops"),
            "delete_mops": self._mean("delete_mops"),
            "path_distribution": self.path_distribution,
            "coordinator_batch_mean": self.coordinator_batch_mean,
        }


# Operation streams ------------------------------------------------------------


def thread_streams(seed: int, nthreads: int) -> List[np.random.Generator]:
    """One independent generator per worker, reproducible for a fixed seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(nthreads)]


def draw_ops(rng: np.random.Generator, n: int, insert_pct: float, key_max: int) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` (is_insert, key) pairs with keys uniform over [1, key_max]."""
    is_insert = rng.random(n) < insert_pct / 100.0
    keys = rng.integers(1, key_max + 1, size=n, dtype=np.uint64)
    return is_insert, keys


class _ThreadTally:
    __slots__ = ("inserts", "deletes", "empty", "ins_lat", "del_lat", "paths0")

    def __init__(self) -> None:
        self.inserts = 0
        self.deletes = 0
        self.empty = 0
        self.ins_lat: List[int] = []
        self.del_lat: List[int] = []
        self.paths0: Dict[str, int] = {}


def _path_counts(q: Any, tid: int) -> Dict[str, int]:
    counters = getattr(q, "path_counters", None)
    return counters[tid].as_dict() if counters is not None else {}


def _prepare_thread(q: Any) -> int:
    tid = q.register_thread()
    topo = getattr(q, "topology", None)
    if topo is not None:
        pin_current_thread(topo, tid)
    return tid


def _run_loop(
    q: Any,
    rng: np.random.Generator,
    tally: Optional[_ThreadTally],
    deadline: float,
    insert_pct: float,
    key_max: int,
    latency_every: int,
    tid: int,
) -> None:
    """Issue operations until ``deadline``; ``tally`` None means untimed warmup."""
    op = 0
    while time.perf_counter() < deadline:
        is_insert, keys = draw_ops(rng, CHUNK, insert_pct, key_max)
        for i in range(CHUNK):
            sample = tally is not None and op % latency_every == 0
            start = time.perf_counter_ns() if sample else 0
            if is_insert[i]:
                q.insert(int(keys[i]), tid)
                if tally is not None:
                    tally.inserts += 1
                    if sample:
                        tally.ins_lat.append(time.perf_counter_ns() - start)
            else:
                got = q.delete_min()
                if tally is not None:
                    tally.deletes += 1
                    if got is None:
                        tally.empty += 1
                    if sample:
                        tally.del_lat.append(time.perf_counter_ns() - start)
            op += 1


def _trial_metrics(
    trial: int, seconds: float, tallies: List[_ThreadTally], path_delta: Counter, batch_mean: float
) -> TrialMetrics:
    inserts = sum(t.inserts for t in tallies)
    deletes = sum(t.deletes for t in tallies)
    ops = inserts + deletes
    path_total = sum(path_delta.values())
    fractions = (
        {n: path_delta[n] / path_total for n in ("fast", "slower", "slowest")} if path_total else {}
    )
    return TrialMetrics(
        trial=trial,
        seconds=seconds,
        ops=ops,
        inserts=inserts,
        deletes=deletes,
        empty_deletes=sum(t.empty for t in tallies),
        mops=ops / seconds / 1e6 if seconds > 0 else 0.0,
        insert_mops=inserts / seconds / 1e6 if seconds > 0 else 0.0,
        delete_mops=deletes / seconds / 1e6 if seconds > 0 else 0.0,
        insert_latency=LatencySummary.from_ns([x for t in tallies for x in t.ins_lat]),
        delete_latency=LatencySummary.from_ns([x for t in tallies for x in t.del_lat]),
        path_fractions=fractions,
        batch_mean=batch_mean,
    )


def _timed_trial(
    q: Any,
    spec: WorkloadSpec,
    nthreads: int,
    trial: int,
    insert_pct_of: Callable[[int], float],
) -> TrialMetrics:
    """Run every worker for ``spec.seconds`` after an untimed warmup."""
    rngs = thread_streams(spec.seed + trial, nthreads)
    tallies = [_ThreadTally() for _ in range(nthreads)]
    path_delta: Counter = Counter()
    delta_lock = threading.Lock()
    window: Dict[str, float] = {}

    def stamp() -> None:
        window["start"] = time.perf_counter()

    timed_barrier = threading.Barrier(nthreads, action=stamp)

    def work(index: int, barrier: threading.Barrier) -> None:
        tid = _prepare_thread(q)
        pct = insert_pct_of(index)
        barrier.wait()
        if spec.warmup_seconds > 0:
            _run_loop(q, rngs[index], None, time.perf_counter() + spec.warmup_seconds,
                      pct, spec.key_max, spec.latency_every, tid)
        tally = tallies[index]
        tally.paths0 = _path_counts(q, tid)
        timed_barrier.wait()
        _run_loop(q, rngs[index], tally, window["start"] + spec.seconds,
                  pct, spec.key_max, spec.latency_every, tid)
        after = Counter(_path_counts(q, tid))
        after.subtract(tally.paths0)
        with delta_lock:
            path_delta.update(after)

    run_threads(nthreads, work, name=f"bench-{spec.kind.value}")
    elapsed = time.perf_counter() - window["start"]
    return _trial_metrics(trial, elapsed, tallies, path_delta, q.drain_stats().batch_mean)


def _new_report(spec: WorkloadSpec, q: Any, nthreads: int) -> MetricsReport:
    cfg = getattr(q, "config", None)
    return MetricsReport(
        workload=spec.kind.value,
        queue=type(q).__name__,
        threads=nthreads,
        config_header=cfg.header() if cfg is not None else "",
    )


def run_mixed(factory: QueueFactory, spec: WorkloadSpec, nthreads: int) -> MetricsReport:
    """Every thread mixes inserts and delete-mins at ``spec.insert_pct``."""
    _ensure_valid(spec)
    report: Optional[MetricsReport] = None
    for trial in range(spec.trials):
        q = factory(nthreads)
        if report is None:
            report = _new_report(spec, q, nthreads)
        report.trials.append(_timed_trial(q, spec, nthreads, trial, lambda _: spec.insert_pct))
    assert report is not None
    logger.info("Mixed benchmark finished", threads=nthreads, mops=report.throughput)
    return report


def designated_split(nthreads: int, delete_fraction: float) -> Tuple[int, int]:
    """(inserters, deleters) with at least one of each."""
    if nthreads < 2:
        raise WorkloadError("designated runs need at least two threads")
    deleters = min(nthreads - 1, max(1, round(delete_fraction * nthreads)))
    return nthreads - deleters, deleters


def run_designated(factory: QueueFactory, spec: WorkloadSpec, nthreads: int) -> MetricsReport:
    """Threads either only insert or only delete; throughputs reported separately."""
    _ensure_valid(spec)
    inserters, _ = designated_split(nthreads, spec.delete_fraction)
    report: Optional[MetricsReport] = None
    for trial in range(spec.trials):
        q = factory(nthreads)
        cfg = getattr(q, "config", None)
        if cfg is not None and cfg.helping_site is not HelpingSite.ON_INSERT:
            raise WorkloadError("designated runs need a queue helping on insert")
        if report is None:
            report = _new_report(spec, q, nthreads)
        report.trials.append(
            _timed_trial(q, spec, nthreads, trial, lambda i: 100.0 if i < inserters else 0.0)
        )
    assert report is not None
    logger.info(
        "Designated benchmark finished",
        threads=nthreads,
        insert_mops=report.summary()["insert_mops"],
        delete_mops=report.summary()["delete_mops"],
    )
    return report


def _split(total: int, parts: int) -> List[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def run_phased(factory: QueueFactory, spec: WorkloadSpec, nthreads: int) -> MetricsReport:
    """Insert ``insert_count`` keys, then delete ``delete_count``, then drain.

    The drain runs on worker 0 alone after both phases and must return the
    remainder in non-decreasing order, none smaller than a phase-2 result,
    followed by exactly one EMPTY.
    """
    _ensure_valid(spec)
    report: Optional[MetricsReport] = None
    for trial in range(spec.trials):
        q = factory(nthreads)
        if report is None:
            report = _new_report(spec, q, nthreads)
        report.trials.append(_phased_trial(q, spec, nthreads, trial))
    assert report is not None
    logger.info(
        "Phased benchmark finished",
        threads=nthreads,
        insert_count=spec.insert_count,
        delete_count=spec.delete_count,
    )
    return report


def _phased_trial(q: Any, spec: WorkloadSpec, nthreads: int, trial: int) -> TrialMetrics:
    rngs = thread_streams(spec.seed + trial, nthreads)
    insert_shares = _split(spec.insert_count, nthreads)
    delete_shares = _split(spec.delete_count, nthreads)
    tallies = [_ThreadTally() for _ in range(nthreads)]
    inserted = [Counter() for _ in range(nthreads)]
    phase2: List[List[Tuple[int, int]]] = [[] for _ in range(nthreads)]
    drained: List[Tuple[int, int]] = []
    stamps: List[float] = []
    drain_empty = 0

    def stamp() -> None:
        stamps.append(time.perf_counter())

    phase_barrier = threading.Barrier(nthreads, action=stamp)

    def work(index: int, barrier: threading.Barrier) -> None:
        nonlocal drain_empty
        tid = _prepare_thread(q)
        tally = tallies[index]
        phase_barrier.wait()

        keys = rngs[index].integers(1, spec.key_max + 1, size=insert_shares[index], dtype=np.uint64)
        for key in keys:
            q.insert(int(key), tid)
            inserted[index][(int(key), tid)] += 1
        tally.inserts = len(keys)
        phase_barrier.wait()

        for _ in range(delete_shares[index]):
            got = q.delete_min()
            tally.deletes += 1
            if got is None:
                tally.empty += 1
            else:
                phase2[index].append(got)
        phase_barrier.wait()

        if index == 0:
            while True:
                got = q.delete_min()
                if got is None:
                    drain_empty += 1
                    break
                drained.append(got)

    run_threads(nthreads, work, name="bench-phased")

    phase1 = stamps[1] - stamps[0]
    phase2_seconds = stamps[2] - stamps[1]
    metrics = _trial_metrics(trial, phase1 + phase2_seconds, tallies, Counter(), q.drain_stats().batch_mean)

    drained_keys = [k for k, _ in drained]
    phase2_all = [entry for part in phase2 for entry in part]
    sorted_drain = all(a <= b for a, b in zip(drained_keys, drained_keys[1:]))
    if phase2_all and drained_keys:
        sorted_drain = sorted_drain and max(k for k, _ in phase2_all) <= drained_keys[0]

    metrics.empty_deletes += drain_empty
    metrics.phase1_mops = spec.insert_count / phase1 / 1e6 if phase1 > 0 else 0.0
    metrics.phase2_mops = spec.delete_count / phase2_seconds / 1e6 if phase2_seconds > 0 else 0.0
    metrics.drain_sorted = sorted_drain
    metrics.conserved = sum(inserted, Counter()) == Counter(phase2_all) + Counter(drained)
    if not (metrics.drain_sorted and metrics.conserved):
        logger.warning(
            "Phased run failed its drain checks",
            trial=trial,
            drain_sorted=metrics.drain_sorted,
            conserved=metrics.conserved,
        )
    return metrics


def insert_scaling(
    factory: QueueFactory, threads_list: Sequence[int], seconds: float = 1.0, seed: int = 0
) -> Dict[int, float]:
    """100%-insert throughput (Mops/s) per thread count, one trial each."""
    spec = WorkloadSpec(insert_pct=100.0, seconds=seconds, trials=1, warmup_seconds=0.0, seed=seed)
    return {n: run_mixed(factory, spec, n).throughput for n in threads_list}


# Output -----------------------------------------------------------------------

CSV_FIELDS = [
    "workload",
    "queue",
    "threads",
    "trial",
    "seconds",
    "ops",
    "mops",
    "insert_mops",
    "delete_mops",
    "empty_deletes",
    "insert_lat_mean_us",
    "insert_lat_p99_us",
    "delete_lat_mean_us",
    "delete_lat_p99_us",
    "fast",
    "slower",
    "slowest",
    "batch_mean",
    "phase1_mops",
    "phase2_mops",
    "drain_sorted",
    "conserved",
]


def _row(report: MetricsReport, t: TrialMetrics) -> Dict[str, Any]:
    return {
        "workload": report.workload,
        "queue": report.queue,
        "threads": report.threads,
        "trial": t.trial,
        "seconds": round(t.seconds, 4),
        "ops": t.ops,
        "mops": round(t.mops, 4),
        "insert_mops": round(t.insert_mops, 4),
        "delete_mops": round(t.delete_mops, 4),
        "empty_deletes": t.empty_deletes,
        "insert_lat_mean_us": round(t.insert_latency.mean_us, 3),
        "insert_lat_p99_us": round(t.insert_latency.p99_us, 3),
        "delete_lat_mean_us": round(t.delete_latency.mean_us, 3),
        "delete_lat_p99_us": round(t.delete_latency.p99_us, 3),
        "fast": round(t.path_fractions.get("fast", 0.0), 4),
        "slower": round(t.path_fractions.get("slower", 0.0), 4),
        "slowest": round(t.path_fractions.get("slowest", 0.0), 4),
        "batch_mean": round(t.batch_mean, 3),
        "phase1_mops": "" if t.phase1_mops is None else round(t.phase1_mops, 4),
        "phase2_mops": "" if t.phase2_mops is None else round(t.phase2_mops, 4),
        "drain_sorted": "" if t.drain_sorted is None else t.drain_sorted,
        "conserved": "" if t.conserved is None else t.conserved,
    }


def write_csv(report: MetricsReport, fh: IO[str], header: bool = True) -> None:
    """One row per trial."""
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
    if header:
        writer.writeheader()
    for t in report.trials:
        writer.writerow(_row(report, t))


def write_json(report: MetricsReport, fh: IO[str]) -> None:
    """The full report plus trial-averaged summary."""
    payload = report.model_dump(mode="json")
    payload["summary"] = report.summary()
    json.dump(payload, fh, indent=2)
    fh.write("\n")


def render_table(report: MetricsReport) -> str:
    columns = ["trial", "seconds", "mops", "insert_mops", "delete_mops", "fast", "slower", "slowest", "batch_mean"]
    rows = [[str(_row(report, t)[c]) for c in columns] for t in report.trials]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(columns)]
    lines = [
        f"{report.workload} on {report.queue}, {report.threads} threads",
        "  ".join(c.rjust(w) for c, w in zip(columns, widths)),
    ]
    lines.extend("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows)
    lines.append(f"mean Mops/s: {report.throughput:.4f}")
    return "\n".join(lines)
