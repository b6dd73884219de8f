"""Parallel single-source shortest paths driven by the queue.

Workers repeatedly delete the closest pending (distance, node) entry, skip it
if a shorter distance has since been recorded, and otherwise relax its
out-edges with an atomic minimum, inserting every improvement.
"""

import heapq
import threading
import time
from pathlib import Path
from typing import IO, Any, Dict, List, Optional, Tuple, Union

import numpy as np
import structlog
from atomics import UINT, atomicview
from pydantic import BaseModel, ConfigDict

from .atomic import AtomicWord, pause
from .runner import run_threads
from .topology import pin_current_thread

logger = structlog.get_logger(__name__)

INF = (1 << 64) - 1
MAX_RANDOM_WEIGHT = 255


class GraphFormatError(ValueError):
    """Unparseable or empty edge list."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class Graph:
    """Directed graph in compressed sparse row form over dense node indices."""

    __slots__ = ("indptr", "indices", "weights", "node_ids")

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray, node_ids: np.ndarray) -> None:
        self.indptr = indptr
        self.indices = indices
        self.weights = weights
        self.node_ids = node_ids

    @classmethod
    def from_edges(
        cls, n: int, src: np.ndarray, dst: np.ndarray, weights: np.ndarray, node_ids: Optional[np.ndarray] = None
    ) -> "Graph":
        """Build CSR arrays from parallel source, target and weight arrays."""
        order = np.argsort(src, kind="stable")
        counts = np.bincount(src, minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(
            indptr=indptr,
            indices=np.asarray(dst, dtype=np.int64)[order],
            weights=np.asarray(weights, dtype=np.uint64)[order],
            node_ids=np.arange(n, dtype=np.int64) if node_ids is None else node_ids,
        )

    @property
    def n(self) -> int:
        """Number of nodes."""
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        """Number of directed edges."""
        return len(self.indices)

    def edges_of(self, u: int) -> Tuple[np.ndarray, np.ndarray]:
        """Out-neighbours of ``u`` and the matching weights."""
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.indices[lo:hi], self.weights[lo:hi]

    def index_of(self, node_id: int) -> int:
        """Dense index of an original node id."""
        hits = np.nonzero(self.node_ids == node_id)[0]
        if len(hits) == 0:
            raise KeyError(node_id)
        return int(hits[0])

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, edges={self.num_edges})"


def parse_weights(spec: str) -> Tuple[str, Optional[int]]:
    """``unit`` or ``random:<seed>``."""
    if spec == "unit":
        return "unit", None
    if spec.startswith("random:"):
        try:
            return "random", int(spec.split(":", 1)[1])
        except ValueError:
            pass
    raise ValueError(f"Unknown weight policy: {spec}")


def load_edge_list(
    path: Union[str, Path], undirected: bool = False, weights: str = "unit"
) -> Graph:
    """Read ``u v [w]`` lines; ``#`` comments are skipped and ids remapped densely.

    Explicit weights in the file win over the weight policy.
    """
    kind, seed = parse_weights(weights)
    ids: Dict[int, int] = {}
    src: List[int] = []
    dst: List[int] = []
    wts: List[int] = []
    given: List[bool] = []

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (2, 3):
                raise GraphFormatError(f"expected 'u v [w]', got {line!r}", lineno)
            try:
                u, v = int(fields[0]), int(fields[1])
                w = int(fields[2]) if len(fields) == 3 else 1
            except ValueError:
                raise GraphFormatError(f"non-integer field in {line!r}", lineno)
            if u < 0 or v < 0:
                raise GraphFormatError("negative node id", lineno)
            if w < 1:
                raise GraphFormatError(f"weight {w} below 1", lineno)
            src.append(ids.setdefault(u, len(ids)))
            dst.append(ids.setdefault(v, len(ids)))
            wts.append(w)
            given.append(len(fields) == 3)

    if not src:
        raise GraphFormatError(f"no edges in {path}")

    weight_arr = np.asarray(wts, dtype=np.uint64)
    if kind == "random":
        drawn = np.random.default_rng(seed).integers(1, MAX_RANDOM_WEIGHT + 1, size=len(wts), dtype=np.uint64)
        weight_arr = np.where(np.asarray(given), weight_arr, drawn)

    src_arr = np.asarray(src, dtype=np.int64)
    dst_arr = np.asarray(dst, dtype=np.int64)
    if undirected:
        src_arr, dst_arr = np.concatenate([src_arr, dst_arr]), np.concatenate([dst_arr, src_arr])
        weight_arr = np.concatenate([weight_arr, weight_arr])

    node_ids = np.empty(len(ids), dtype=np.int64)
    for original, dense in ids.items():
        node_ids[dense] = original

    graph = Graph.from_edges(len(ids), src_arr, dst_arr, weight_arr, node_ids)
    logger.info("Loaded edge list", path=str(path), nodes=graph.n, edges=graph.num_edges)
    return graph


def dump_edge_list(graph: Graph, out: Union[str, Path, IO[str]]) -> None:
    """Write every directed edge as ``u v w`` using original node ids."""
    if isinstance(out, (str, Path)):
        with open(out, "w") as fh:
            dump_edge_list(graph, fh)
        return
    for u in range(graph.n):
        nbrs, wts = graph.edges_of(u)
        for v, w in zip(nbrs, wts):
            out.write(f"{graph.node_ids[u]} {graph.node_ids[v]} {w}\n")


def random_graph(n: int, m: int, seed: int = 0, max_weight: int = MAX_RANDOM_WEIGHT) -> Graph:
    """Random spanning tree rooted at 0 plus random extra edges, ``m`` directed edges in all."""
    if n < 1 or m < n - 1:
        raise ValueError("need n >= 1 and at least n - 1 edges")
    rng = np.random.default_rng(seed)
    tree_dst = np.arange(1, n, dtype=np.int64)
    tree_src = np.array([rng.integers(0, v) for v in range(1, n)], dtype=np.int64)
    extra = m - (n - 1)
    src = np.concatenate([tree_src, rng.integers(0, n, size=extra)])
    dst = np.concatenate([tree_dst, rng.integers(0, n, size=extra)])
    weights = rng.integers(1, max_weight + 1, size=m, dtype=np.uint64)
    return Graph.from_edges(n, src, dst, weights)


def sequential_dijkstra(graph: Graph, source: int) -> np.ndarray:
    """Reference distances (INF where unreachable)."""
    dist = np.full(graph.n, INF, dtype=np.uint64)
    dist[source] = 0
    heap = [(0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        nbrs, wts = graph.edges_of(u)
        for v, w in zip(nbrs.tolist(), wts.tolist()):
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


class AtomicDistTable:
    """Distances in a uint64 buffer updated with an atomic minimum."""

    def __init__(self, n: int, source: int) -> None:
        self._dist = np.full(n, INF, dtype=np.uint64)
        self._dist[source] = 0
        self._bytes = memoryview(self._dist.view(np.uint8))

    def _cell(self, node: int) -> memoryview:
        return self._bytes[node * 8 : node * 8 + 8]

    def load(self, node: int) -> int:
        """Current distance of ``node``."""
        with atomicview(buffer=self._cell(node), atype=UINT) as a:
            return a.load()

    def relax(self, node: int, candidate: int) -> bool:
        """Lower dist[node] to ``candidate`` if smaller; True when this call lowered it."""
        with atomicview(buffer=self._cell(node), atype=UINT) as a:
            current = a.load()
            while candidate < current:
                res = a.cmpxchg_weak(expected=current, desired=candidate)
                if res.success:
                    return True
                current = res.expected
        return False

    def snapshot(self) -> np.ndarray:
        """Copy of every distance."""
        return self._dist.copy()


class SsspResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dist: np.ndarray
    threads: int
    elapsed: float
    processed: int
    stale: int
    reachable: int

    @property
    def work_inflation(self) -> float:
        return (self.processed + self.stale) / max(1, self.reachable)

    @property
    def checksum(self) -> int:
        return int(sum(int(d) for d in self.dist if d != INF))


def sssp_parallel(graph: Graph, source: int, nthreads: int, q: Any) -> SsspResult:
    """Shortest distances from ``source`` computed by ``nthreads`` workers sharing ``q``.

    ``q`` must have room for ``nthreads`` registrations. A worker exits once
    the queue reports EMPTY while no entry is in flight.
    """
    if not 0 <= source < graph.n:
        raise ValueError(f"source {source} outside [0, {graph.n})")

    dist = AtomicDistTable(graph.n, source)
    in_flight = AtomicWord(0, signed=True)
    processed = [0] * nthreads
    stale = [0] * nthreads
    window: Dict[str, float] = {}
    indptr, indices, weights = graph.indptr, graph.indices, graph.weights

    def work(index: int, barrier: threading.Barrier) -> None:
        tid = q.register_thread()
        topo = getattr(q, "topology", None)
        if topo is not None:
            pin_current_thread(topo, tid)
        if index == 0:
            in_flight.fetch_add(1)
            q.insert(0, source)
        if barrier.wait() == 0:
            window["start"] = time.perf_counter()

        done = skipped = 0
        while True:
            got = q.delete_min()
            if got is None:
                if in_flight.load() == 0:
                    break
                pause()
                continue
            d, u = got
            if d > dist.load(u):
                skipped += 1
                in_flight.fetch_add(-1)
                continue
            done += 1
            for k in range(indptr[u], indptr[u + 1]):
                v = int(indices[k])
                nd = d + int(weights[k])
                if dist.relax(v, nd):
                    in_flight.fetch_add(1)
                    q.insert(nd, v)
            in_flight.fetch_add(-1)

        processed[index] = done
        stale[index] = skipped

    run_threads(nthreads, work, name="sssp")
    elapsed = time.perf_counter() - window["start"]

    snapshot = dist.snapshot()
    result = SsspResult(
        dist=snapshot,
        threads=nthreads,
        elapsed=elapsed,
        processed=sum(processed),
        stale=sum(stale),
        reachable=int(np.count_nonzero(snapshot != INF)),
    )
    logger.info(
        "SSSP finished",
        threads=nthreads,
        elapsed=round(elapsed, 4),
        processed=result.processed,
        stale=result.stale,
        checksum=result.checksum,
    )
    return result
