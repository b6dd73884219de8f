"""NUMA topology discovery, thread-to-node mapping and pinning."""

import os
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import structlog
from pydantic import BaseModel, ConfigDict

from .config import ConfigError

logger = structlog.get_logger(__name__)

SYSFS_NODE_DIR = Path("/sys/devices/system/node")


class PinningPolicy(str, Enum):
    NODE_BY_NODE = "node_by_node"
    NONE = "none"
    SYNTHETIC = "synthetic"


class TopologyMap(BaseModel):
    """Assignment of thread ids to NUMA nodes.

    Node indices are dense: a node with no thread mapped to it is dropped.
    """

    model_config = ConfigDict(frozen=True)

    numa_nodes: int
    node_of_thread: List[int]
    threads_per_node: List[int]
    pinning: PinningPolicy
    cpus_of_node: List[List[int]] = []

    @property
    def threads(self) -> int:
        return len(self.node_of_thread)

    def threads_of_node(self, node: int) -> List[int]:
        return [tid for tid, n in enumerate(self.node_of_thread) if n == node]

    def slot_index(self, tid: int) -> int:
        """Position of ``tid`` in its node's announce array."""
        node = self.node_of_thread[tid]
        return self.node_of_thread[:tid].count(node)

    @classmethod
    def block(
        cls,
        threads: int,
        numa_nodes: int,
        pinning: PinningPolicy = PinningPolicy.SYNTHETIC,
    ) -> "TopologyMap":
        """Contiguous blocks of near-equal size, node 0 first."""
        if threads < 1 or numa_nodes < 1:
            raise ConfigError("threads and numa_nodes must be positive")
        nodes = min(threads, numa_nodes)
        base, extra = divmod(threads, nodes)
        sizes = [base + (1 if n < extra else 0) for n in range(nodes)]
        node_of_thread = [n for n, size in enumerate(sizes) for _ in range(size)]
        return cls(
            numa_nodes=nodes,
            node_of_thread=node_of_thread,
            threads_per_node=sizes,
            pinning=pinning,
        )

    @classmethod
    def node_by_node(cls, threads: int, cpus_of_node: Sequence[Sequence[int]]) -> "TopologyMap":
        """Fill node 0's cores first, then node 1's, wrapping when all are taken."""
        if threads < 1:
            raise ConfigError("threads must be positive")
        capacities = [len(cpus) for cpus in cpus_of_node if cpus]
        cpu_lists = [list(cpus) for cpus in cpus_of_node if cpus]
        if not capacities:
            return cls.block(threads, 1, PinningPolicy.NONE)

        raw = []
        node, used = 0, 0
        for _ in range(threads):
            if used == capacities[node]:
                node, used = (node + 1) % len(capacities), 0
            raw.append(node)
            used += 1

        # Compress to dense indices in first-use order.
        order: List[int] = []
        for n in raw:
            if n not in order:
                order.append(n)
        node_of_thread = [order.index(n) for n in raw]
        return cls(
            numa_nodes=len(order),
            node_of_thread=node_of_thread,
            threads_per_node=[node_of_thread.count(n) for n in range(len(order))],
            pinning=PinningPolicy.NODE_BY_NODE,
            cpus_of_node=[cpu_lists[n] for n in order],
        )


def parse_numa_mode(text: str) -> Tuple[str, Optional[int]]:
    """Parse ``auto``, ``off`` or ``synthetic:<n>``."""
    mode = text.strip().lower()
    if mode in ("auto", "off"):
        return mode, None
    if mode.startswith("synthetic:"):
        try:
            count = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"Invalid synthetic node count: {text}")
        if count < 1:
            raise ConfigError(f"Invalid synthetic node count: {text}")
        return "synthetic", count
    raise ConfigError(f"Unknown NUMA mode: {text}")


def parse_cpulist(text: str) -> List[int]:
    """Expand a sysfs cpulist such as ``0-3,8-11``."""
    cpus: List[int] = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


def _usable_cpus() -> Optional[set]:
    try:
        return set(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        return None


def read_sysfs_nodes(root: Path = SYSFS_NODE_DIR) -> List[List[int]]:
    """CPU lists of each NUMA node, restricted to the CPUs we may run on."""
    if not root.is_dir():
        return []
    usable = _usable_cpus()
    nodes = []
    entries = sorted(
        (p for p in root.glob("node[0-9]*") if p.name[4:].isdigit()),
        key=lambda p: int(p.name[4:]),
    )
    for entry in entries:
        try:
            cpus = parse_cpulist((entry / "cpulist").read_text())
        except (OSError, ValueError) as e:
            logger.debug("Unreadable NUMA node entry", node=entry.name, error=str(e))
            continue
        if usable is not None:
            cpus = [c for c in cpus if c in usable]
        nodes.append(cpus)
    return nodes


def detect_topology(threads: int, mode: str = "off", root: Path = SYSFS_NODE_DIR) -> TopologyMap:
    """Topology for ``threads`` workers under the given NUMA mode.

    ``auto`` reads the machine's nodes and falls back to a single node when
    none are visible; ``off`` is a single unpinned node; ``synthetic:<n>``
    emulates ``n`` nodes without touching the OS.
    """
    kind, count = parse_numa_mode(mode)
    if kind == "synthetic":
        assert count is not None
        return TopologyMap.block(threads, count, PinningPolicy.SYNTHETIC)
    if kind == "off":
        return TopologyMap.block(threads, 1, PinningPolicy.NONE)

    nodes = read_sysfs_nodes(root)
    if not nodes:
        usable = _usable_cpus()
        cpus = sorted(usable) if usable else list(range(os.cpu_count() or 1))
        logger.info("No NUMA information, assuming a single node", cpus=len(cpus))
        nodes = [cpus]
    topo = TopologyMap.node_by_node(threads, nodes)
    logger.info(
        "Detected topology",
        machine_nodes=len(nodes),
        used_nodes=topo.numa_nodes,
        threads_per_node=topo.threads_per_node,
    )
    return topo


def pin_current_thread(topo: TopologyMap, tid: int) -> bool:
    """Best-effort affinity for the calling thread; False when unsupported."""
    if topo.pinning is not PinningPolicy.NODE_BY_NODE:
        return True

    cpus = topo.cpus_of_node[topo.node_of_thread[tid]]
    cpu = cpus[topo.slot_index(tid) % len(cpus)]
    try:
        os.sched_setaffinity(0, {cpu})
    except (AttributeError, OSError) as e:
        logger.warning("Thread pinning unsupported", tid=tid, cpu=cpu, error=str(e))
        return False
    return True
