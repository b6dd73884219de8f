"""PIPQ: a strict, linearizable concurrent priority queue.

Per-thread worker heaps absorb inserts; a shared leader list holds each
thread's smallest elements and serves delete-min through NUMA-aware
combining.
"""

__version__ = "0.1.0"
__author__ = "PIPQ Project"

from .baseline import CoarseLockedQueue
from .config import ConfigError, HelpingSite, PipqConfig, load_config
from .oracle import audit_quiescent, check_linearizable
from .pipq import Pipq, PipqStats, RegistrationError
from .topology import TopologyMap, detect_topology

__all__ = [
    "CoarseLockedQueue",
    "ConfigError",
    "HelpingSite",
    "Pipq",
    "PipqConfig",
    "PipqStats",
    "RegistrationError",
    "TopologyMap",
    "audit_quiescent",
    "check_linearizable",
    "detect_topology",
    "load_config",
]
