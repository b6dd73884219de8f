"""Shared configuration, key/value domain types, and instrumentation counters."""

import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import structlog
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError

logger = structlog.get_logger(__name__)

# Keys are unsigned 64-bit priorities; smaller is higher priority.
Key = int
Value = int
ThreadId = int

KEY_MIN = 0
KEY_MAX = (1 << 64) - 1

# Sentinels live outside the user range so they compare below/above every key.
NEG_INF: Key = -1
POS_INF: Key = 1 << 64

CONFIG_ENV_VAR = "PIPQ_CONFIG"

# Constant names used by the algorithm descriptions, accepted in config files.
_ALIASES = {
    "hls": "heap_segment_capacity",
    "cntr_min": "cntr_min",
    "cntr_max": "cntr_max",
    "max_offset": "max_offset",
    "numa_nodes": "numa_nodes",
    "threads": "threads",
}


class ConfigError(ValueError):
    """Invalid or unreadable PIPQ configuration."""


class HelpingSite(str, Enum):
    """Where waiting/inserting threads promote heap minima into the leader list."""

    ON_DELETE_MIN_WAIT = "on_delete_min_wait"
    ON_INSERT = "on_insert"


class PipqConfig(BaseModel):
    """Construction-time parameters of a PIPQ instance.

    Cross-field constraints are checked by ``ConfigValidator`` so that a
    violation can be reported by name instead of as a pydantic error.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    heap_segment_capacity: int = 1024
    threads: int = 8
    cntr_min: int = 10
    cntr_max: int = 100
    max_offset: int = 32
    numa_nodes: int = 1
    instrumentation: bool = True
    helping_site: HelpingSite = HelpingSite.ON_DELETE_MIN_WAIT

    def header(self) -> str:
        """Render the resolved configuration as a single ``key=value`` line."""
        fields = self.model_dump(mode="json")
        return " ".join(f"{name}={value}" for name, value in fields.items())


class ConfigValidator:
    """Validates PipqConfig constraints, reporting violations by name."""

    def validate(self, cfg: PipqConfig) -> Tuple[bool, List[str]]:
        """Return ``(is_valid, issues)`` with issues in detection order."""
        issues = []

        if cfg.heap_segment_capacity < 1:
            issues.append("heap_segment_capacity_not_positive")
        if cfg.threads < 1:
            issues.append("threads_not_positive")
        # Two elements per thread keep L-DeleteMin and L-DeleteMaxP apart.
        if cfg.cntr_min < 2:
            issues.append("cntr_min_below_two")
        if cfg.cntr_min > cfg.cntr_max:
            issues.append("cntr_min_exceeds_cntr_max")
        if cfg.max_offset < 1:
            issues.append("max_offset_not_positive")
        if cfg.numa_nodes < 1:
            issues.append("numa_nodes_not_positive")

        return len(issues) == 0, issues


def config_validate(cfg: PipqConfig) -> Optional[str]:
    """Return None when ``cfg`` is valid, else the first violated constraint."""
    _, issues = ConfigValidator().validate(cfg)
    return issues[0] if issues else None


def ensure_valid(cfg: PipqConfig) -> PipqConfig:
    """Raise ConfigError naming the first violated constraint."""
    issue = config_validate(cfg)
    if issue is not None:
        raise ConfigError(issue)
    return cfg


def _normalize(raw: Mapping[str, Any]) -> Dict[str, Any]:
    normalized: Dict[str, Any] = {}
    for name, value in raw.items():
        key = name.strip().lower()
        key = _ALIASES.get(key, key)
        if key not in PipqConfig.model_fields:
            raise ConfigError(f"Unknown configuration key: {name}")
        if value is None:
            continue
        normalized[key] = value
    return normalized


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> PipqConfig:
    """Build a validated config from a key=value file plus explicit overrides.

    The file defaults to ``$PIPQ_CONFIG``; overrides (CLI flags) win.
    """
    values: Dict[str, Any] = {}

    if path is None and os.getenv(CONFIG_ENV_VAR):
        path = Path(os.environ[CONFIG_ENV_VAR])

    if path is not None:
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        values.update(_normalize(dotenv_values(path)))
        logger.debug("Loaded config file", path=str(path), keys=sorted(values))

    if overrides:
        values.update(_normalize({k: v for k, v in overrides.items() if v is not None}))

    try:
        cfg = PipqConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")

    return ensure_valid(cfg)


class PathCounters:
    """Per-thread tallies of which insert path executed.

    Only the owning thread writes its counters, so plain integers suffice.
    """

    __slots__ = ("fast", "slower", "slowest")

    def __init__(self) -> None:
        self.fast = 0
        self.slower = 0
        self.slowest = 0

    @property
    def total(self) -> int:
        return self.fast + self.slower + self.slowest

    def as_dict(self) -> Dict[str, int]:
        return {"fast": self.fast, "slower": self.slower, "slowest": self.slowest}

    def __repr__(self) -> str:
        return f"PathCounters(fast={self.fast}, slower={self.slower}, slowest={self.slowest})"
