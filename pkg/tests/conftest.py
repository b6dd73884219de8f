"""Pytest configuration and shared fixtures."""

import os
import threading
from unittest.mock import patch

import pytest
from hypothesis import HealthCheck, settings

from pipq.config import PipqConfig
from pipq.pipq import Pipq

settings.register_profile(
    "ci",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("dev", max_examples=20, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def clean_environment():
    """Run without a config file picked up from the environment."""
    with patch.dict(os.environ, {}, clear=False):
        os.environ.pop("PIPQ_CONFIG", None)
        os.environ.pop("PIPQ_DEBUG", None)
        yield


@pytest.fixture
def small_config():
    """Tiny thresholds so every insert path and the prefix relink are reachable."""
    return PipqConfig(
        heap_segment_capacity=4,
        threads=4,
        cntr_min=2,
        cntr_max=2,
        max_offset=2,
        numa_nodes=1,
    )


@pytest.fixture
def registered_queue(small_config):
    """A Pipq instance with the calling (test) thread registered as tid 0."""
    q = Pipq(small_config)
    q.register_thread()
    return q


@pytest.fixture
def run_in_thread():
    """Run ``fn`` on a fresh thread (fresh registrations) and return its result."""

    def runner(fn, *args, **kwargs):
        box = {}

        def body():
            try:
                box["result"] = fn(*args, **kwargs)
            except BaseException as e:  # re-raised on the test thread
                box["error"] = e

        t = threading.Thread(target=body)
        t.start()
        t.join()
        if "error" in box:
            raise box["error"]
        return box.get("result")

    return runner


@pytest.fixture
def drain_queue():
    """Delete-min until EMPTY from the calling (registered) thread."""

    def drain(q):
        out = []
        while True:
            got = q.delete_min()
            if got is None:
                return out
            out.append(got)

    return drain


# Test configuration
def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line("markers", "unit: single-threaded unit test")
    config.addinivalue_line("markers", "concurrency: multi-threaded test")
    config.addinivalue_line("markers", "slow: long-running campaign")
    config.addinivalue_line("markers", "property: hypothesis property test")


def pytest_collection_modifyitems(config, items):
    """Skip slow campaigns unless RUN_SLOW_TESTS is set."""
    if os.getenv("RUN_SLOW_TESTS", "false").lower() == "true":
        return
    skip_slow = pytest.mark.skip(reason="set RUN_SLOW_TESTS=true to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
