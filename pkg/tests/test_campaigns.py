"""Tests for the verification campaigns."""

import pytest

from pipq.campaigns import lincheck_config, run_lincheck, run_sequential_equivalence, run_stress
from pipq.config import PipqConfig


@pytest.mark.unit
class TestSequentialEquivalence:
    """Test single-threaded replay against the oracle."""

    @pytest.mark.parametrize("seed", range(5))
    def test_no_mismatches(self, seed):
        """Test random workloads match the oracle."""
        cfg = PipqConfig(heap_segment_capacity=8, cntr_min=2, cntr_max=4, max_offset=3)

        assert run_sequential_equivalence(seed, ops=3000, config=cfg, key_max=200) == 0

    def test_insert_heavy(self):
        """Test a 95% insert mix with default thresholds."""
        assert run_sequential_equivalence(11, ops=5000, insert_pct=95) == 0


@pytest.mark.concurrency
class TestLincheck:
    """Test randomized linearizability campaigns."""

    def test_lincheck_config_thresholds(self):
        """Test campaign configs stay tiny and valid."""
        cfg = lincheck_config(3)

        assert (cfg.threads, cfg.numa_nodes, cfg.cntr_min, cfg.cntr_max, cfg.max_offset) == (3, 2, 2, 3, 2)

    def test_short_campaign_passes(self):
        """Test a short campaign finds every history linearizable."""
        summary = run_lincheck(threads=3, ops_per_thread=8, iters=30, seed=1)

        assert summary.histories == 30
        assert summary.failures == 0
        assert summary.passed
        assert summary.first_counterexample == []

    def test_too_few_thread_ids(self):
        """Test a config smaller than the worker count is rejected."""
        with pytest.raises(ValueError):
            run_lincheck(threads=3, iters=1, config=PipqConfig(threads=2))

    @pytest.mark.slow
    def test_acceptance_campaigns(self):
        """Test 500 histories at 3x24 and 200 at 4x32 all pass."""
        assert run_lincheck(threads=3, ops_per_thread=24, iters=500, seed=3).failures == 0
        assert run_lincheck(threads=4, ops_per_thread=32, iters=200, seed=4).failures == 0


@pytest.mark.concurrency
class TestStress:
    """Test stress runs followed by quiescent audits."""

    def test_small_campaigns_pass(self):
        """Test two short campaigns pass every audit and the drain check."""
        cfg = PipqConfig(heap_segment_capacity=8, cntr_min=2, cntr_max=4, max_offset=4, numa_nodes=2)

        reports = run_stress(threads=4, ops=8000, seed=5, campaigns=2, config=cfg, key_max=500)

        assert len(reports) == 2
        for report in reports:
            assert report.violations == []
            assert report.threads == 5

    def test_insert_only(self):
        """Test an insert-only run leaves everything resident."""
        reports = run_stress(threads=2, ops=2000, insert_pct=100, config=PipqConfig(cntr_min=2, cntr_max=3))

        assert reports[0].passed
        assert reports[0].residual == 2000

    def test_uneven_split_runs_every_operation(self):
        """Test 10 inserts over 3 threads all execute."""
        cfg = PipqConfig(cntr_min=2, cntr_max=3)

        reports = run_stress(threads=3, ops=10, insert_pct=100, config=cfg, key_max=50)

        assert reports[0].operations == 10
        assert reports[0].residual == 10
        assert reports[0].passed

    @pytest.mark.slow
    def test_default_thresholds_long_run(self):
        """Test a longer run with default thresholds."""
        reports = run_stress(threads=8, ops=200_000, seed=9)

        assert all(r.passed for r in reports)
