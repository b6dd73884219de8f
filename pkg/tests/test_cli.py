"""Tests for the command-line entry point."""

import csv
import io
import json
import logging

import pytest
import structlog

from pipq.cli import EXIT_OK, EXIT_USAGE, build_parser, main


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop the handler bound to the captured stderr after each run."""
    yield
    structlog.reset_defaults()
    logging.getLogger().handlers.clear()


@pytest.fixture
def edge_file(tmp_path):
    """A small weighted graph."""
    path = tmp_path / "graph.txt"
    path.write_text("# toy graph\n0 1 4\n0 2 1\n2 1 2\n1 3 5\n")
    return path


def output_lines(capsys):
    return capsys.readouterr().out.splitlines()


@pytest.mark.unit
class TestParser:
    """Test argument parsing and usage errors."""

    def test_no_args_prints_usage(self, capsys):
        """Test no arguments exits 2 with usage on stderr."""
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        """Test argparse errors map to exit 2."""
        assert main(["bench-mixed", "--bogus"]) == EXIT_USAGE

    def test_help(self, capsys):
        """Test --help exits cleanly."""
        assert main(["--help"]) == EXIT_OK
        assert "lincheck" in capsys.readouterr().out

    def test_subcommands_registered(self):
        """Test every subcommand parses with shared flags."""
        parser = build_parser()
        for argv in (
            ["bench-mixed", "--threads", "2", "--insert-pct", "95"],
            ["bench-designated", "--delete-fraction", "0.25"],
            ["bench-phased", "--inserts", "10", "--deletes", "5"],
            ["sssp", "--random", "10:20"],
            ["lincheck", "--ops", "24"],
            ["stress", "--campaigns", "2"],
            ["audit", "--seeds", "3"],
        ):
            args = parser.parse_args(argv + ["--seed", "4", "--numa", "synthetic:2"])
            assert args.seed == 4

    @pytest.mark.parametrize(
        "argv",
        [
            ["stress", "--numa", "sockets", "--ops", "10"],
            ["stress", "--cntr-min", "1", "--ops", "10"],
            ["bench-phased", "--inserts", "5", "--deletes", "10", "--threads", "1"],
            ["sssp", "--random", "ten"],
        ],
    )
    def test_invalid_values_exit_2(self, argv, capsys):
        """Test configuration and workload errors exit 2."""
        assert main(argv) == EXIT_USAGE
        assert "pipq: error" in capsys.readouterr().err

    def test_missing_graph_file(self, tmp_path, capsys):
        """Test an unreadable graph exits 2."""
        assert main(["sssp", "--graph", str(tmp_path / "none.txt")]) == EXIT_USAGE


@pytest.mark.concurrency
class TestCommands:
    """Test short runs of each subcommand."""

    def test_bench_phased_csv_default_when_piped(self, capsys):
        """Test non-tty output defaults to CSV after a config header."""
        rc = main(["bench-phased", "--inserts", "300", "--deletes", "100", "--trials", "1", "--threads", "2"])

        lines = output_lines(capsys)
        assert rc == EXIT_OK
        assert lines[0].startswith("# ")
        assert "threads=2" in lines[0]
        row = next(csv.DictReader(io.StringIO("\n".join(lines[1:]))))
        assert row["workload"] == "phased"
        assert row["conserved"] == "True"

    def test_bench_mixed_table(self, capsys):
        """Test the table format."""
        rc = main(
            ["bench-mixed", "--threads", "2", "--seconds", "0.1", "--warmup", "0", "--trials", "1", "--format", "table"]
        )

        out = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "mixed on Pipq, 2 threads" in out

    def test_bench_designated_json(self, capsys):
        """Test designated runs switch the queue to insert-side helping."""
        rc = main(
            ["bench-designated", "--threads", "2", "--seconds", "0.1", "--warmup", "0", "--trials", "1", "--format", "json"]
        )

        payload = json.loads(capsys.readouterr().out)
        assert rc == EXIT_OK
        assert "helping_site=on_insert" in payload["config_header"]

    def test_bench_coarse_queue(self, capsys):
        """Test the comparison queue can be selected."""
        rc = main(
            ["bench-mixed", "--queue", "coarse", "--threads", "2", "--seconds", "0.1", "--warmup", "0", "--trials", "1"]
        )

        assert rc == EXIT_OK
        assert "CoarseLockedQueue" in capsys.readouterr().out

    def test_sssp_verify(self, edge_file, capsys):
        """Test SSSP on a file matches the sequential reference."""
        rc = main(["sssp", "--graph", str(edge_file), "--threads", "2", "--verify", "--format", "json"])

        payload = json.loads(capsys.readouterr().out)
        assert rc == EXIT_OK
        assert payload["verified"] is True
        assert payload["checksum"] == 0 + 3 + 1 + 8

    def test_sssp_random_graph(self, capsys):
        """Test a generated graph with the synthetic topology."""
        rc = main(["sssp", "--random", "200:1000", "--threads", "3", "--numa", "synthetic:2", "--verify", "--format", "json"])

        payload = json.loads(capsys.readouterr().out)
        assert rc == EXIT_OK
        assert payload["nodes"] == 200

    def test_lincheck(self, tmp_path, capsys):
        """Test a short campaign exits 0 when every history passes."""
        rc = main(["lincheck", "--threads", "3", "--ops", "6", "--iters", "5", "--format", "json"])

        payload = json.loads(capsys.readouterr().out)
        assert rc == EXIT_OK
        assert payload["passed"] is True
        assert payload["histories"] == 5

    def test_stress_to_file(self, tmp_path, capsys):
        """Test --out redirects results."""
        out = tmp_path / "stress.json"

        rc = main(["stress", "--threads", "2", "--ops", "2000", "--format", "json", "--out", str(out)])

        assert rc == EXIT_OK
        assert capsys.readouterr().out == ""
        assert json.loads(out.read_text())["failed_campaigns"] == 0

    def test_audit(self, capsys):
        """Test the audit command reports both checks."""
        rc = main(["audit", "--threads", "2", "--seeds", "2", "--ops", "500", "--format", "table"])

        out = capsys.readouterr().out
        assert rc == EXIT_OK
        assert "sequential_mismatches" in out
        assert "audit_violations" in out
