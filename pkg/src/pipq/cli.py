"""Command-line entry point: benchmarks, SSSP, verification campaigns and audits."""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import IO, Any, Callable, Dict, List, Optional

import structlog

from .baseline import CoarseLockedQueue
from .bench import (
    MetricsReport,
    WorkloadError,
    WorkloadKind,
    WorkloadSpec,
    render_table,
    run_designated,
    run_mixed,
    run_phased,
    write_csv,
    write_json,
)
from .campaigns import lincheck_config, run_lincheck, run_sequential_equivalence, run_stress
from .config import ConfigError, HelpingSite, PipqConfig, load_config
from .oracle import HistoryFormatError, IncompleteHistoryError
from .pipq import Pipq, RegistrationError
from .sssp import GraphFormatError, load_edge_list, random_graph, sequential_dijkstra, sssp_parallel
from .topology import detect_topology, parse_numa_mode

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2

USAGE_ERRORS = (
    ConfigError,
    WorkloadError,
    GraphFormatError,
    HistoryFormatError,
    IncompleteHistoryError,
    RegistrationError,
    ValueError,
    FileNotFoundError,
)


def configure_logging(debug: bool = False) -> None:
    """Structured JSON logs on stderr; stdout carries results only."""
    debug = debug or os.getenv("PIPQ_DEBUG", "false").lower() == "true"
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if debug else logging.INFO,
        format="%(message)s",
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


# Parser -------------------------------------------------------------------


def _shared_flags() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--threads", type=int, help="worker threads (THREADS)")
    shared.add_argument("--seed", type=int, default=0, help="workload seed")
    shared.add_argument("--hls", type=int, help="first heap segment capacity (HLS)")
    shared.add_argument("--cntr-min", type=int, help="CNTR_MIN")
    shared.add_argument("--cntr-max", type=int, help="CNTR_MAX")
    shared.add_argument("--max-offset", type=int, help="MAX_OFFSET")
    shared.add_argument("--numa", default="off", help="auto | off | synthetic:<n>")
    shared.add_argument("--config", type=Path, help="key=value config file (default $PIPQ_CONFIG)")
    shared.add_argument("--out", type=Path, help="write results here instead of stdout")
    shared.add_argument("--format", choices=["table", "csv", "json"], help="output format")
    shared.add_argument("--debug", action="store_true", help="debug logging")
    return shared


def _bench_flags(p: argparse.ArgumentParser, timed: bool = True) -> None:
    p.add_argument("--queue", choices=["pipq", "coarse"], default="pipq")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--key-max", type=int, default=1_000_000)
    if timed:
        p.add_argument("--seconds", type=float, default=5.0)
        p.add_argument("--warmup", type=float, default=1.0)
        p.add_argument("--latency-every", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    parser = argparse.ArgumentParser(prog="pipq", description="PIPQ concurrent priority queue toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("bench-mixed", parents=[shared], help="mixed insert/delete-min microbenchmark")
    _bench_flags(p)
    p.add_argument("--insert-pct", type=float, default=50.0)

    p = sub.add_parser("bench-designated", parents=[shared], help="inserter and deleter threads")
    _bench_flags(p)
    p.add_argument("--delete-fraction", type=float, default=0.5)

    p = sub.add_parser("bench-phased", parents=[shared], help="insert phase then delete phase")
    _bench_flags(p, timed=False)
    p.add_argument("--inserts", type=int, required=True)
    p.add_argument("--deletes", type=int, required=True)

    p = sub.add_parser("sssp", parents=[shared], help="parallel single-source shortest paths")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--graph", type=Path, help="edge list file")
    source.add_argument("--random", metavar="N:M", help="random graph with N nodes and M edges")
    p.add_argument("--source", type=int, default=0, help="source node id")
    p.add_argument("--undirected", action="store_true")
    p.add_argument("--weights", default="unit", help="unit | random:<seed>")
    p.add_argument("--queue", choices=["pipq", "coarse"], default="pipq")
    p.add_argument("--verify", action="store_true", help="compare with sequential Dijkstra")

    p = sub.add_parser("lincheck", parents=[shared], help="randomized linearizability histories")
    p.add_argument("--ops", type=int, default=24, help="operations per thread")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--key-max", type=int, default=16)
    p.add_argument("--dump-failure", type=Path, help="write the first counterexample here")

    p = sub.add_parser("stress", parents=[shared], help="stress campaigns with quiescent audits")
    p.add_argument("--ops", type=int, default=1_000_000, help="total operations per campaign")
    p.add_argument("--insert-pct", type=float, default=50.0)
    p.add_argument("--campaigns", type=int, default=1)
    p.add_argument("--key-max", type=int, default=1_000_000)

    p = sub.add_parser("audit", parents=[shared], help="sequential equivalence plus one audited stress run")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--ops", type=int, default=10_000)

    return parser


# Helpers ------------------------------------------------------------------


def resolve_config(args: argparse.Namespace, **extra: Any) -> PipqConfig:
    overrides = {
        "threads": args.threads,
        "hls": args.hls,
        "cntr_min": args.cntr_min,
        "cntr_max": args.cntr_max,
        "max_offset": args.max_offset,
    }
    kind, count = parse_numa_mode(args.numa)
    if kind == "synthetic":
        overrides["numa_nodes"] = count
    overrides.update(extra)
    return load_config(args.config, overrides)


def pipq_factory(cfg: PipqConfig, numa: str) -> Callable[[int], Pipq]:
    def make(nthreads: int) -> Pipq:
        topo = detect_topology(nthreads, numa)
        return Pipq(cfg.model_copy(update={"threads": nthreads, "numa_nodes": topo.numa_nodes}), topo)

    return make


def _format(args: argparse.Namespace, out: IO[str]) -> str:
    if args.format:
        return args.format
    return "table" if out.isatty() else "csv"


def _emit_report(args: argparse.Namespace, report: MetricsReport, header: str, out: IO[str]) -> None:
    fmt = _format(args, out)
    if fmt == "json":
        write_json(report, out)
        return
    out.write(f"# {header}\n")
    if fmt == "csv":
        write_csv(report, out)
    else:
        out.write(render_table(report) + "\n")


def _emit_record(args: argparse.Namespace, record: Dict[str, Any], header: str, out: IO[str]) -> None:
    fmt = _format(args, out)
    if fmt == "json":
        json.dump({"config": header, **record}, out, indent=2, default=str)
        out.write("\n")
        return
    out.write(f"# {header}\n")
    if fmt == "csv":
        writer = csv.DictWriter(out, fieldnames=list(record))
        writer.writeheader()
        writer.writerow(record)
    else:
        width = max(len(k) for k in record)
        for key, value in record.items():
            out.write(f"{key.ljust(width)}  {value}\n")


# Commands -----------------------------------------------------------------


def cmd_bench(args: argparse.Namespace, out: IO[str]) -> int:
    helping = HelpingSite.ON_INSERT if args.command == "bench-designated" else None
    cfg = resolve_config(args, **({"helping_site": helping} if helping else {}))

    if args.command == "bench-phased":
        spec = WorkloadSpec(
            kind=WorkloadKind.PHASED,
            insert_count=args.inserts,
            delete_count=args.deletes,
            trials=args.trials,
            key_max=args.key_max,
            seed=args.seed,
        )
    else:
        spec = WorkloadSpec(
            kind=WorkloadKind.MIXED if args.command == "bench-mixed" else WorkloadKind.DESIGNATED,
            insert_pct=getattr(args, "insert_pct", 50.0),
            delete_fraction=getattr(args, "delete_fraction", 0.5),
            seconds=args.seconds,
            trials=args.trials,
            warmup_seconds=args.warmup,
            key_max=args.key_max,
            seed=args.seed,
            latency_every=args.latency_every,
        )

    if args.queue == "coarse":
        factory: Callable[[int], Any] = CoarseLockedQueue
    else:
        factory = pipq_factory(cfg, args.numa)

    runner = {
        "bench-mixed": run_mixed,
        "bench-designated": run_designated,
        "bench-phased": run_phased,
    }[args.command]
    report = runner(factory, spec, cfg.threads)
    _emit_report(args, report, cfg.header(), out)

    if any(t.drain_sorted is False or t.conserved is False for t in report.trials):
        return EXIT_VERIFICATION_FAILED
    return EXIT_OK


def cmd_sssp(args: argparse.Namespace, out: IO[str]) -> int:
    cfg = resolve_config(args)
    if args.graph is not None:
        graph = load_edge_list(args.graph, undirected=args.undirected, weights=args.weights)
        try:
            source = graph.index_of(args.source)
        except KeyError:
            raise ValueError(f"source node {args.source} does not appear in {args.graph}")
    else:
        try:
            n, m = (int(x) for x in args.random.split(":"))
        except ValueError:
            raise ValueError(f"--random expects N:M, got {args.random}")
        graph = random_graph(n, m, seed=args.seed)
        source = args.source

    q = CoarseLockedQueue(cfg.threads) if args.queue == "coarse" else pipq_factory(cfg, args.numa)(cfg.threads)
    result = sssp_parallel(graph, source, cfg.threads, q)

    record: Dict[str, Any] = {
        "nodes": graph.n,
        "edges": graph.num_edges,
        "threads": cfg.threads,
        "seconds": round(result.elapsed, 4),
        "processed": result.processed,
        "stale": result.stale,
        "work_inflation": round(result.work_inflation, 4),
        "checksum": result.checksum,
    }
    status = EXIT_OK
    if args.verify:
        matches = bool((sequential_dijkstra(graph, source) == result.dist).all())
        record["verified"] = matches
        if not matches:
            logger.error("SSSP result differs from sequential Dijkstra")
            status = EXIT_VERIFICATION_FAILED
    _emit_record(args, record, cfg.header(), out)
    return status


def cmd_lincheck(args: argparse.Namespace, out: IO[str]) -> int:
    threads = args.threads or 3
    base = lincheck_config(threads)
    defaults = {
        "threads": threads,
        "hls": args.hls or base.heap_segment_capacity,
        "cntr_min": args.cntr_min or base.cntr_min,
        "cntr_max": args.cntr_max or base.cntr_max,
        "max_offset": args.max_offset or base.max_offset,
    }
    if args.numa == "off":
        defaults["numa_nodes"] = base.numa_nodes
    cfg = resolve_config(args, **defaults)
    summary = run_lincheck(
        threads=threads,
        ops_per_thread=args.ops,
        iters=args.iters,
        seed=args.seed,
        key_max=args.key_max,
        config=cfg,
    )
    if summary.first_counterexample and args.dump_failure:
        args.dump_failure.write_text("\n".join(summary.first_counterexample) + "\n")

    record = summary.model_dump(exclude={"first_counterexample"})
    record["passed"] = summary.passed
    record["counterexample_events"] = len(summary.first_counterexample)
    _emit_record(args, record, cfg.header(), out)
    return EXIT_OK if summary.passed else EXIT_VERIFICATION_FAILED


def cmd_stress(args: argparse.Namespace, out: IO[str]) -> int:
    cfg = resolve_config(args)
    reports = run_stress(
        threads=cfg.threads,
        ops=args.ops,
        insert_pct=args.insert_pct,
        seed=args.seed,
        campaigns=args.campaigns,
        config=cfg,
        key_max=args.key_max,
    )
    failed = [r for r in reports if not r.passed]
    violations: List[str] = [v for r in failed for v in r.violations]
    record = {
        "campaigns": len(reports),
        "failed_campaigns": len(failed),
        "violations": len(violations),
        "first_violation": violations[0] if violations else "",
    }
    _emit_record(args, record, cfg.header(), out)
    return EXIT_VERIFICATION_FAILED if failed else EXIT_OK


def cmd_audit(args: argparse.Namespace, out: IO[str]) -> int:
    cfg = resolve_config(args)
    mismatches = sum(
        run_sequential_equivalence(seed, ops=args.ops, config=cfg) for seed in range(args.seed, args.seed + args.seeds)
    )
    report = run_stress(threads=cfg.threads, ops=args.ops, seed=args.seed, config=cfg)[0]
    record = {
        "sequential_seeds": args.seeds,
        "sequential_mismatches": mismatches,
        "audit_violations": len(report.violations),
        "list_length": report.list_length,
        "prefix_length": report.prefix_length,
        "residual": report.residual,
    }
    _emit_record(args, record, cfg.header(), out)
    return EXIT_OK if mismatches == 0 and report.passed else EXIT_VERIFICATION_FAILED


COMMANDS: Dict[str, Callable[[argparse.Namespace, IO[str]], int]] = {
    "bench-mixed": cmd_bench,
    "bench-designated": cmd_bench,
    "bench-phased": cmd_bench,
    "sssp": cmd_sssp,
    "lincheck": cmd_lincheck,
    "stress": cmd_stress,
    "audit": cmd_audit,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    configure_logging(args.debug)
    out: IO[str] = sys.stdout
    try:
        if args.out is not None:
            with open(args.out, "w", newline="") as fh:
                return COMMANDS[args.command](args, fh)
        return COMMANDS[args.command](args, out)
    except USAGE_ERRORS as e:
        logger.error("Invalid invocation", command=args.command, error=str(e))
        print(f"pipq: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_VERIFICATION_FAILED
    except Exception as e:
        logger.error("Command failed", command=args.command, error=str(e), exc_info=True)
        return EXIT_VERIFICATION_FAILED


if __name__ == "__main__":
    sys.exit(main())
