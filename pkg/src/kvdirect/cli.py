"""Command-line entry point: ``kvdirect {bench-transfer,simulate,oracle}``.

Exit status: 0 on success, 2 for a bad configuration, 3 when a run fails
(unfinished simulation, corrupted bytes, transport error), 4 when an oracle
check finds a mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .bench import BenchReport, run_bench
from .checks import run_all
from .config import ConfigError, ExperimentConfig, load_config
from .metrics import breakdown, summarize, write_outputs
from .simulator import SimResult, run_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ORACLE = 4

log = logging.getLogger("kvdirect")


class RunFailure(RuntimeError):
    pass


def _csv(header: list[str], rows: list[list]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return out.getvalue()


def _emit(text: str, cfg: ExperimentConfig, name: str) -> None:
    sys.stdout.write(text)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


# -- bench-transfer ------------------------------------------------------------


def bench_table(reports: list[BenchReport]) -> str:
    """One row per run; ``ops_ratio`` compares wire ops to the coalesced pull run."""
    ref = next((r.wire_ops for r in reports if r.mode == "pull" and r.coalescing), None)
    header = ["mode", "coalescing", "blocks", "wire_ops", "moves", "completes", "iterations",
              "bytes_moved", "spans", "mean_run_spans", "elapsed_ns", "wall_s", "verified", "ops_ratio"]
    rows = []
    for r in reports:
        coalescing = "n/a" if r.mode == "baseline" else ("on" if r.coalescing else "off")
        ratio = f"{r.wire_ops / ref:.3f}" if ref else ""
        rows.append([r.mode, coalescing, r.blocks, r.wire_ops, r.moves, r.completes, r.iterations,
                     r.bytes_moved, r.spans, f"{r.mean_run_spans:.3f}", r.elapsed_ns,
                     f"{r.wall_s:.6f}", r.verified, ratio])
    return _csv(header, rows)


def cmd_bench_transfer(cfg: ExperimentConfig) -> int:
    reports = [run_bench(b) for b in cfg.bench_configs()]
    _emit(bench_table(reports), cfg, "bench.csv")
    bad = [r for r in reports if not r.verified]
    if bad:
        raise RunFailure(f"{len(bad)} bench run(s) delivered bytes that differ from the source")
    if len({r.bytes_moved for r in reports if r.mode != "baseline"}) > 1:
        raise RunFailure("coalescing changed the number of bytes moved")
    return EXIT_OK


# -- simulate ------------------------------------------------------------------


def summary_text(result: SimResult) -> str:
    """Structured summary: one ``key: value`` block per metric, plus run totals."""
    lines = [f"requests: {len(result.collector.timelines)}",
             f"completed: {len(result.records)}",
             f"failed: {len(result.failed)}",
             f"finished: {str(result.finished).lower()}",
             f"elapsed_s: {result.elapsed_ns / 1e9:.3f}"]
    if result.records:
        lines.append("metrics:")
        for row in summarize(result.records):
            lines.append(f"  - metric: {row.metric}")
            lines.append(f"    mean: {row.mean:.3f}")
            lines.extend(f"    p{p:g}: {v:.3f}" for p, v in row.percentiles)
        lines.append("breakdown:")
        lines.extend(f"  {k}: {v:.6f}" for k, v in breakdown(result.records).items())
    return "\n".join(lines) + "\n"


def _check_result(result: SimResult) -> None:
    if result.mismatches:
        raise RunFailure(f"KV bytes differ from the payload for requests {result.mismatches[:10]}")
    if not result.finished:
        raise RunFailure(f"simulation did not finish; {len(result.incomplete)} requests outstanding")


def sweep_table(results: list[SimResult]) -> str:
    header = ["prefill_workers", "decode_workers", "qps", "mode", "completed", "failed",
              "mean_total_s", "p90_total_s", "mean_ttft_s", "mean_tbt_ms", "decode_queue_share"]
    rows = []
    for res in results:
        c = res.config
        if res.records:
            stats = {row.metric: row for row in summarize(res.records)}
            total = stats["total_ns"]
            tbt = stats.get("tbt_mean_ns")
            rows.append([c.prefill_workers, c.decode_workers, f"{c.workload.qps:g}", c.mode,
                         len(res.records), len(res.failed), f"{total.mean / 1e9:.3f}",
                         f"{dict(total.percentiles)[90] / 1e9:.3f}",
                         f"{stats['ttft_ns'].mean / 1e9:.3f}",
                         f"{tbt.mean / 1e6:.3f}" if tbt else "",
                         f"{breakdown(res.records)['decode_queue']:.6f}"])
        else:
            rows.append([c.prefill_workers, c.decode_workers, f"{c.workload.qps:g}", c.mode,
                         0, len(res.failed), "", "", "", "", ""])
    return _csv(header, rows)


def cmd_simulate(cfg: ExperimentConfig) -> int:
    points = cfg.sim_points()
    if cfg.sweep is None:
        result = run_simulation(points[0])
        if cfg.out:
            write_outputs(cfg.out, result.records)
        _emit(summary_text(result), cfg, "summary.yaml")
        _check_result(result)
        return EXIT_OK
    results = []
    for sc in points:
        log.info("sweep point %dP%dD qps=%g mode=%s", sc.prefill_workers, sc.decode_workers,
                 sc.workload.qps, sc.mode)
        results.append(run_simulation(sc))
    _emit(sweep_table(results), cfg, "sweep.csv")
    for res in results:
        _check_result(res)
    return EXIT_OK


# -- oracle --------------------------------------------------------------------


def cmd_oracle(cfg: ExperimentConfig) -> int:
    results = run_all(cfg.seed, cfg.oracle_scale)
    _emit("".join(r.line() + "\n" for r in results), cfg, "oracle.txt")
    return EXIT_OK if all(r.ok for r in results) else EXIT_ORACLE


# -- entry point ---------------------------------------------------------------

COMMANDS = {
    "bench-transfer": cmd_bench_transfer,
    "simulate": cmd_simulate,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment file")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--mode", choices=("pull", "push", "baseline"))
    common.add_argument("--coalesce", choices=("on", "off"))
    common.add_argument("--transport", choices=("loopback", "socket"))
    common.add_argument("--out", metavar="DIR", help="directory for CSV and summary files")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="kvdirect", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("bench-transfer", parents=[common],
                   help="move a block set between one prefill/decode pair and count wire ops")
    sub.add_parser("simulate", parents=[common], help="run a workload through a simulated cluster")
    sub.add_parser("oracle", parents=[common], help="cross-check fast paths against brute-force oracles")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k) for k in ("seed", "mode", "coalesce", "transport", "out")}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailure, RuntimeError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
