"""Per-request timelines, latency records and summary tables.

Workers report timestamped events; a request's record is derived from its
timeline once the last token is out. All times are integer nanoseconds, so
the latency identities hold exactly and CSV output is byte-stable.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

# Kinds a request may report at most once. "token" may repeat.
ONCE = (
    "arrival",
    "decode_enqueued",
    "decode_alloc",
    "prefill_enqueued",
    "prefill_start",
    "prefill_end",
    "transfer_start",
    "transfer_end",
    "decode_start",
    "prefill_release",
    "decode_release",
    "failed",
)
TOKEN = "token"

STAGES = ("prefill_queue", "prefill_compute", "transfer", "decode_queue", "decode_compute")


class MetricsError(RuntimeError):
    """A timeline that no correct worker could have produced."""


@dataclass
class Timeline:
    request_id: int
    response_tokens: int
    events: dict[str, int] = field(default_factory=dict)
    tokens: int = 0
    first_token: int | None = None
    last_token: int | None = None
    latest: int = 0


@dataclass(frozen=True)
class LatencyRecord:
    request_id: int
    prompt_tokens: int
    response_tokens: int
    arrival_ns: int
    prefill_queue_ns: int
    prefill_compute_ns: int
    transfer_ns: int
    decode_queue_ns: int
    decode_compute_ns: int
    idle_ns: int
    ttft_ns: int
    tbt_mean_ns: Fraction | None
    total_ns: int
    prefill_hold_ns: int | None
    decode_hold_ns: int | None

    def stage_sum(self) -> int:
        return (self.prefill_queue_ns + self.prefill_compute_ns + self.transfer_ns
                + self.decode_queue_ns + self.decode_compute_ns)

    def value(self, metric: str) -> float | None:
        v = getattr(self, metric)
        return None if v is None else float(v)


class Collector:
    """Serial intake of worker events, keyed by request id."""

    def __init__(self) -> None:
        self.timelines: dict[int, Timeline] = {}
        self.prompts: dict[int, int] = {}
        self.failures: dict[int, str] = {}
        self.origin_ns = 0

    def admit(self, request_id: int, prompt_tokens: int, response_tokens: int) -> None:
        if request_id in self.timelines:
            raise MetricsError(f"request {request_id} admitted twice")
        self.timelines[request_id] = Timeline(request_id, response_tokens)
        self.prompts[request_id] = prompt_tokens

    def record_event(self, request_id: int, kind: str, t_ns: int) -> None:
        tl = self.timelines.get(request_id)
        if tl is None:
            raise MetricsError(f"event {kind} for unknown request {request_id}")
        if t_ns < tl.latest:
            raise MetricsError(
                f"request {request_id}: {kind} at {t_ns} ns precedes an earlier event at {tl.latest} ns")
        if kind == TOKEN:
            if tl.tokens >= tl.response_tokens:
                raise MetricsError(f"request {request_id} produced more than {tl.response_tokens} tokens")
            tl.tokens += 1
            if tl.first_token is None:
                tl.first_token = t_ns
            tl.last_token = t_ns
        elif kind in ONCE:
            if kind in tl.events:
                raise MetricsError(f"request {request_id}: duplicate {kind}")
            tl.events[kind] = t_ns
        else:
            raise MetricsError(f"unknown event kind {kind!r}")
        tl.latest = t_ns

    def fail(self, request_id: int, t_ns: int, reason: str) -> None:
        if request_id in self.failures:
            return
        self.failures[request_id] = reason
        self.record_event(request_id, "failed", max(t_ns, self.timelines[request_id].latest))

    def complete(self, request_id: int) -> bool:
        tl = self.timelines[request_id]
        return request_id not in self.failures and tl.tokens == tl.response_tokens

    def incomplete(self) -> list[int]:
        return sorted(r for r in self.timelines if not self.complete(r))

    def records(self) -> list[LatencyRecord]:
        return [self.record(r) for r in sorted(self.timelines) if self.complete(r)]

    def record(self, request_id: int) -> LatencyRecord:
        tl = self.timelines[request_id]
        if not self.complete(request_id):
            raise MetricsError(f"request {request_id} is incomplete")
        ev = tl.events
        missing = [k for k in ("arrival", "decode_enqueued", "decode_alloc", "prefill_enqueued",
                               "prefill_start", "prefill_end", "transfer_start", "transfer_end",
                               "decode_start") if k not in ev]
        if missing:
            raise MetricsError(f"request {request_id} is missing {missing}")
        arrival = ev["arrival"]
        total = tl.last_token - arrival
        ttft = tl.first_token - arrival
        n = tl.response_tokens
        tbt = Fraction(total - ttft, n - 1) if n >= 2 else None
        decode_queue = (ev["decode_alloc"] - ev["decode_enqueued"]) + (ev["decode_start"] - ev["transfer_end"])
        stages = (
            ev["prefill_start"] - ev["prefill_enqueued"],
            ev["prefill_end"] - ev["prefill_start"],
            ev["transfer_end"] - ev["transfer_start"],
            decode_queue,
            tl.last_token - ev["decode_start"],
        )
        prefill_hold = ev["prefill_release"] - ev["prefill_start"] if "prefill_release" in ev else None
        decode_hold = ev["decode_release"] - ev["decode_alloc"] if "decode_release" in ev else None
        return LatencyRecord(
            request_id, self.prompts[request_id], n, arrival - self.origin_ns, *stages,
            idle_ns=total - sum(stages), ttft_ns=ttft, tbt_mean_ns=tbt, total_ns=total,
            prefill_hold_ns=prefill_hold, decode_hold_ns=decode_hold)


# -- summaries -----------------------------------------------------------------


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("no values")
    if not 0 < pct <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    ordered = sorted(values)
    return ordered[max(1, math.ceil(pct / 100 * len(ordered))) - 1]


SUMMARY_METRICS = ("total_ns", "ttft_ns", "tbt_mean_ns", *(f"{s}_ns" for s in STAGES),
                   "idle_ns", "prefill_hold_ns", "decode_hold_ns")


@dataclass(frozen=True)
class SummaryRow:
    metric: str
    count: int
    mean: float
    percentiles: tuple[tuple[float, float], ...]


def summarize(records: Sequence[LatencyRecord],
              percentiles: Sequence[float] = (50, 90, 99)) -> list[SummaryRow]:
    if not records:
        raise ValueError("cannot summarize an empty record set")
    rows = []
    for metric in SUMMARY_METRICS:
        vals = [v for v in (r.value(metric) for r in records) if v is not None]
        if not vals:
            continue
        rows.append(SummaryRow(metric, len(vals), math.fsum(vals) / len(vals),
                               tuple((p, nearest_rank(vals, p)) for p in percentiles)))
    return rows


def breakdown(records: Sequence[LatencyRecord]) -> dict[str, float]:
    """Share of summed latency spent in each stage; the remainder is idle."""
    if not records:
        raise ValueError("cannot summarize an empty record set")
    total = sum(r.total_ns for r in records)
    shares = {s: sum(getattr(r, f"{s}_ns") for r in records) / total for s in STAGES}
    shares["idle"] = sum(r.idle_ns for r in records) / total
    return shares


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, Fraction):
        return f"{float(v):.3f}"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def records_csv(records: Iterable[LatencyRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    names = [f.name for f in fields(LatencyRecord)]
    w.writerow(names)
    for r in records:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return out.getvalue()


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    pcts = [p for p, _ in rows[0].percentiles] if rows else []
    w.writerow(["metric", "count", "mean", *(f"p{p:g}" for p in pcts)])
    for row in rows:
        w.writerow([row.metric, row.count, _fmt(row.mean), *(_fmt(v) for _, v in row.percentiles)])
    return out.getvalue()


def breakdown_csv(shares: dict[str, float]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["stage", "share"])
    for k, v in shares.items():
        w.writerow([k, f"{v:.6f}"])
    return out.getvalue()


def write_outputs(out_dir: str | Path, records: Sequence[LatencyRecord]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out / "requests.csv",
        "summary": out / "summary.csv",
        "breakdown": out / "breakdown.csv",
    }
    paths["records"].write_text(records_csv(records))
    if records:
        paths["summary"].write_text(summary_csv(summarize(records)))
        paths["breakdown"].write_text(breakdown_csv(breakdown(records)))
    return paths
