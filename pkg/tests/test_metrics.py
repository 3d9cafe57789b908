from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvdirect.metrics import (
    STAGES,
    Collector,
    MetricsError,
    breakdown,
    breakdown_csv,
    nearest_rank,
    records_csv,
    summarize,
    summary_csv,
    write_outputs,
)

LIFECYCLE = ["arrival", "prefill_enqueued", "prefill_start", "prefill_end", "decode_enqueued",
             "decode_alloc", "transfer_start", "transfer_end", "prefill_release", "decode_start"]


def lifecycle(c: Collector, rid: int, times: list[int], tokens: list[int], prompt: int = 10):
    c.admit(rid, prompt, len(tokens))
    for kind, t in zip(LIFECYCLE, times):
        c.record_event(rid, kind, t)
    for t in tokens:
        c.record_event(rid, "token", t)
    c.record_event(rid, "decode_release", tokens[-1])


def simple(c: Collector, rid: int = 1, base: int = 0, n: int = 4):
    times = [base + 10 * i for i in range(len(LIFECYCLE))]
    lifecycle(c, rid, times, [times[-1] + 7 + 13 * i for i in range(n)])


class TestCollector:
    def test_full_lifecycle_record(self):
        c = Collector()
        lifecycle(c, 1, [0, 5, 20, 70, 75, 80, 80, 95, 100, 110], [150, 170, 190, 211])
        r = c.record(1)
        assert (r.prefill_queue_ns, r.prefill_compute_ns, r.transfer_ns) == (15, 50, 15)
        assert r.decode_queue_ns == (80 - 75) + (110 - 95)
        assert r.decode_compute_ns == 211 - 110
        assert r.ttft_ns == 150 and r.total_ns == 211
        assert r.tbt_mean_ns == Fraction(61, 3)
        assert r.idle_ns == 211 - r.stage_sum() == (5 - 0) + (75 - 70)
        assert r.prefill_hold_ns == 100 - 20 and r.decode_hold_ns == 211 - 80

    def test_out_of_order_event_is_an_error(self):
        c = Collector()
        c.admit(1, 4, 2)
        c.record_event(1, "arrival", 100)
        with pytest.raises(MetricsError):
            c.record_event(1, "prefill_enqueued", 99)

    def test_duplicate_and_unknown_kinds(self):
        c = Collector()
        c.admit(1, 4, 2)
        c.record_event(1, "arrival", 1)
        with pytest.raises(MetricsError):
            c.record_event(1, "arrival", 2)
        with pytest.raises(MetricsError):
            c.record_event(1, "teleport", 3)
        with pytest.raises(MetricsError):
            c.record_event(2, "arrival", 3)
        with pytest.raises(MetricsError):
            c.admit(1, 4, 2)

    def test_too_many_tokens(self):
        c = Collector()
        simple(c, n=2)
        with pytest.raises(MetricsError):
            c.record_event(1, "token", 10**6)

    def test_missing_first_token_is_incomplete(self):
        c = Collector()
        c.admit(1, 4, 3)
        for kind, t in zip(LIFECYCLE, range(0, 100, 10)):
            c.record_event(1, kind, t)
        assert c.incomplete() == [1]
        assert c.records() == []
        with pytest.raises(MetricsError):
            c.record(1)

    def test_failure_excluded(self):
        c = Collector()
        simple(c, 1)
        c.admit(2, 4, 4)
        c.record_event(2, "arrival", 5)
        c.fail(2, 3, "gone")
        c.fail(2, 9, "again")
        assert c.failures == {2: "gone"}
        assert c.timelines[2].events["failed"] == 5
        assert [r.request_id for r in c.records()] == [1]

    def test_origin_shifts_arrival_only(self):
        c = Collector()
        simple(c, 1, base=1000)
        c.origin_ns = 400
        r = c.record(1)
        assert r.arrival_ns == 600 and r.total_ns == c.timelines[1].last_token - 1000

    @given(st.lists(st.integers(0, 10**6), min_size=len(LIFECYCLE), max_size=len(LIFECYCLE)),
           st.lists(st.integers(0, 10**6), min_size=1, max_size=50))
    def test_identities(self, stage_gaps, token_gaps):
        times, t = [], 0
        for g in stage_gaps:
            t += g
            times.append(t)
        tokens = []
        for g in token_gaps:
            t += g
            tokens.append(t)
        c = Collector()
        lifecycle(c, 1, times, tokens)
        r = c.record(1)
        if r.response_tokens >= 2:
            assert r.ttft_ns + (r.response_tokens - 1) * r.tbt_mean_ns == r.total_ns
        assert r.stage_sum() + r.idle_ns == r.total_ns
        assert r.idle_ns >= 0
        for s in STAGES:
            assert 0 <= getattr(r, f"{s}_ns") <= r.total_ns


class TestSummaries:
    def test_nearest_rank_p90_of_ten(self):
        vals = [7, 3, 10, 1, 9, 2, 8, 4, 6, 5]
        assert nearest_rank(vals, 90) == 9
        assert nearest_rank(vals, 50) == 5
        assert nearest_rank(vals, 100) == 10

    def test_single_value(self):
        assert nearest_rank([42], 90) == 42

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            nearest_rank([], 50)
        with pytest.raises(ValueError):
            nearest_rank([1], 0)
        with pytest.raises(ValueError):
            summarize([])
        with pytest.raises(ValueError):
            breakdown([])

    def test_summary_rows(self):
        c = Collector()
        for rid in range(1, 11):
            simple(c, rid, base=rid * 1000, n=rid)
        rows = {row.metric: row for row in summarize(c.records())}
        assert rows["total_ns"].count == 10
        assert dict(rows["total_ns"].percentiles)[90] == sorted(r.total_ns for r in c.records())[8]
        # One-token requests carry no TBT.
        assert rows["tbt_mean_ns"].count == 9

    def test_breakdown_residual_is_idle(self):
        c = Collector()
        for rid in range(1, 6):
            simple(c, rid, base=rid * 1000, n=3)
        shares = breakdown(c.records())
        assert sum(shares[s] for s in STAGES) <= 1.0
        assert sum(shares.values()) == pytest.approx(1.0)
        total = sum(r.total_ns for r in c.records())
        assert shares["idle"] == pytest.approx(sum(r.idle_ns for r in c.records()) / total)


class TestCsv:
    def collector(self):
        c = Collector()
        for rid in range(1, 4):
            simple(c, rid, base=rid * 100, n=rid + 1)
        return c

    def test_records_csv_has_every_field(self):
        text = records_csv(self.collector().records())
        header, *rows = text.splitlines()
        assert header.startswith("request_id,prompt_tokens,response_tokens,arrival_ns,prefill_queue_ns")
        assert header.endswith("prefill_hold_ns,decode_hold_ns")
        assert len(rows) == 3

    def test_summary_header(self):
        text = summary_csv(summarize(self.collector().records()))
        assert text.splitlines()[0] == "metric,count,mean,p50,p90,p99"

    def test_breakdown_csv(self):
        text = breakdown_csv({"transfer": 0.25, "idle": 0.75})
        assert text == "stage,share\ntransfer,0.250000\nidle,0.750000\n"

    def test_write_outputs_stable(self, tmp_path):
        a = write_outputs(tmp_path / "a", self.collector().records())
        b = write_outputs(tmp_path / "b", self.collector().records())
        for k in a:
            assert a[k].read_bytes() == b[k].read_bytes()
