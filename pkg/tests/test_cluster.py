from __future__ import annotations

import asyncio

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvdirect.cluster import (
    Abort,
    ClusterError,
    ClusterScheduler,
    ClusterView,
    KvReady,
    LoopbackBus,
    PushRequest,
    Register,
    Remove,
    Route,
    SocketBus,
    Submit,
    ViewMsg,
    WorkerRecord,
    decode_message,
    encode_message,
    rail_pairings,
)
from kvdirect.eventloop import VirtualLoop, drive
from kvdirect.request import Request
from kvdirect.simulator import Cluster, SimConfig
from kvdirect.transport.verbs import Role
from kvdirect.workers import WorkerConfig
from kvdirect.workload import WorkloadSpec


def record(wid, role=Role.PREFILL, rails=1):
    return WorkerRecord(wid, role, f"ctl{wid}", tuple(f"w{wid}/r{i}" for i in range(rails)))


requests = st.builds(Request, st.integers(1, 2**63 - 1), st.integers(1, 2**32 - 1),
                     st.integers(1, 2**32 - 1), st.integers(0, 2**63 - 1))
records = st.builds(
    lambda wid, role, n: record(wid, role, n),
    st.integers(0, 2**32 - 1), st.sampled_from(list(Role)), st.integers(1, 4))
blocks = st.lists(st.integers(0, 2**32 - 1), max_size=40).map(tuple)
messages = st.one_of(
    st.builds(Register, records),
    st.builds(lambda e, ws: ViewMsg(ClusterView(e, tuple(ws))), st.integers(0, 2**63 - 1),
              st.lists(records, max_size=4)),
    st.builds(Remove, st.integers(0, 2**32 - 1)),
    st.builds(Submit, requests),
    st.builds(Route, requests, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1)),
    st.builds(KvReady, requests, st.integers(0, 2**32 - 1), st.integers(0, 255), blocks),
    st.builds(PushRequest, requests, st.integers(0, 2**32 - 1), st.integers(0, 255), blocks),
    st.builds(Abort, st.integers(1, 2**63 - 1), st.text(max_size=30)),
)


class TestCodec:
    @given(messages)
    def test_round_trip(self, msg):
        assert decode_message(encode_message(msg)) == msg

    def test_little_endian_type_byte_first(self):
        data = encode_message(Remove(0x01020304))
        assert data[0] == 3
        assert data[1:5] == bytes([4, 3, 2, 1])

    @given(messages, st.data())
    def test_truncation_rejected(self, msg, data):
        raw = encode_message(msg)
        cut = data.draw(st.integers(0, len(raw) - 1))
        with pytest.raises(ClusterError):
            decode_message(raw[:cut])

    def test_trailing_bytes_rejected(self):
        with pytest.raises(ClusterError):
            decode_message(encode_message(Remove(1)) + b"\0")

    def test_unknown_type_rejected(self):
        with pytest.raises(ClusterError):
            decode_message(b"\x63")


class TestRecords:
    def test_duplicate_addresses_rejected(self):
        with pytest.raises(ClusterError):
            WorkerRecord(1, Role.PREFILL, "a", ("a",))
        with pytest.raises(ClusterError):
            WorkerRecord(1, Role.PREFILL, "a", ("b", "b"))

    def test_needs_a_rail(self):
        with pytest.raises(ClusterError):
            WorkerRecord(1, Role.PREFILL, "a", ())


class TestRailPairings:
    def test_two_by_two_pairs_equal_indices(self):
        pairs = rail_pairings(record(1, Role.DECODE, 2), record(2, Role.PREFILL, 2))
        assert [(r, d[-1], p[-1]) for r, d, p in pairs] == [(0, "0", "0"), (1, "1", "1")]

    def test_one_by_two_gives_one_pair(self):
        assert len(rail_pairings(record(1, Role.DECODE, 1), record(2, Role.PREFILL, 2))) == 1

    @given(st.integers(1, 8), st.integers(1, 8))
    def test_never_crosses_rails(self, a, b):
        pairs = rail_pairings(record(1, Role.DECODE, a), record(2, Role.PREFILL, b))
        assert len(pairs) == min(a, b)
        for r, d, p in pairs:
            assert d.endswith(f"/r{r}") and p.endswith(f"/r{r}")


class Inbox:
    def __init__(self):
        self.got = []

    def __call__(self, src, msg):
        self.got.append((src, msg))


class TestScheduler:
    def setup_method(self):
        self.loop = VirtualLoop()
        self.bus = LoopbackBus(self.loop)
        self.sched = ClusterScheduler(self.bus, "sched")
        self.inboxes = {}

    def attach(self, wid):
        box = Inbox()
        self.bus.attach(f"ctl{wid}", box)
        self.inboxes[wid] = box
        return box

    def test_epoch_increases_per_change(self):
        self.attach(1), self.attach(2)
        assert self.sched.register_worker(record(1)) == 1
        assert self.sched.register_worker(record(2, Role.DECODE)) == 2
        assert self.sched.remove_worker(1) == 3
        self.loop.run()
        views = [m.view.epoch for _, m in self.inboxes[2].got]
        assert views == [2, 3]
        # The removed worker hears about its own removal.
        assert [m.view.epoch for _, m in self.inboxes[1].got] == [1, 2, 3]

    def test_duplicate_id_and_unknown_removal(self):
        self.sched.register_worker(record(1))
        with pytest.raises(ClusterError):
            self.sched.register_worker(record(1))
        with pytest.raises(ClusterError):
            self.sched.register_worker(WorkerRecord(2, Role.PREFILL, "ctl1", ("x",)))
        with pytest.raises(ClusterError):
            self.sched.remove_worker(9)

    def test_round_robin_routing(self):
        for wid, role in [(1, Role.PREFILL), (2, Role.PREFILL), (3, Role.DECODE)]:
            self.attach(wid)
            self.sched.register_worker(record(wid, role))
        routes = [self.sched.route(Request(i, 4, 4)) for i in range(1, 5)]
        assert [r.prefill_id for r in routes] == [1, 2, 1, 2]
        assert {r.decode_id for r in routes} == {3}
        self.loop.run()
        assert sum(isinstance(m, Route) for _, m in self.inboxes[1].got) == 2

    def test_route_without_workers_rejected(self):
        assert self.sched.route(Request(1, 4, 4)) is None
        assert self.sched.rejected == [(1, "no prefill or decode worker")]

    def test_messages_drive_membership(self):
        box = self.attach(1)
        port = self.bus.attach("ctl1-out", lambda *a: None)
        port.send("sched", Register(record(1)))
        self.loop.run()
        assert self.sched.view.epoch == 1
        assert isinstance(box.got[-1][1], ViewMsg)
        port.send("sched", Remove(1))
        self.loop.run()
        assert self.sched.view.workers == ()


def cluster(mode="pull", rails=1, p=1, d=1):
    w = WorkerConfig(rails=rails)
    c = Cluster(SimConfig(WorkloadSpec(1.0, 1), p, d, w, w, mode))
    c.start()
    return c


def sessions(worker):
    return sorted(k for k in worker.links if worker.session(*k))


class TestMembership:
    def test_first_prefill_alone(self):
        c = Cluster(SimConfig(WorkloadSpec(1.0, 1)))
        p = c.add_worker(Role.PREFILL)
        drive(c.loop, lambda: p.view.epoch == 1, 1.0)
        assert c.scheduler.view.epoch == 1 and not p.links
        c.close()

    @pytest.mark.parametrize("rails,prefills", [(1, 1), (2, 1), (2, 3)])
    def test_decode_connects_to_every_rail(self, rails, prefills):
        c = cluster(rails=rails, p=prefills)
        (d,) = c.decode
        assert sessions(d) == [(p.worker_id, r) for p in c.prefill for r in range(rails)]
        for p in c.prefill:
            assert sessions(p) == [(d.worker_id, r) for r in range(rails)]
        c.close()

    def test_prefill_added_mid_run(self):
        c = cluster(rails=2)
        (d,) = c.decode
        c.schedule([Request(i, 64, 8, i * 1_000_000) for i in range(1, 5)])
        drive(c.loop, lambda: c.done(4), 60.0)
        before = d.stats["sessions_opened"]
        new = c.add_worker(Role.PREFILL)
        assert c.settle()
        assert d.running and d.stats["sessions_opened"] == before + 2
        assert sessions(d) == [(1, 0), (1, 1), (new.worker_id, 0), (new.worker_id, 1)]
        for i in range(5, 9):
            c.submit(Request(i, 64, 8))
        assert drive(c.loop, lambda: c.done(8), 60.0)
        assert new.worker_id in {c.scheduler.routing.routed[i] for i in range(5, 9)}
        assert sum(new.releases.values()) == 2
        c.close()

    def test_remove_sole_prefill(self):
        c = cluster()
        (p,), (d,) = c.prefill, c.decode
        c.scheduler.remove_worker(p.worker_id)
        drive(c.loop, lambda: not d.links and not p.running, 5.0)
        assert sessions(d) == [] and not p.running

    def test_remove_during_transfer_fails_members(self):
        c = cluster()
        (p,), (d,) = c.prefill, c.decode
        c.schedule([Request(1, 4000, 4)])
        drive(c.loop, lambda: 1 in d.jobs, 10.0)
        c.scheduler.remove_worker(p.worker_id)
        assert drive(c.loop, lambda: c.done(1), 10.0)
        assert 1 in c.collector.failures
        assert d.pool.free_count == d.pool.total_blocks and not d.jobs

    def test_rejoin_gets_fresh_sessions(self):
        c = cluster()
        (p,), (d,) = c.prefill, c.decode
        c.scheduler.remove_worker(p.worker_id)
        drive(c.loop, lambda: not d.links, 5.0)
        epoch = c.scheduler.view.epoch
        q = c.add_worker(Role.PREFILL)
        assert c.settle()
        assert c.scheduler.view.epoch > epoch
        assert sessions(d) == [(q.worker_id, 0)]
        c.submit(Request(1, 32, 4))
        assert drive(c.loop, lambda: c.done(1), 10.0)
        assert c.collector.complete(1)

    def test_sessions_survive_scheduler_loss(self):
        c = cluster()
        (p,), (d,) = c.prefill, c.decode
        c.scheduler.stop()
        drive(c.loop, lambda: False, 1.0)
        assert sessions(d) == [(p.worker_id, 0)]

    def test_stale_view_ignored(self):
        c = cluster()
        (d,) = c.decode
        d._on_message("x", ViewMsg(ClusterView(0)))
        assert d.stats["stale_views"] == 1 and d.links


class TestSocketBus:
    def test_delivers_between_ports(self):
        loop = asyncio.new_event_loop()
        bus = SocketBus(loop)
        a, b = Inbox(), Inbox()
        pa = bus.attach(None, a)
        pb = bus.attach(None, b)
        assert pa.address != pb.address
        msgs = [Remove(i) for i in range(5)] + [Abort(7, "gone")]
        for m in msgs:
            pa.send(pb.address, m)
        pb.send(pa.address, Remove(99))
        assert drive(loop, lambda: len(b.got) == len(msgs) and a.got, 5.0)
        assert [m for _, m in b.got] == msgs
        assert a.got[0][0] == pb.address
        bus.close()
        drive(loop, lambda: False, 0.05)
        loop.close()
