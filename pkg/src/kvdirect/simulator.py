"""Assemble a scheduler, workers and a workload on one loop and run it.

On the loopback transport everything runs in virtual time and a run is a
pure function of its configuration. On sockets the same objects run on an
asyncio loop over real TCP, with compute delays as wall-clock timers.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field, replace

from .cluster import ClusterScheduler, LoopbackBus, SocketBus
from .eventloop import VirtualLoop, drive, now_ns
from .metrics import Collector, LatencyRecord
from .request import Request
from .trace import EventLog
from .transport.loopback import LinkModel, LoopbackNetwork
from .transport.sockets import SocketNetwork
from .transport.verbs import Role
from .workers import DecodeWorker, PrefillWorker, Worker, WorkerConfig
from .workload import WorkloadSpec, generate_arrivals

log = logging.getLogger(__name__)

# 352 KB of KV cache per token (the 123B-parameter configuration).
KV_BYTES_PER_TOKEN = 352 * 1024


@dataclass(frozen=True)
class LinkConfig:
    bandwidth: float = 25e9
    latency: float = 5e-6
    control_latency: float = 50e-6
    bytes_per_token: int = KV_BYTES_PER_TOKEN


@dataclass(frozen=True)
class SimConfig:
    workload: WorkloadSpec
    prefill_workers: int = 1
    decode_workers: int = 1
    prefill: WorkerConfig = WorkerConfig()
    decode: WorkerConfig = WorkerConfig()
    mode: str = "pull"
    coalescing: bool = True
    transport: str = "loopback"
    link: LinkConfig = LinkConfig()
    max_time: float = 1e6
    trace: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("pull", "push"):
            raise ValueError(f"simulation mode must be pull or push, not {self.mode!r}")
        if self.transport not in ("loopback", "socket"):
            raise ValueError(f"transport must be loopback or socket, not {self.transport!r}")
        if self.prefill_workers < 1 or self.decode_workers < 1:
            raise ValueError("need at least one prefill and one decode worker")
        for a, b in (("block_tokens", "block_tokens"), ("heads", "heads"),
                     ("head_dim", "head_dim"), ("element_size", "element_size")):
            if getattr(self.prefill, a) != getattr(self.decode, b):
                raise ValueError(f"prefill and decode workers disagree on {a}")


@dataclass
class SimResult:
    config: SimConfig
    records: list[LatencyRecord]
    collector: Collector
    prefill: list[PrefillWorker]
    decode: list[DecodeWorker]
    scheduler: ClusterScheduler
    trace: EventLog | None
    finished: bool
    elapsed_ns: int
    routed: dict[int, int] = field(default_factory=dict)

    @property
    def failed(self) -> dict[int, str]:
        return dict(self.collector.failures)

    @property
    def incomplete(self) -> list[int]:
        return self.collector.incomplete()

    @property
    def mismatches(self) -> list[int]:
        return sorted(r for w in self.decode for r in w.mismatches)

    def digests(self) -> dict[int, str]:
        out: dict[int, str] = {}
        for w in self.decode:
            out.update(w.digests)
        return out

    def mean(self, metric: str) -> float:
        vals = [v for v in (r.value(metric) for r in self.records) if v is not None]
        return sum(vals) / len(vals) if vals else float("nan")


class Cluster:
    """A running control plane plus workers, before and during a workload."""

    def __init__(self, config: SimConfig, loop=None):
        self.config = config
        self.owns_loop = loop is None
        if config.transport == "loopback":
            self.loop = loop or VirtualLoop()
            token_bytes = 2 * config.decode.heads * config.decode.head_dim * config.decode.element_size
            model = LinkModel(config.link.latency, config.link.bandwidth,
                              byte_scale=config.link.bytes_per_token / token_bytes)
            self.net = LoopbackNetwork(self.loop, model)
            self.bus = LoopbackBus(self.loop, config.link.control_latency)
        else:
            self.loop = loop or asyncio.new_event_loop()
            self.net = SocketNetwork(self.loop)
            self.bus = SocketBus(self.loop)
        self.collector = Collector()
        self.trace = EventLog() if config.trace else None
        entry = Role.PREFILL if config.mode == "pull" else Role.DECODE
        self.scheduler = ClusterScheduler(self.bus, "scheduler" if config.transport == "loopback" else None,
                                          entry=entry)
        self.prefill: list[PrefillWorker] = []
        self.decode: list[DecodeWorker] = []
        self._next_id = 1

    def add_worker(self, role: Role, config: WorkerConfig | None = None, join: bool = True) -> Worker:
        cls = PrefillWorker if role == Role.PREFILL else DecodeWorker
        cfg = config or (self.config.prefill if role == Role.PREFILL else self.config.decode)
        w = cls(self._next_id, cfg, self.loop, self.net, self.bus, self.collector,
                scheduler=self.scheduler.address, mode=self.config.mode,
                coalescing=self.config.coalescing, trace=self.trace)
        self._next_id += 1
        (self.prefill if role == Role.PREFILL else self.decode).append(w)
        if join:
            w.join()
        return w

    def expected_links(self) -> bool:
        """Every live decode/prefill pair holds ready sessions, at both ends, on every common rail."""
        live_p = [p for p in self.prefill if p.running and self.scheduler.view.get(p.worker_id)]
        for d in self.decode:
            if not d.running or self.scheduler.view.get(d.worker_id) is None:
                continue
            for p in live_p:
                rails = min(len(d.record.rails), len(p.record.rails))
                if any(d.session(p.worker_id, r) is None or p.session(d.worker_id, r) is None
                       for r in range(rails)):
                    return False
        return True

    def settle(self, timeout: float = 10.0) -> bool:
        return drive(self.loop, lambda: self.membership_settled(), timeout)

    def membership_settled(self) -> bool:
        ids = {w.worker_id for w in (*self.prefill, *self.decode) if w.running}
        view_ids = {w.worker_id for w in self.scheduler.view.workers}
        return ids <= view_ids and self.expected_links()

    def start(self, timeout: float = 10.0) -> None:
        for _ in range(self.config.prefill_workers):
            self.add_worker(Role.PREFILL)
        for _ in range(self.config.decode_workers):
            self.add_worker(Role.DECODE)
        if not self.settle(timeout):
            raise RuntimeError("workers did not finish connecting")

    def submit(self, request: Request) -> None:
        self.collector.admit(request.request_id, request.prompt_tokens, request.response_tokens)
        self.collector.record_event(request.request_id, "arrival", now_ns(self.loop))
        if self.scheduler.route(request) is None:
            self.collector.fail(request.request_id, now_ns(self.loop), "no worker to route to")

    def schedule(self, requests: list[Request]) -> None:
        t0 = now_ns(self.loop)
        self.collector.origin_ns = t0
        if isinstance(self.loop, VirtualLoop):
            for r in requests:
                self.loop.call_at_ns(t0 + r.arrival_ns, self.submit, r)
        else:
            for r in requests:
                self.loop.call_later(r.arrival_ns / 1e9, self.submit, r)

    def done(self, n: int) -> bool:
        """All ``n`` requests have finished or failed and no worker holds blocks for one."""
        c = self.collector
        if len(c.timelines) != n or any(w.jobs for w in (*self.prefill, *self.decode) if w.running):
            return False
        return all(c.complete(r) or r in c.failures for r in c.timelines)

    def close(self) -> None:
        for w in (*self.prefill, *self.decode):
            w.stop("simulation over")
        self.scheduler.stop()
        if self.config.transport == "socket":
            drive(self.loop, lambda: False, 0.05)
            self.net.close()
            self.bus.close()
            drive(self.loop, lambda: False, 0.05)
            if self.owns_loop:
                self.loop.close()


def run_simulation(config: SimConfig, requests: list[Request] | None = None) -> SimResult:
    cluster = Cluster(config)
    cluster.start()
    if requests is None:
        requests = generate_arrivals(config.workload)
    cluster.schedule(requests)
    t0 = now_ns(cluster.loop)
    finished = drive(cluster.loop, lambda: cluster.done(len(requests)), config.max_time)
    elapsed = now_ns(cluster.loop) - t0
    result = SimResult(config, cluster.collector.records(), cluster.collector, cluster.prefill,
                       cluster.decode, cluster.scheduler, cluster.trace, finished, elapsed,
                       dict(cluster.scheduler.routing.routed))
    cluster.close()
    return result


def with_mode(config: SimConfig, mode: str) -> SimConfig:
    return replace(config, mode=mode)
