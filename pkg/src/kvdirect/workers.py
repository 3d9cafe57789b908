"""Prefill and decode worker state machines.

No model runs here. Compute is a delay taken from ``ComputeModel`` and the
KV blocks hold a deterministic keyed payload, so the decode side can check
every byte it received.

Pull mode (default): the prefill worker allocates, computes and announces
its block ids; the decode worker allocates, reads the blocks and sends
Complete, after which the prefill worker frees them.

Push mode: the decode worker allocates first and sends its block ids; the
prefill worker allocates, computes, writes into the decode blocks and sends
Complete. Decode memory is therefore held through prefill queueing and
compute.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import partial

import numpy as np

from .cluster import (
    Abort,
    ClusterView,
    KvReady,
    Message,
    PushRequest,
    Register,
    Remove,
    Route,
    ViewMsg,
    WorkerRecord,
    rail_pairings,
)
from .eventloop import now_ns
from .kv_allocator import BlockPool, blocks_needed
from .metrics import Collector
from .request import Request
from .tensor_meta import TensorLayout
from .trace import EventLog
from .transfer_engine import PeerSession, SessionError, TransferAgent
from .transport.loopback import LoopbackNetwork
from .transport.verbs import Endpoint, EndpointId, Role

log = logging.getLogger(__name__)

# -- synthetic payload ---------------------------------------------------------

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_U64 = np.uint64


def _finish(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> _U64(30))
    z = z * _U64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> _U64(27))
    z = z * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def payload(request_id: int, block_indices, kv_index: int, length: int) -> np.ndarray:
    """Payload bytes for logical blocks of a request; shape (len(block_indices), length).

    Block indices are positions within the request, not physical block ids,
    so both ends of a transfer agree on the content wherever it lives.
    """
    blocks = np.asarray(block_indices, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _finish(_U64((request_id * _GOLDEN) & _MASK64) ^ ((blocks << _U64(8)) | _U64(kv_index)))
        steps = np.arange(length, dtype=np.uint64) * _U64(_GOLDEN)
        z = _finish(key[:, None] + steps[None, :])
    return (z >> _U64(56)).astype(np.uint8)


def payload_byte(request_id: int, block_index: int, kv_index: int, byte_offset: int) -> int:
    return int(payload(request_id, [block_index], kv_index, byte_offset + 1)[0, byte_offset])


class KVView:
    """Vectorised access to the (block, kv) spans of one worker's KV buffer."""

    def __init__(self, layout: TensorLayout, memory: bytearray, spans):
        self.layout = layout
        self.array = np.frombuffer(memory, dtype=np.uint8)
        self.spans = spans

    def _index(self, blocks, kv: int) -> np.ndarray:
        starts = self.spans.kv_offsets[kv] + np.asarray(blocks, dtype=np.int64) * self.spans.block_stride
        return starts[:, None] + np.arange(self.spans.span, dtype=np.int64)[None, :]

    def fill(self, request_id: int, blocks) -> None:
        for kv in range(self.spans.num_kv):
            self.array[self._index(blocks, kv)] = payload(request_id, range(len(blocks)), kv, self.spans.span)

    def gather(self, blocks) -> np.ndarray:
        return np.stack([self.array[self._index(blocks, kv)] for kv in range(self.spans.num_kv)], axis=1)

    def expected(self, request_id: int, n: int) -> np.ndarray:
        return np.stack([payload(request_id, range(n), kv, self.spans.span)
                         for kv in range(self.spans.num_kv)], axis=1)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ComputeModel:
    """Prefill costs a2*L^2 + a1*L + a0 seconds for an L-token prompt.

    A decode round costs (b1 * longest context + b0) seconds, stretched by
    ``batch_factor`` for every extra request in the batch.
    """

    a2: float = 1e-9
    a1: float = 5e-5
    a0: float = 0.01
    b1: float = 2e-7
    b0: float = 0.02
    batch_factor: float = 0.02
    max_batch: int = 64

    def __post_init__(self) -> None:
        coeffs = (self.a2, self.a1, self.a0, self.b1, self.b0, self.batch_factor)
        if min(coeffs) < 0:
            raise ValueError("compute coefficients must be non-negative")
        if self.a2 + self.a1 + self.a0 <= 0 or self.b1 + self.b0 <= 0:
            raise ValueError("compute times must be positive")
        if self.max_batch < 1:
            raise ValueError("max_batch must be at least 1")

    def prefill_time(self, prompt_tokens: int) -> float:
        L = prompt_tokens
        return self.a2 * L * L + self.a1 * L + self.a0

    def round_time(self, longest_context: int, batch: int) -> float:
        return (self.b1 * longest_context + self.b0) * (1 + self.batch_factor * (batch - 1))


@dataclass(frozen=True)
class WorkerConfig:
    total_blocks: int = 4096
    block_tokens: int = 16
    rails: int = 1
    heads: int = 1
    head_dim: int = 4
    element_size: int = 1
    compute: ComputeModel = ComputeModel()
    # "reserve": admit a decode request only with room for its whole response.
    # "stall": admit on prompt blocks alone; a request pauses when growth fails.
    growth: str = "reserve"
    verify: bool = True
    poll_max: float = 5e-3
    time_scale: float = 1.0
    admission_timeout: float | None = None
    connect_retries: int = 20

    def __post_init__(self) -> None:
        if self.total_blocks < 1 or self.block_tokens < 1 or self.rails < 1:
            raise ValueError("total_blocks, block_tokens and rails must be positive")
        if self.growth not in ("reserve", "stall"):
            raise ValueError(f"growth policy must be reserve or stall, not {self.growth!r}")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")


MODES = ("pull", "push")


class Stage(Enum):
    QUEUED = "queued"
    COMPUTING = "computing"
    TRANSFERRING = "transferring"
    GENERATING = "generating"
    DONE = "done"
    FAILED = "failed"


@dataclass
class Job:
    request: Request
    peer_id: int
    rail: int = -1
    remote_blocks: tuple[int, ...] = ()
    blocks: tuple[int, ...] = ()
    stage: Stage = Stage.QUEUED
    tokens: int = 0
    growth_left: int = 0
    stalled: bool = False
    waiting_since: int = 0

    @property
    def rid(self) -> int:
        return self.request.request_id


# -- workers -------------------------------------------------------------------


class Worker:
    role: Role

    def __init__(self, worker_id: int, config: WorkerConfig, loop, net, bus, collector: Collector,
                 *, scheduler: str, mode: str = "pull", coalescing: bool = True,
                 trace: EventLog | None = None, control_address: str | None = None,
                 rail_addresses: list[str | None] | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.worker_id = worker_id
        self.config = config
        self.loop = loop
        self.net = net
        self.collector = collector
        self.scheduler = scheduler
        self.mode = mode
        self.trace = trace
        self.layout = TensorLayout.paged_kv(config.total_blocks, config.block_tokens,
                                            config.heads, config.head_dim, config.element_size)
        self.memory = bytearray(self.layout.nbytes)
        self.pool = BlockPool(config.total_blocks, config.block_tokens)
        self.agents: list[TransferAgent] = []
        for r in range(config.rails):
            ep = Endpoint(loop, EndpointId(self.role, worker_id, r),
                          name=f"{self.role.name.lower()}{worker_id}.{r}")
            agent = TransferAgent(ep, self.layout, self.memory, coalescing=coalescing, trace=trace,
                                  poll_max=config.poll_max)
            agent.on_ready = partial(self._session_ready, r)
            agent.on_lost = partial(self._session_lost, r)
            agent.on_transferred = self._transferred
            agent.on_peer_complete = self._peer_complete
            self.agents.append(agent)
        self.kv = KVView(self.layout, self.memory, self.agents[0].spans)
        if rail_addresses is None:
            rail_addresses = [None] * config.rails
        if isinstance(net, LoopbackNetwork):
            rail_addresses = [a or f"{self.role.name.lower()}{worker_id}/rail{r}"
                              for r, a in enumerate(rail_addresses)]
        rails = tuple(agent.listen(net, addr) for agent, addr in zip(self.agents, rail_addresses))
        self.port = bus.attach(control_address, self._on_message)
        self.record = WorkerRecord(worker_id, self.role, self.port.address, rails)
        self.view = ClusterView(0)
        self.links: dict[tuple[int, int], PeerSession] = {}
        self.jobs: dict[int, Job] = {}
        self.stats: Counter = Counter()
        self.running = True

    # -- plumbing --------------------------------------------------------------

    def now(self) -> int:
        return now_ns(self.loop)

    def event(self, rid: int, kind: str) -> None:
        self.collector.record_event(rid, kind, self.now())

    def later(self, seconds: float, cb, *args):
        return self.loop.call_later(seconds * self.config.time_scale, cb, *args)

    def join(self) -> None:
        self.port.send(self.scheduler, Register(self.record))

    def leave(self) -> None:
        self.port.send(self.scheduler, Remove(self.worker_id))

    def stop(self, reason: str = "worker stopped") -> None:
        """Drop off the network: close sessions and stop listening."""
        if not self.running:
            return
        self.running = False
        for agent, addr in zip(self.agents, self.record.rails):
            self.net.unlisten(addr)
            for s in list(agent.sessions.values()):
                s.close(reason)
        self.port.close()

    def session(self, peer_id: int, rail: int) -> PeerSession | None:
        s = self.links.get((peer_id, rail))
        return s if s is not None and s.ready else None

    def common_rails(self, peer_id: int) -> int:
        peer = self.view.get(peer_id)
        return 0 if peer is None else min(len(self.record.rails), len(peer.rails))

    def pick_rail(self, rid: int, peer_id: int) -> int:
        n = self.common_rails(peer_id)
        return -1 if n == 0 else rid % n

    def send_to(self, worker_id: int, msg: Message) -> bool:
        rec = self.view.get(worker_id)
        if rec is None:
            return False
        self.port.send(rec.control_address, msg)
        return True

    def _on_message(self, src: str, msg: Message) -> None:
        if not self.running:
            return
        if isinstance(msg, ViewMsg):
            if msg.view.epoch > self.view.epoch:
                old, self.view = self.view, msg.view
                self.apply_view(old, msg.view)
            else:
                self.stats["stale_views"] += 1
        elif isinstance(msg, Abort):
            job = self.jobs.get(msg.request_id)
            if job is not None:
                self.fail(job, f"peer aborted: {msg.reason}", notify=False)
        else:
            self.handle(msg)

    def apply_view(self, old: ClusterView, new: ClusterView) -> None:
        gone = {w.worker_id for w in old.workers} - {w.worker_id for w in new.workers}
        changed = {w.worker_id for w in new.workers if old.get(w.worker_id) not in (None, w)}
        for (peer, rail), s in list(self.links.items()):
            if peer in gone or peer in changed:
                s.close(f"worker {peer} left the cluster")
        if new.get(self.worker_id) is None and old.get(self.worker_id) is not None:
            self.stop("removed from the cluster")

    def handle(self, msg: Message) -> None:
        log.warning("%s ignoring %s", self.record.control_address, type(msg).__name__)

    def _session_ready(self, rail: int, s: PeerSession) -> None:
        key = (s.peer.worker_id, rail)
        old = self.links.get(key)
        if old is not None and old is not s:
            old.close("superseded")
        self.links[key] = s
        self.stats["sessions_opened"] += 1

    def _session_lost(self, rail, s, was_ready, failed, expected) -> None:
        key = (s.peer.worker_id, rail) if s.peer is not None else None
        if key is not None and self.links.get(key) is s:
            del self.links[key]
        for rid in dict.fromkeys([*failed, *expected]):
            job = self.jobs.get(rid)
            if job is not None:
                self.fail(job, f"session to worker {key[0] if key else '?'} lost")

    def fail(self, job: Job, reason: str, notify: bool = True) -> None:
        """Give up on ``job``: free its blocks, tell its peer, record the failure."""
        if self.jobs.pop(job.rid, None) is None:
            return
        job.stage = Stage.FAILED
        self.stats["failed"] += 1
        log.info("%s: request %d failed: %s", self.record.control_address, job.rid, reason)
        self.forget(job)
        self.pool.release(job.rid)
        if notify:
            self.send_to(job.peer_id, Abort(job.rid, reason))
        self.collector.fail(job.rid, self.now(), reason)
        self.after_release()

    def forget(self, job: Job) -> None:
        for agent in self.agents:
            for s in agent.sessions.values():
                s.forget(job.rid)

    def after_release(self) -> None:
        pass

    def _transferred(self, s: PeerSession, rid: int, ok: bool) -> None:
        pass

    def _peer_complete(self, s: PeerSession, rid: int) -> None:
        pass

    def busy(self) -> bool:
        return bool(self.jobs)


class PrefillWorker(Worker):
    role = Role.PREFILL

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.queue: deque[Job] = deque()
        self.computing: Job | None = None
        self.awaiting_session: list[Job] = []
        self.releases: Counter = Counter()

    def handle(self, msg: Message) -> None:
        if isinstance(msg, Route) and self.mode == "pull":
            job = Job(msg.request, msg.decode_id)
        elif isinstance(msg, PushRequest) and self.mode == "push":
            job = Job(msg.request, msg.decode_id, msg.rail, msg.blocks)
        else:
            return super().handle(msg)
        if job.rid in self.jobs:
            log.warning("duplicate request %d", job.rid)
            return
        self.jobs[job.rid] = job
        self.event(job.rid, "prefill_enqueued")
        self.queue.append(job)
        self.pump()

    def pump(self) -> None:
        """Start the head-of-line request if nothing is computing and its blocks fit."""
        while self.computing is None and self.queue:
            job = self.queue[0]
            if job.rid not in self.jobs:
                self.queue.popleft()
                continue
            n = blocks_needed(job.request.prompt_tokens, self.config.block_tokens)
            if n > self.pool.total_blocks:
                self.queue.popleft()
                self.fail(job, f"prompt needs {n} blocks, pool has {self.pool.total_blocks}")
                continue
            alloc = self.pool.allocate_all_or_nothing(job.rid, n)
            if alloc is None:
                return
            self.queue.popleft()
            job.blocks = alloc.block_ids
            job.stage = Stage.COMPUTING
            self.computing = job
            self.event(job.rid, "prefill_start")
            self.later(self.config.compute.prefill_time(job.request.prompt_tokens), self._computed, job)

    def _computed(self, job: Job) -> None:
        self.computing = None
        if job.rid in self.jobs:
            self.event(job.rid, "prefill_end")
            self.kv.fill(job.rid, job.blocks)
            job.stage = Stage.TRANSFERRING
            self._hand_off(job)
        self.pump()

    def _hand_off(self, job: Job) -> None:
        if job.rail < 0:
            job.rail = self.pick_rail(job.rid, job.peer_id)
        if job.rail < 0:
            return self.fail(job, f"decode worker {job.peer_id} is not in the cluster view")
        s = self.session(job.peer_id, job.rail)
        if s is None:
            # The decode worker has not connected this rail yet.
            job.waiting_since = self.now()
            self.awaiting_session.append(job)
            self.later(0.5, self._session_deadline, job)
            return
        if self.mode == "pull":
            s.expect(job.rid)
            self.send_to(job.peer_id, KvReady(job.request, self.worker_id, job.rail, job.blocks))
            return
        if len(job.remote_blocks) != len(job.blocks):
            return self.fail(job, "decode reserved a different number of blocks")
        self.event(job.rid, "transfer_start")
        for local, remote in zip(job.blocks, job.remote_blocks):
            s.push(local, remote, job.rid)
        s.complete(job.rid)

    def _session_deadline(self, job: Job) -> None:
        if job in self.awaiting_session:
            self.awaiting_session.remove(job)
            self.fail(job, f"no session to decode worker {job.peer_id} on rail {job.rail}")

    def _session_ready(self, rail: int, s: PeerSession) -> None:
        super()._session_ready(rail, s)
        ready = [j for j in self.awaiting_session if self.session(j.peer_id, j.rail) is not None]
        for job in ready:
            self.awaiting_session.remove(job)
            self._hand_off(job)

    def _release(self, job: Job) -> None:
        self.jobs.pop(job.rid, None)
        job.stage = Stage.DONE
        self.releases[job.rid] += 1
        self.pool.release(job.rid)
        self.event(job.rid, "prefill_release")
        self.pump()

    def _peer_complete(self, s: PeerSession, rid: int) -> None:
        job = self.jobs.get(rid)
        if job is not None and self.mode == "pull":
            self._release(job)

    def _transferred(self, s: PeerSession, rid: int, ok: bool) -> None:
        job = self.jobs.get(rid)
        if job is None or self.mode != "push":
            return
        if ok:
            self._release(job)
        else:
            self.fail(job, "write to decode worker failed")

    def after_release(self) -> None:
        self.pump()

    def fail(self, job: Job, reason: str, notify: bool = True) -> None:
        if job in self.awaiting_session:
            self.awaiting_session.remove(job)
        super().fail(job, reason, notify)


class DecodeWorker(Worker):
    role = Role.DECODE

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.waiting: deque[Job] = deque()
        self.joining: deque[Job] = deque()
        self.batch: list[Job] = []
        self.reserved = 0
        self.round_handle = None
        self.connecting: set[tuple[int, int]] = set()
        self.mismatches: list[int] = []
        self.digests: dict[int, str] = {}
        self.appended: Counter = Counter()
        self._head_timer = None

    # -- membership ------------------------------------------------------------

    def apply_view(self, old: ClusterView, new: ClusterView) -> None:
        super().apply_view(old, new)
        if self.running:
            for p in new.of_role(Role.PREFILL):
                self._connect_to(p, self.config.connect_retries)

    def _connect_to(self, p: WorkerRecord, retries: int) -> None:
        for rail, _, addr in rail_pairings(self.record, p):
            key = (p.worker_id, rail)
            if key in self.links or key in self.connecting:
                continue
            self.connecting.add(key)
            self.agents[rail].connect(self.net, addr, partial(self._connected, p, rail, retries))

    def _connected(self, p: WorkerRecord, rail: int, retries: int, s, err) -> None:
        self.connecting.discard((p.worker_id, rail))
        if err is None or not self.running:
            return
        if self.view.get(p.worker_id) == p and retries > 0:
            self.stats["connect_retries"] += 1
            self.loop.call_later(0.05, self._connect_to, p, retries - 1)
        else:
            log.warning("decode %d gave up on prefill %d rail %d: %s", self.worker_id, p.worker_id, rail, err)

    # -- admission -------------------------------------------------------------

    def handle(self, msg: Message) -> None:
        if isinstance(msg, KvReady) and self.mode == "pull":
            job = Job(msg.request, msg.prefill_id, msg.rail, msg.blocks)
        elif isinstance(msg, Route) and self.mode == "push":
            job = Job(msg.request, msg.prefill_id)
        else:
            return super().handle(msg)
        if job.rid in self.jobs:
            log.warning("duplicate request %d", job.rid)
            return
        self.jobs[job.rid] = job
        self.event(job.rid, "decode_enqueued")
        job.waiting_since = self.now()
        self.waiting.append(job)
        self.admit()

    def growth_blocks(self, r: Request) -> int:
        bt = self.config.block_tokens
        return blocks_needed(r.prompt_tokens + r.response_tokens, bt) - blocks_needed(r.prompt_tokens, bt)

    def admit(self) -> None:
        """Admit waiting requests in arrival order while their blocks fit."""
        bt = self.config.block_tokens
        while self.waiting:
            job = self.waiting[0]
            if job.rid not in self.jobs:
                self.waiting.popleft()
                continue
            need = blocks_needed(job.request.prompt_tokens, bt)
            growth = self.growth_blocks(job.request) if self.config.growth == "reserve" else 0
            if need + growth > self.pool.total_blocks:
                self.waiting.popleft()
                self.fail(job, f"request needs {need + growth} blocks, pool has {self.pool.total_blocks}")
                continue
            if self.pool.free_count - self.reserved < need + growth:
                self._arm_head_timer(job)
                return
            alloc = self.pool.allocate_all_or_nothing(job.rid, need)
            self.waiting.popleft()
            job.blocks = alloc.block_ids
            job.growth_left = growth
            self.reserved += growth
            self.event(job.rid, "decode_alloc")
            job.stage = Stage.TRANSFERRING
            self._start_transfer(job)

    def _arm_head_timer(self, job: Job) -> None:
        timeout = self.config.admission_timeout
        if timeout is None or self._head_timer is not None:
            return
        self._head_timer = self.later(timeout, self._head_expired, job)

    def _head_expired(self, job: Job) -> None:
        self._head_timer = None
        if self.waiting and self.waiting[0] is job and job.rid in self.jobs:
            self.waiting.popleft()
            self.stats["admission_timeouts"] += 1
            self.fail(job, f"no decode memory within {self.config.admission_timeout} s "
                           f"({self.pool.free_count} free, {self.reserved} reserved)")
        else:
            self.admit()

    def _start_transfer(self, job: Job) -> None:
        if job.rail < 0:
            job.rail = self.pick_rail(job.rid, job.peer_id)
        s = self.session(job.peer_id, job.rail) if job.rail >= 0 else None
        if s is None:
            return self.fail(job, f"no session to prefill worker {job.peer_id}")
        if self.mode == "pull":
            if len(job.remote_blocks) != len(job.blocks):
                return self.fail(job, "prefill announced a different number of blocks")
            self.event(job.rid, "transfer_start")
            for remote, local in zip(job.remote_blocks, job.blocks):
                s.transfer(remote, local, job.rid)
            s.complete(job.rid)
        else:
            s.expect(job.rid)
            self.send_to(job.peer_id, PushRequest(job.request, self.worker_id, job.rail, job.blocks))

    def _transferred(self, s: PeerSession, rid: int, ok: bool) -> None:
        job = self.jobs.get(rid)
        if job is None or self.mode != "pull":
            return
        if ok:
            self._arrived(job)
        else:
            self.fail(job, "read from prefill worker failed")

    def _peer_complete(self, s: PeerSession, rid: int) -> None:
        job = self.jobs.get(rid)
        if job is not None and self.mode == "push":
            self._arrived(job)

    def _arrived(self, job: Job) -> None:
        self.event(job.rid, "transfer_end")
        if self.config.verify:
            got = self.kv.gather(job.blocks)
            digest = hashlib.sha256(got.tobytes()).hexdigest()
            self.digests[job.rid] = digest
            if not np.array_equal(got, self.kv.expected(job.rid, len(job.blocks))):
                self.mismatches.append(job.rid)
        job.stage = Stage.GENERATING
        self.joining.append(job)
        self._kick()

    # -- generation ------------------------------------------------------------

    def _kick(self) -> None:
        if self.round_handle is None:
            self._start_round()

    def _start_round(self) -> None:
        cm = self.config.compute
        while self.joining and len(self.batch) < cm.max_batch:
            job = self.joining.popleft()
            if job.rid in self.jobs:
                self.event(job.rid, "decode_start")
                self.batch.append(job)
        runnable = [j for j in self.batch if not j.stalled]
        if not runnable:
            self.round_handle = None
            return
        longest = max(j.request.prompt_tokens + j.tokens for j in runnable)
        self.round_handle = self.later(cm.round_time(longest, len(runnable)), self._end_round)

    def _end_round(self) -> None:
        bt = self.config.block_tokens
        freed = False
        for job in list(self.batch):
            if job.rid not in self.jobs:
                self.batch.remove(job)
                continue
            if job.stalled:
                continue
            position = job.request.prompt_tokens + job.tokens
            if position % bt == 0:
                block = self.pool.allocate_append(job.rid)
                if block is None:
                    job.stalled = True
                    self.stats["stalls"] += 1
                    continue
                self.appended[job.rid] += 1
                if job.growth_left > 0:
                    job.growth_left -= 1
                    self.reserved -= 1
            self.event(job.rid, "token")
            job.tokens += 1
            if job.tokens == job.request.response_tokens:
                self.batch.remove(job)
                self._finish(job)
                freed = True
        if freed:
            for job in self.batch:
                job.stalled = False
            self.admit()
        self.round_handle = None
        self._start_round()

    def _finish(self, job: Job) -> None:
        self.jobs.pop(job.rid, None)
        job.stage = Stage.DONE
        self.reserved -= job.growth_left
        job.growth_left = 0
        self.pool.release(job.rid)
        self.event(job.rid, "decode_release")

    def fail(self, job: Job, reason: str, notify: bool = True) -> None:
        if job in self.batch:
            self.batch.remove(job)
        self.reserved -= job.growth_left
        job.growth_left = 0
        super().fail(job, reason, notify)

    def after_release(self) -> None:
        for job in self.batch:
            job.stalled = False
        self.admit()
        self._kick()


def make_worker(role: Role, *args, **kwargs) -> Worker:
    return (PrefillWorker if role == Role.PREFILL else DecodeWorker)(*args, **kwargs)
