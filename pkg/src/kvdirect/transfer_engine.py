"""Tensor-centric KV transfer: Connect, Transfer and Complete over emulated verbs.

A ``TransferAgent`` owns one endpoint (one rail of one worker) and the GPU
region covering that worker's KV tensor. Every queue pair it opens or accepts
becomes a ``PeerSession``. Sessions are symmetric: either side may move
blocks (reads pull from the peer, writes push to it) and either side may
wait for the peer's Complete.

Completion protocol, per session:

* The active side writes the 8-byte request id into slot 0 of the peer's
  control region, but only after every read or write of that request has
  completed, and only when the previous Complete has been acknowledged.
* The passive side polls its slot (exponential backoff, only while it
  expects completions), clears it, reports the request and SENDs back an
  8-byte ACK.

Moves of other requests keep flowing while an ACK is outstanding.
"""

from __future__ import annotations

import itertools
import logging
import struct
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence, Union

from .eventloop import drive, now_ns
from .tensor_meta import (
    BLOCK_DIM,
    KV_DIM,
    ByteSpan,
    LayoutError,
    TensorLayout,
    block_span_bytes,
    decode_layout,
    encode_layout,
)
from .trace import EventLog
from .transport.frames import MAX_PAYLOAD
from .transport.verbs import (
    ConnectError,
    Endpoint,
    MRKind,
    Opcode,
    QPState,
    QueuePair,
    TransportError,
    WorkCompletion,
)

log = logging.getLogger(__name__)

_U64 = struct.Struct("<Q")

# Control region layout (one region per connection).
CTRL_BYTES = 4096
SLOT_IN = 0
SLOT_OUT = 8
ACK_OUT = 16
ACK_IN = 64
META_OUT = 1024
META_IN = 2048
META_MAX = 1024


class SessionError(TransportError):
    pass


# -- transactions --------------------------------------------------------------


@dataclass(frozen=True)
class Read:
    """Pull ``remote_block`` of the peer into ``local_block``."""

    request_id: int
    remote_block: int
    local_block: int


@dataclass(frozen=True)
class Write:
    """Push ``local_block`` into the peer's ``remote_block``."""

    request_id: int
    local_block: int
    remote_block: int


@dataclass(frozen=True)
class Complete:
    request_id: int


Transaction = Union[Read, Write, Complete]


@dataclass(frozen=True)
class Member:
    request_id: int
    remote_block: int
    local_block: int
    kv_index: int


@dataclass(frozen=True)
class SpanRead:
    """One (block, KV) sub-tensor to move: equal-length remote and local spans."""

    remote: ByteSpan
    local: ByteSpan
    member: Member

    def __post_init__(self) -> None:
        if self.remote.length != self.local.length:
            raise ValueError("remote and local spans differ in length")


@dataclass(frozen=True)
class CoalescedRead:
    remote: ByteSpan
    local: ByteSpan
    members: tuple[Member, ...]

    @property
    def request_ids(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(m.request_id for m in self.members))


def coalesce(descriptors: Sequence[SpanRead], cap: int = MAX_PAYLOAD,
             enabled: bool = True) -> list[CoalescedRead]:
    """Merge descriptors whose remote and local spans are both contiguous.

    Descriptors are chained in local-offset order, which lets the K runs and
    V runs of consecutive blocks merge even though the queue interleaves them
    per block. A run never exceeds ``cap`` bytes. Output is ordered by the
    queue position of each run's first descriptor.
    """
    if not enabled:
        return [CoalescedRead(d.remote, d.local, (d.member,)) for d in descriptors]
    order = sorted(range(len(descriptors)), key=lambda i: (descriptors[i].local.offset, i))
    runs: list[tuple[int, list[int]]] = []
    cur: list[int] = []
    r_end = l_end = nbytes = -1
    for i in order:
        d = descriptors[i]
        if (cur and d.remote.offset == r_end and d.local.offset == l_end
                and nbytes + d.local.length <= cap):
            cur.append(i)
            nbytes += d.local.length
        else:
            if cur:
                runs.append((min(cur), cur))
            cur = [i]
            nbytes = d.local.length
        r_end = d.remote.end
        l_end = d.local.end
    if cur:
        runs.append((min(cur), cur))
    runs.sort(key=lambda r: r[0])
    out = []
    for _, idxs in runs:
        first, last = descriptors[idxs[0]], descriptors[idxs[-1]]
        length = last.local.end - first.local.offset
        out.append(CoalescedRead(
            ByteSpan(first.remote.offset, length),
            ByteSpan(first.local.offset, length),
            tuple(descriptors[i].member for i in idxs),
        ))
    return out


class SpanTable:
    """Precomputed block-to-span arithmetic for one layout."""

    def __init__(self, layout: TensorLayout):
        self.layout = layout
        self.span = block_span_bytes(layout)
        b = layout.axis(BLOCK_DIM)
        kv = layout.axis(KV_DIM)
        es = layout.element_size
        self.num_blocks = layout.shape[b]
        self.num_kv = layout.shape[kv]
        self.block_stride = layout.stride[b] * es
        self.kv_offsets = [layout.base_address + k * layout.stride[kv] * es
                           for k in range(self.num_kv)]

    def check(self, block_id: int) -> None:
        if not 0 <= block_id < self.num_blocks:
            raise LayoutError(f"block {block_id} out of range [0, {self.num_blocks})")

    def offset(self, block_id: int, kv: int) -> int:
        return self.kv_offsets[kv] + block_id * self.block_stride

    def spans(self, block_id: int) -> list[ByteSpan]:
        self.check(block_id)
        return [ByteSpan(self.offset(block_id, k), self.span) for k in range(self.num_kv)]


def compatible(a: TensorLayout, b: TensorLayout) -> str | None:
    """Reason the two layouts cannot exchange blocks, or None."""
    if a.num_kv != b.num_kv:
        return f"KV extent {a.num_kv} vs {b.num_kv}"
    sa, sb = block_span_bytes(a), block_span_bytes(b)
    if sa != sb:
        return f"block span {sa} B vs {sb} B"
    return None


# -- sessions ------------------------------------------------------------------


class SessionState(Enum):
    CONNECTING = "connecting"
    READY = "ready"
    CLOSED = "closed"


class PeerSession:
    def __init__(self, agent: "TransferAgent", qp: QueuePair, ctrl_mr: int):
        self.agent = agent
        self.qp = qp
        self.loop = agent.loop
        self.ctrl_mr = ctrl_mr
        self.ctrl = agent.endpoint.mr(ctrl_mr)
        self.state = SessionState.CONNECTING
        self.remote_layout: TensorLayout | None = None
        self.remote_gpu_mr: int | None = None
        self.remote_spans: SpanTable | None = None
        self.error: Exception | None = None
        self.stats: Counter = Counter()
        self.on_connected: Callable[[PeerSession | None, Exception | None], None] | None = None
        self._wr = itertools.count(1)
        self._works: dict[int, tuple] = {}
        self._queue: deque[Transaction] = deque()
        self._drain_scheduled = False
        self._inflight: Counter = Counter()
        self._failed: set[int] = set()
        self._pending: deque[int] = deque()
        self._notified: set[int] = set()
        self._ack_wait: int | None = None
        self._expect: set[int] = set()
        self._poll_handle = None
        self._poll_delay = agent.poll_min
        self._meta_sent = False
        qp.on_disconnect = lambda _qp: self._lost("peer disconnected")

    # -- identity --------------------------------------------------------------

    @property
    def peer(self):
        return self.qp.peer

    @property
    def ready(self) -> bool:
        return self.state == SessionState.READY

    @property
    def name(self) -> str:
        p = self.qp.peer
        peer = f"w{p.worker_id}r{p.rail_id}" if p else "?"
        return f"{self.agent.endpoint.name}->{peer}#{self.qp.qp_id}"

    # -- connection ------------------------------------------------------------

    def start(self) -> None:
        """Exchange layouts: post both receives, then SEND our own metadata."""
        if self.qp.state != QPState.READY:
            self._fail_connect(SessionError("queue pair closed before metadata exchange"))
            return
        blob = encode_layout(self.agent.layout)
        if len(blob) > META_MAX:
            raise SessionError(f"layout encoding of {len(blob)} B exceeds {META_MAX} B")
        self.qp.post_recv(self.ctrl_mr, META_IN, META_MAX, self._work(("meta_in",)))
        self.qp.post_recv(self.ctrl_mr, ACK_IN, 8, self._work(("ack_in",)))
        self.ctrl.write(META_OUT, blob)
        self.qp.post_send(self.ctrl_mr, META_OUT, len(blob), self._work(("meta_out",)),
                          imm=self.agent.gpu_mr)

    def _on_meta(self, wc: WorkCompletion) -> None:
        try:
            layout = decode_layout(self.ctrl.read(META_IN, wc.byte_count))
            reason = compatible(self.agent.layout, layout)
            if reason:
                raise SessionError(f"incompatible peer layout: {reason}")
        except (LayoutError, SessionError) as exc:
            self._fail_connect(exc if isinstance(exc, SessionError)
                               else SessionError(f"malformed metadata: {exc}"))
            return
        self.remote_layout = layout
        self.remote_gpu_mr = wc.imm
        self.remote_spans = SpanTable(layout)
        self._maybe_ready()

    def _maybe_ready(self) -> None:
        if self.state == SessionState.CONNECTING and self._meta_sent and self.remote_layout:
            self.state = SessionState.READY
            self._trace("session_ready")
            if self.on_connected is not None:
                cb, self.on_connected = self.on_connected, None
                cb(self, None)
            self.agent._session_ready(self)

    def _fail_connect(self, exc: Exception) -> None:
        self.error = exc
        was = self.state
        self.close(str(exc))
        if was == SessionState.CONNECTING and self.on_connected is not None:
            cb, self.on_connected = self.on_connected, None
            cb(None, exc)

    def close(self, reason: str = "closed locally") -> None:
        if self.state == SessionState.CLOSED:
            return
        self.qp.close(reason)
        self._lost(reason)

    def _lost(self, reason: str) -> None:
        if self.state == SessionState.CLOSED:
            return
        was_ready = self.state == SessionState.READY
        self.state = SessionState.CLOSED
        self._trace("session_closed", reason=reason)
        if self._poll_handle is not None:
            self._poll_handle.cancel()
            self._poll_handle = None
        doomed = [r for r in self._pending if r not in self._notified]
        if self._ack_wait is not None and self._ack_wait not in self._notified:
            doomed.append(self._ack_wait)
        doomed += list(self._inflight)
        doomed += [t.request_id for t in self._queue]
        self._queue.clear()
        self._pending.clear()
        self._works.clear()
        self._inflight.clear()
        expected = sorted(self._expect)
        self._expect.clear()
        self.agent._session_lost(self, was_ready, list(dict.fromkeys(doomed)), expected)
        if not was_ready and self.on_connected is not None:
            cb, self.on_connected = self.on_connected, None
            cb(None, self.error or ConnectError(f"{self.name}: {reason}"))

    # -- Transfer / Complete ---------------------------------------------------

    def _require_ready(self) -> None:
        if self.state != SessionState.READY:
            raise SessionError(f"session {self.name} is {self.state.value}")

    def transfer(self, remote_block: int, local_block: int, request_id: int) -> None:
        """Queue a read of the peer's ``remote_block`` into ``local_block``."""
        self._require_ready()
        self.remote_spans.check(remote_block)
        self.agent.spans.check(local_block)
        self._enqueue(Read(request_id, remote_block, local_block))

    def push(self, local_block: int, remote_block: int, request_id: int) -> None:
        """Queue a write of ``local_block`` into the peer's ``remote_block``."""
        self._require_ready()
        self.remote_spans.check(remote_block)
        self.agent.spans.check(local_block)
        self._enqueue(Write(request_id, local_block, remote_block))

    def complete(self, request_id: int) -> None:
        self._require_ready()
        if request_id <= 0 or request_id >= 1 << 64:
            raise ValueError("request ids are positive u64 values (0 marks an empty slot)")
        if (request_id in self._pending or request_id == self._ack_wait
                or any(isinstance(t, Complete) and t.request_id == request_id for t in self._queue)):
            raise ValueError(f"request {request_id} already has a Complete queued")
        self._enqueue(Complete(request_id))

    def expect(self, request_id: int) -> None:
        """Start watching the control slot for ``request_id``'s Complete."""
        self._require_ready()
        self._expect.add(request_id)
        if self._poll_handle is None:
            self._poll_delay = self.agent.poll_min
            self._poll_handle = self.loop.call_later(self._poll_delay, self._poll)

    def forget(self, request_id: int) -> None:
        self._expect.discard(request_id)

    @property
    def queued(self) -> int:
        return len(self._queue)

    @property
    def busy(self) -> bool:
        return bool(self._queue or self._pending or self._ack_wait is not None or self._inflight)

    def _enqueue(self, t: Transaction) -> None:
        self._queue.append(t)
        if not self._drain_scheduled and self.agent.auto_drain:
            self._drain_scheduled = True
            self.loop.call_soon(self._drain_all)

    def _drain_all(self) -> None:
        self._drain_scheduled = False
        while self._queue and self.state == SessionState.READY:
            self.drain()

    def drain(self) -> int:
        """Post every move up to the first Complete, then queue that Complete.

        Returns the number of wire operations posted for the moves.
        """
        if self.state != SessionState.READY:
            return 0
        batch: list[Read | Write] = []
        while self._queue and not isinstance(self._queue[0], Complete):
            batch.append(self._queue.popleft())
        posted = 0
        if batch:
            reads = [t for t in batch if isinstance(t, Read)]
            writes = [t for t in batch if isinstance(t, Write)]
            groups = []
            if reads:
                groups += [(g, Opcode.RDMA_READ) for g in
                           coalesce(self._descriptors(reads), enabled=self.agent.coalescing)]
            if writes:
                groups += [(g, Opcode.RDMA_WRITE) for g in
                           coalesce(self._descriptors(writes), enabled=self.agent.coalescing)]
            for g, op in groups:
                self._post_move(g, op)
            posted = len(groups)
            self.stats["drained_spans"] += sum(len(g.members) for g, _ in groups)
        if self._queue:
            c = self._queue.popleft()
            self._pending.append(c.request_id)
            self._advance()
        return posted

    def _descriptors(self, moves: Iterable[Read | Write]) -> list[SpanRead]:
        out = []
        local, remote = self.agent.spans, self.remote_spans
        span = local.span
        for t in moves:
            for k in range(local.num_kv):
                out.append(SpanRead(
                    ByteSpan(remote.offset(t.remote_block, k), span),
                    ByteSpan(local.offset(t.local_block, k), span),
                    Member(t.request_id, t.remote_block, t.local_block, k),
                ))
        return out

    def _post_move(self, g: CoalescedRead, op: Opcode) -> None:
        rids = g.request_ids
        wr = self._work(("move", rids, op))
        for r in rids:
            self._inflight[r] += 1
        gpu = self.agent.gpu_mr
        if op == Opcode.RDMA_READ:
            self.qp.post_read(self.remote_gpu_mr, g.remote.offset, gpu, g.local.offset,
                              g.local.length, wr)
            self.stats["reads"] += 1
        else:
            self.qp.post_write(gpu, g.local.offset, g.local.length, self.remote_gpu_mr,
                               g.remote.offset, wr)
            self.stats["writes"] += 1
        self.stats["move_bytes"] += g.local.length
        self._trace("read_posted" if op == Opcode.RDMA_READ else "write_posted", rids,
                    wr_id=wr, length=g.local.length, members=len(g.members))

    def _advance(self) -> None:
        """Report finished requests and send the next Complete if allowed."""
        for r in list(self._pending):
            if r not in self._notified and not self._inflight.get(r):
                self._notified.add(r)
                ok = r not in self._failed
                self._trace("moves_done", (r,), ok=ok)
                self.agent._transferred(self, r, ok)
                if self.state != SessionState.READY:
                    return
        if self._ack_wait is None and self._pending:
            head = self._pending[0]
            if not self._inflight.get(head):
                self._pending.popleft()
                self._ack_wait = head
                self.ctrl.write(SLOT_OUT, _U64.pack(head))
                wr = self._work(("complete", head))
                self.qp.post_write(self.ctrl_mr, SLOT_OUT, 8, self.qp.remote_ctrl_mr, SLOT_IN, wr)
                self.stats["completes"] += 1
                self._trace("complete_posted", (head,), wr_id=wr)

    # -- passive side ------------------------------------------------------------

    def _poll(self) -> None:
        self._poll_handle = None
        if self.state != SessionState.READY:
            return
        self.stats["polls"] += 1
        (value,) = _U64.unpack(self.ctrl.read(SLOT_IN, 8))
        if value:
            self.ctrl.write(SLOT_IN, bytes(8))
            self._poll_delay = self.agent.poll_min
            self._on_peer_complete(value)
        else:
            self._poll_delay = min(self._poll_delay * 2, self.agent.poll_max)
        if self._expect and self.state == SessionState.READY and self._poll_handle is None:
            self._poll_handle = self.loop.call_later(self._poll_delay, self._poll)

    def _on_peer_complete(self, request_id: int) -> None:
        if request_id not in self._expect:
            self.stats["unexpected_completes"] += 1
            log.warning("%s: Complete for unexpected request %d", self.name, request_id)
        self._expect.discard(request_id)
        self._trace("complete_seen", (request_id,))
        self.ctrl.write(ACK_OUT, _U64.pack(request_id))
        self.qp.post_send(self.ctrl_mr, ACK_OUT, 8, self._work(("ack_out", request_id)))
        self.stats["acks_sent"] += 1
        self.agent._peer_complete(self, request_id)

    # -- completions -------------------------------------------------------------

    def _work(self, info: tuple) -> int:
        wr = next(self._wr)
        self._works[wr] = info
        return wr

    def _on_wc(self, wc: WorkCompletion) -> None:
        info = self._works.pop(wc.wr_id, None)
        if info is None or self.state == SessionState.CLOSED:
            return
        kind = info[0]
        if kind == "move":
            for r in info[1]:
                self._inflight[r] -= 1
                if not self._inflight[r]:
                    del self._inflight[r]
                if not wc.ok:
                    self._failed.add(r)
            self._trace("read_done" if info[2] == Opcode.RDMA_READ else "write_done", info[1],
                        wr_id=wc.wr_id, ok=wc.ok, status=int(wc.status))
            self._advance()
        elif kind == "complete":
            self._trace("complete_done", (info[1],), ok=wc.ok)
            if not wc.ok:
                self.close(f"Complete write failed: {wc.status.name}")
        elif kind == "ack_in":
            if not wc.ok:
                self.close(f"ACK receive failed: {wc.status.name}")
                return
            (rid,) = _U64.unpack(self.ctrl.read(ACK_IN, 8))
            if rid != self._ack_wait:
                self.close(f"ACK for {rid} while waiting on {self._ack_wait}")
                return
            self._trace("ack_received", (rid,))
            self._ack_wait = None
            self._failed.discard(rid)
            self._notified.discard(rid)
            self.qp.post_recv(self.ctrl_mr, ACK_IN, 8, self._work(("ack_in",)))
            self.agent._acknowledged(self, rid)
            self._advance()
        elif kind == "meta_in":
            if not wc.ok:
                self._fail_connect(SessionError(f"metadata receive failed: {wc.status.name}"))
                return
            self._on_meta(wc)
        elif kind == "meta_out":
            if not wc.ok:
                self._fail_connect(SessionError(f"metadata send failed: {wc.status.name}"))
                return
            self._meta_sent = True
            self._maybe_ready()
        elif kind == "ack_out" and not wc.ok:
            self.close(f"ACK send failed: {wc.status.name}")

    def _trace(self, kind: str, rids: Iterable[int] = (), **detail) -> None:
        trace = self.agent.trace
        if trace is not None:
            trace.record(now_ns(self.loop), kind, self.name, rids, **detail)


# -- agent ---------------------------------------------------------------------


class TransferAgent:
    """Owns one endpoint's GPU region and all sessions opened over it.

    Callbacks (all optional) are plain attributes:

    * ``on_ready(session)`` when a session finishes its metadata exchange.
    * ``on_lost(session, was_ready, failed_ids, expected_ids)``.
    * ``on_transferred(session, request_id, ok)`` when a request's moves finish.
    * ``on_peer_complete(session, request_id)`` when the peer's Complete lands.
    * ``on_acknowledged(session, request_id)`` when our Complete is ACKed.
    """

    def __init__(self, endpoint: Endpoint, layout: TensorLayout, buffer=None, *,
                 coalescing: bool = True, trace: EventLog | None = None,
                 poll_min: float = 1e-6, poll_max: float = 1e-3, auto_drain: bool = True):
        self.endpoint = endpoint
        self.loop = endpoint.loop
        self.layout = layout
        self.spans = SpanTable(layout)
        self.gpu_mr = endpoint.register_mr(MRKind.GPU_PAYLOAD, layout.nbytes, buffer)
        self.coalescing = coalescing
        self.trace = trace
        self.poll_min = poll_min
        self.poll_max = poll_max
        self.auto_drain = auto_drain
        self.sessions: dict[int, PeerSession] = {}
        self.channels: dict[int, _MessageChannel] = {}
        self.on_ready: Callable | None = None
        self.on_lost: Callable | None = None
        self.on_transferred: Callable | None = None
        self.on_peer_complete: Callable | None = None
        self.on_acknowledged: Callable | None = None
        endpoint.set_completion_handler(self._on_cq)

    @property
    def buffer(self) -> memoryview:
        return self.endpoint.mr(self.gpu_mr).buf

    def listen(self, net, address: str | None) -> str:
        return net.listen(self.endpoint, address, on_accept=self._accept)

    def _accept(self, qp: QueuePair) -> int:
        ctrl = self.endpoint.register_mr(MRKind.CPU_CONTROL, CTRL_BYTES)
        session = PeerSession(self, qp, ctrl)
        self.sessions[qp.qp_id] = session
        # The queue pair turns ready right after this returns.
        self.loop.call_soon(session.start)
        return ctrl

    def connect(self, net, address: str, on_done: Callable | None = None,
                timeout: float = 0.5) -> None:
        """Open a session to ``address``; ``on_done(session, error)`` fires once."""
        ctrl = self.endpoint.register_mr(MRKind.CPU_CONTROL, CTRL_BYTES)

        def opened(qp, err):
            if err is not None:
                self.endpoint.deregister_mr(ctrl)
                if on_done is not None:
                    on_done(None, err)
                return
            session = PeerSession(self, qp, ctrl)
            session.on_connected = on_done
            self.sessions[qp.qp_id] = session
            session.start()

        net.connect(self.endpoint, address, opened, ctrl_mr=ctrl, timeout=timeout)

    def listen_messages(self, net, address: str | None) -> str:
        """Accept message-based baseline channels on ``address``."""
        max_blocks = max(1, min(MAX_PAYLOAD // (self.spans.num_kv * self.spans.span), 512))

        def accept(qp: QueuePair) -> int:
            channel = MessageResponder(self, qp, max_blocks)
            self.loop.call_soon(channel.start)
            return channel.ctrl_mr

        return net.listen(self.endpoint, address, on_accept=accept)

    def open_messages(self, net, address: str, buffer_blocks: int, on_done: Callable,
                      timeout: float = 0.5) -> None:
        def opened(qp, err):
            on_done(MessageInitiator(self, qp, buffer_blocks) if qp else None, err)

        net.connect(self.endpoint, address, opened, timeout=timeout)

    def ready_sessions(self) -> list[PeerSession]:
        return [s for s in self.sessions.values() if s.ready]

    def _on_cq(self) -> None:
        while True:
            batch = self.endpoint.poll_cq(256)
            if not batch:
                return
            for wc in batch:
                owner = self.sessions.get(wc.qp_id) or self.channels.get(wc.qp_id)
                if owner is not None:
                    owner._on_wc(wc)

    def _session_ready(self, s: PeerSession) -> None:
        if self.on_ready is not None:
            self.on_ready(s)

    def _session_lost(self, s, was_ready, failed, expected) -> None:
        self.sessions.pop(s.qp.qp_id, None)
        self.endpoint.deregister_mr(s.ctrl_mr)
        if self.on_lost is not None:
            self.on_lost(s, was_ready, failed, expected)

    def _transferred(self, s, rid, ok) -> None:
        if self.on_transferred is not None:
            self.on_transferred(s, rid, ok)

    def _peer_complete(self, s, rid) -> None:
        if self.on_peer_complete is not None:
            self.on_peer_complete(s, rid)

    def _acknowledged(self, s, rid) -> None:
        if self.on_acknowledged is not None:
            self.on_acknowledged(s, rid)


def connect(agent: TransferAgent, net, address: str, timeout: float = 0.5,
            wait: float = 5.0) -> PeerSession:
    """Blocking convenience wrapper: connect and run the loop until settled."""
    result: dict = {}
    agent.connect(net, address, lambda s, e: result.update(session=s, error=e), timeout=timeout)
    if not drive(agent.loop, lambda: bool(result), wait):
        raise SessionError(f"connect to {address} did not settle")
    if result["error"] is not None:
        raise result["error"]
    return result["session"]


# -- message-based baseline ----------------------------------------------------
#
# Per iteration of up to ``buffer_blocks`` blocks:
#   1. the decode side SENDs the block ids it wants (imm = request id),
#   2. the prefill side gathers those blocks into a staging buffer,
#   3. and SENDs the staged bytes,
#   4. the decode side scatters them into its own blocks,
#   5. and SENDs a notification so the staging buffer can be reused.


@dataclass
class BaselineReport:
    blocks: int
    buffer_blocks: int
    iterations: int
    wire_ops: int
    bytes_moved: int
    elapsed_ns: int = 0


class _MessageChannel:
    def __init__(self, agent: TransferAgent, qp: QueuePair, buffer_blocks: int):
        if buffer_blocks < 1:
            raise ValueError("buffer_blocks must be at least 1")
        spans = agent.spans
        self.agent = agent
        self.qp = qp
        self.buffer_blocks = buffer_blocks
        self.unit = spans.num_kv * spans.span
        staging = buffer_blocks * self.unit
        if staging > MAX_PAYLOAD:
            raise ValueError(f"staging buffer of {staging} B exceeds the {MAX_PAYLOAD} B frame cap")
        self.ids_len = 8 * buffer_blocks
        self.ctrl_mr = agent.endpoint.register_mr(MRKind.CPU_CONTROL, max(CTRL_BYTES, self.ids_len * 2))
        self.stage_mr = agent.endpoint.register_mr(MRKind.CPU_CONTROL, staging)
        self._wr = itertools.count(1)
        self._works: dict[int, tuple] = {}
        self.sends = 0
        qp.on_disconnect = lambda _qp: self._release()
        agent.channels[qp.qp_id] = self

    def _work(self, info: tuple) -> int:
        wr = next(self._wr)
        self._works[wr] = info
        return wr

    def _gather(self, blocks: Sequence[int]) -> int:
        spans = self.agent.spans
        src = self.agent.buffer
        stage = self.agent.endpoint.mr(self.stage_mr).buf
        pos = 0
        for b in blocks:
            for k in range(spans.num_kv):
                off = spans.offset(b, k)
                stage[pos : pos + spans.span] = src[off : off + spans.span]
                pos += spans.span
        return pos

    def _scatter(self, blocks: Sequence[int]) -> None:
        spans = self.agent.spans
        dst = self.agent.buffer
        stage = self.agent.endpoint.mr(self.stage_mr).buf
        pos = 0
        for b in blocks:
            for k in range(spans.num_kv):
                off = spans.offset(b, k)
                dst[off : off + spans.span] = stage[pos : pos + spans.span]
                pos += spans.span

    def _send(self, mr: int, offset: int, length: int, info: tuple, imm: int = 0) -> None:
        self.qp.post_send(mr, offset, length, self._work(info), imm=imm)
        self.sends += 1

    def _release(self) -> None:
        self.agent.channels.pop(self.qp.qp_id, None)
        self.agent.endpoint.deregister_mr(self.ctrl_mr)
        self.agent.endpoint.deregister_mr(self.stage_mr)

    def close(self) -> None:
        self.qp.close()
        self._release()


class MessageResponder(_MessageChannel):
    """Prefill side of the baseline: answers block-id messages with staged data."""

    def start(self) -> None:
        self._slot = 0
        for _ in range(2):
            self._post_ids_recv()

    def _post_ids_recv(self) -> None:
        # Two receive slots used alternately; receives match in post order.
        offset = self._slot * self.ids_len
        self._slot ^= 1
        self.qp.post_recv(self.ctrl_mr, offset, self.ids_len, self._work(("ids_in", offset)))

    def _on_wc(self, wc: WorkCompletion) -> None:
        info = self._works.pop(wc.wr_id, None)
        if info is None or not wc.ok:
            if info is not None:
                log.warning("baseline responder: %s failed with %s", info[0], wc.status.name)
            return
        if info[0] != "ids_in":
            return
        raw = self.agent.endpoint.mr(self.ctrl_mr).read(info[1], wc.byte_count)
        self._post_ids_recv()
        if wc.imm == 0:
            return  # notification: staging buffer free again
        blocks = [v for (v,) in struct.iter_unpack("<Q", raw)]
        length = self._gather(blocks)
        self._send(self.stage_mr, 0, length, ("data_out",))


class MessageInitiator(_MessageChannel):
    """Decode side of the baseline: requests, receives and scatters blocks."""

    def run(self, pairs: Sequence[tuple[int, int]], request_id: int,
            on_done: Callable[[BaselineReport], None]) -> None:
        if request_id <= 0:
            raise ValueError("request ids are positive")
        self._pairs = list(pairs)
        self._rid = request_id
        self._pos = 0
        self._iterations = 0
        self._bytes = 0
        self._start = now_ns(self.agent.loop)
        self._sends_at_start = self.sends
        self._on_done = on_done
        self._next()

    def _next(self) -> None:
        if self._pos >= len(self._pairs):
            # Our ids and notify SENDs, plus the responder's one data SEND per iteration.
            self._on_done(BaselineReport(
                len(self._pairs), self.buffer_blocks, self._iterations,
                self.sends - self._sends_at_start + self._iterations, self._bytes,
                now_ns(self.agent.loop) - self._start))
            return
        chunk = self._pairs[self._pos : self._pos + self.buffer_blocks]
        self._chunk = chunk
        self._iterations += 1
        self.qp.post_recv(self.stage_mr, 0, self.buffer_blocks * self.unit, self._work(("data_in",)))
        ids = b"".join(_U64.pack(remote) for remote, _ in chunk)
        self.agent.endpoint.mr(self.ctrl_mr).write(0, ids)
        self._send(self.ctrl_mr, 0, len(ids), ("ids_out",), imm=self._rid)

    def _on_wc(self, wc: WorkCompletion) -> None:
        info = self._works.pop(wc.wr_id, None)
        if info is None:
            return
        if not wc.ok:
            raise SessionError(f"baseline {info[0]} failed: {wc.status.name}")
        if info[0] == "data_in":
            self._scatter([local for _, local in self._chunk])
            self._bytes += wc.byte_count
            self._pos += len(self._chunk)
            self.agent.endpoint.mr(self.ctrl_mr).write(self.ids_len, bytes(8))
            self._send(self.ctrl_mr, self.ids_len, 8, ("notify_out",))
            self._next()


def baseline_message_transfer(agent: TransferAgent, net, address: str,
                              pairs: Sequence[tuple[int, int]], buffer_blocks: int,
                              request_id: int = 1, wait: float = 600.0) -> BaselineReport:
    """Move (remote_block, local_block) pairs with the message-based flow; blocking."""
    if buffer_blocks < 1:
        raise ValueError("buffer_blocks must be at least 1")
    result: dict = {}

    def opened(channel, err):
        if err is not None:
            result["error"] = err
            return
        result["channel"] = channel
        channel.run(pairs, request_id, lambda rep: result.update(report=rep))

    agent.open_messages(net, address, buffer_blocks, opened)
    if not drive(agent.loop, lambda: "report" in result or "error" in result, wait):
        raise SessionError("baseline transfer did not finish")
    if "error" in result:
        raise result["error"]
    result["channel"].close()
    return result["report"]
