"""Emulated RDMA verbs: memory regions, queue pairs and completion queues.

A queue pair rides on a reliable ordered link (an in-process pipe or a TCP
stream). READ and WRITE frames are serviced here, inside the transport, so
the responding application is never called for them. SEND/RECV is two-sided
with credit flow control: every posted receive advertises its capacity to
the peer with a RECV_READY frame, and a SEND only leaves once a credit is
available (receiver-not-ready sends time out).
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Protocol

from .frames import MAX_PAYLOAD, Frame, FrameType, hello

log = logging.getLogger(__name__)

NO_MR = 0xFFFFFFFF


class Role(IntEnum):
    PREFILL = 0
    DECODE = 1


class MRKind(IntEnum):
    GPU_PAYLOAD = 0
    CPU_CONTROL = 1


class Opcode(IntEnum):
    SEND = 0
    RDMA_WRITE = 1
    RDMA_READ = 2
    RECV = 128


class WcStatus(IntEnum):
    # Numbering follows ibv_wc_status.
    SUCCESS = 0
    LOC_LEN_ERR = 1
    LOC_PROT_ERR = 4
    WR_FLUSH_ERR = 5
    REM_INV_REQ_ERR = 9
    REM_ACCESS_ERR = 10
    RNR_RETRY_EXC_ERR = 13


class QPState(Enum):
    CONNECTING = "connecting"
    READY = "ready"
    CLOSED = "closed"


class TransportError(RuntimeError):
    pass


class ConnectError(TransportError):
    pass


class ConnectTimeout(ConnectError):
    pass


class RailMismatch(ConnectError):
    pass


class ResourceExhausted(TransportError):
    pass


@dataclass(frozen=True)
class EndpointId:
    role: int
    worker_id: int
    rail_id: int


@dataclass(frozen=True)
class WorkCompletion:
    wr_id: int
    opcode: Opcode
    status: WcStatus
    byte_count: int
    qp_id: int
    imm: int = 0

    @property
    def ok(self) -> bool:
        return self.status == WcStatus.SUCCESS


class Link(Protocol):
    def send(self, frame: Frame) -> None: ...

    def close(self) -> None: ...


class MemoryRegion:
    def __init__(self, mr_id: int, kind: MRKind, length: int, buffer=None):
        self.mr_id = mr_id
        self.kind = kind
        self.length = length
        if buffer is None:
            buffer = bytearray(length)
        elif len(buffer) < length:
            raise ValueError("backing buffer smaller than region")
        self.buf = memoryview(buffer)[:length]

    def in_bounds(self, offset: int, length: int) -> bool:
        return 0 <= offset and length >= 0 and offset + length <= self.length

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self.buf[offset : offset + length])

    def write(self, offset: int, data: bytes) -> None:
        self.buf[offset : offset + len(data)] = data


class _Work:
    __slots__ = ("opcode", "wr_id", "mr_id", "offset", "length",
                 "remote_mr", "remote_offset", "imm", "status", "byte_count")

    def __init__(self, opcode, wr_id, mr_id, offset, length, remote_mr=0, remote_offset=0, imm=0):
        self.opcode = opcode
        self.wr_id = wr_id
        self.mr_id = mr_id
        self.offset = offset
        self.length = length
        self.remote_mr = remote_mr
        self.remote_offset = remote_offset
        self.imm = imm
        self.status: WcStatus | None = None
        self.byte_count = 0

    def finish(self, status: WcStatus, byte_count: int = 0) -> None:
        self.status = status
        self.byte_count = byte_count if status == WcStatus.SUCCESS else 0


class Endpoint:
    """One emulated NIC: owns regions, queue pairs and a completion queue."""

    def __init__(self, loop, identity: EndpointId, name: str = "", max_mrs: int = 65536,
                 rnr_timeout: float = 1.0):
        self.loop = loop
        self.identity = identity
        self.name = name or f"ep{identity.worker_id}.{identity.rail_id}"
        self.mrs: dict[int, MemoryRegion] = {}
        self.qps: dict[int, QueuePair] = {}
        self.max_mrs = max_mrs
        self.rnr_timeout = rnr_timeout
        self.stats: Counter = Counter()
        self._next_mr = 1
        self._next_qp = 1
        self._cq: deque[WorkCompletion] = deque()
        self._on_completion: Callable[[], None] | None = None
        self._notify_pending = False

    def register_mr(self, kind: MRKind, length: int, buffer=None) -> int:
        if length <= 0:
            raise ValueError("memory region length must be positive")
        if len(self.mrs) >= self.max_mrs:
            raise ResourceExhausted(f"{self.name}: region table full ({self.max_mrs})")
        mr_id = self._next_mr
        self._next_mr += 1
        self.mrs[mr_id] = MemoryRegion(mr_id, MRKind(kind), length, buffer)
        return mr_id

    def deregister_mr(self, mr_id: int) -> None:
        self.mrs.pop(mr_id, None)

    def mr(self, mr_id: int) -> MemoryRegion:
        return self.mrs[mr_id]

    def poll_cq(self, max_entries: int = 16) -> list[WorkCompletion]:
        out = []
        while self._cq and len(out) < max_entries:
            out.append(self._cq.popleft())
        return out

    def set_completion_handler(self, callback: Callable[[], None] | None) -> None:
        """Completion channel: ``callback`` runs (soon) whenever the CQ gains entries."""
        self._on_completion = callback
        if callback is not None and self._cq:
            self._schedule_notify()

    def _complete(self, wc: WorkCompletion) -> None:
        self._cq.append(wc)
        self.stats["completions"] += 1
        if self._on_completion is not None:
            self._schedule_notify()

    def _schedule_notify(self) -> None:
        if not self._notify_pending:
            self._notify_pending = True
            self.loop.call_soon(self._notify)

    def _notify(self) -> None:
        self._notify_pending = False
        if self._on_completion is not None and self._cq:
            self.stats["app_upcalls"] += 1
            self._on_completion()

    def _new_qp_id(self) -> int:
        qp_id = self._next_qp
        self._next_qp += 1
        return qp_id


class QueuePair:
    """Reliable-connected queue pair over one ordered link."""

    def __init__(self, endpoint: Endpoint, link: Link, initiator: bool, ctrl_mr: int = NO_MR,
                 on_ready: Callable | None = None, on_accept: Callable | None = None):
        self.endpoint = endpoint
        self.loop = endpoint.loop
        self.qp_id = endpoint._new_qp_id()
        self.link = link
        self.initiator = initiator
        self.state = QPState.CONNECTING
        self.peer: EndpointId | None = None
        self.local_ctrl_mr = ctrl_mr
        self.remote_ctrl_mr = NO_MR
        self.on_disconnect: Callable[[QueuePair], None] | None = None
        self.stats: Counter = Counter()
        self._on_ready = on_ready
        self._on_accept = on_accept
        self._order: deque[_Work] = deque()
        self._sq: deque[_Work] = deque()
        self._outstanding: dict[int, _Work] = {}
        self._rq: deque[_Work] = deque()
        self._credits: deque[int] = deque()
        self._rnr_timer = None
        self._close_reason: str | None = None
        endpoint.qps[self.qp_id] = self

    # -- connection management -------------------------------------------------

    def start(self) -> None:
        """Initiator side: announce ourselves once the link is up."""
        if self.initiator:
            ident = self.endpoint.identity
            self._transmit(hello(FrameType.HELLO, ident.role, ident.worker_id,
                                 ident.rail_id, self.local_ctrl_mr))

    def close(self, reason: str = "closed locally") -> None:
        if self.state == QPState.CLOSED:
            return
        self._teardown(reason)
        try:
            self.link.close()
        except Exception:  # pragma: no cover - best effort
            log.debug("link close failed", exc_info=True)

    def link_lost(self, reason: str = "peer disconnected") -> None:
        if self.state == QPState.CLOSED:
            return
        was_ready = self.state == QPState.READY
        self._teardown(reason)
        if not was_ready and self._on_ready is not None:
            cb, self._on_ready = self._on_ready, None
            cb(None, ConnectError(f"{self.endpoint.name}: {reason} during handshake"))
        if was_ready and self.on_disconnect is not None:
            self.on_disconnect(self)

    def _teardown(self, reason: str) -> None:
        self.state = QPState.CLOSED
        self._close_reason = reason
        if self._rnr_timer is not None:
            self._rnr_timer.cancel()
            self._rnr_timer = None
        for w in self._order:
            if w.status is None:
                w.finish(WcStatus.WR_FLUSH_ERR)
        self._sq.clear()
        self._outstanding.clear()
        self._flush()
        while self._rq:
            w = self._rq.popleft()
            self._emit(w, WcStatus.WR_FLUSH_ERR)
        self.endpoint.qps.pop(self.qp_id, None)

    @property
    def ready(self) -> bool:
        return self.state == QPState.READY

    # -- posting ---------------------------------------------------------------

    def post_read(self, remote_mr: int, remote_offset: int, local_mr: int, local_offset: int,
                  length: int, wr_id: int) -> None:
        self._check_post(length, wr_id)
        w = _Work(Opcode.RDMA_READ, wr_id, local_mr, local_offset, length, remote_mr, remote_offset)
        self._enqueue(w)

    def post_write(self, local_mr: int, local_offset: int, length: int, remote_mr: int,
                   remote_offset: int, wr_id: int) -> None:
        self._check_post(length, wr_id)
        w = _Work(Opcode.RDMA_WRITE, wr_id, local_mr, local_offset, length, remote_mr, remote_offset)
        self._enqueue(w)

    def post_send(self, local_mr: int, local_offset: int, length: int, wr_id: int, imm: int = 0) -> None:
        self._check_post(length, wr_id)
        w = _Work(Opcode.SEND, wr_id, local_mr, local_offset, length, imm=imm)
        self._enqueue(w)

    def post_recv(self, local_mr: int, local_offset: int, length: int, wr_id: int) -> None:
        self._check_post(length, wr_id)
        w = _Work(Opcode.RECV, wr_id, local_mr, local_offset, length)
        if self.state != QPState.READY:
            self._emit(w, WcStatus.WR_FLUSH_ERR)
            return
        if not self._local_ok(w):
            self._emit(w, WcStatus.LOC_PROT_ERR)
            return
        self._rq.append(w)
        self.stats["recv_posted"] += 1
        self._transmit(Frame(FrameType.RECV_READY, wr_id=wr_id, length=length))

    def _check_post(self, length: int, wr_id: int) -> None:
        if length <= 0:
            raise ValueError("verbs need a positive length")
        if length > MAX_PAYLOAD:
            raise ValueError(f"verb length {length} exceeds the {MAX_PAYLOAD} B frame cap")
        if self.state == QPState.CONNECTING:
            raise TransportError("queue pair is not connected yet")
        if wr_id in self._outstanding or any(w.wr_id == wr_id for w in self._sq) or any(
            w.wr_id == wr_id for w in self._rq
        ):
            raise ValueError(f"wr_id {wr_id} already outstanding on qp {self.qp_id}")

    def _local_ok(self, w: _Work) -> bool:
        mr = self.endpoint.mrs.get(w.mr_id)
        return mr is not None and mr.in_bounds(w.offset, w.length)

    def _enqueue(self, w: _Work) -> None:
        self._order.append(w)
        self.stats[w.opcode.name] += 1
        if self.state != QPState.READY:
            w.finish(WcStatus.WR_FLUSH_ERR)
        elif not self._local_ok(w):
            w.finish(WcStatus.LOC_PROT_ERR)
        else:
            self._sq.append(w)
            self._pump()
        self._flush()

    def _pump(self) -> None:
        while self._sq and self.state == QPState.READY:
            w = self._sq[0]
            mr = self.endpoint.mrs.get(w.mr_id)
            if mr is None:
                w.finish(WcStatus.LOC_PROT_ERR)
            elif w.opcode == Opcode.SEND:
                if not self._credits:
                    if self._rnr_timer is None:
                        self._rnr_timer = self.loop.call_later(
                            self.endpoint.rnr_timeout, self._rnr_expired, w)
                    return
                if self._rnr_timer is not None:
                    self._rnr_timer.cancel()
                    self._rnr_timer = None
                capacity = self._credits.popleft()
                self._transmit(Frame(FrameType.SEND, w.wr_id, w.imm & 0xFFFFFFFF, 0, w.length,
                                     mr.read(w.offset, w.length)))
                # The receiver reports its own LOC_LEN_ERR for an undersized buffer.
                if w.length <= capacity:
                    w.finish(WcStatus.SUCCESS, w.length)
                else:
                    w.finish(WcStatus.REM_INV_REQ_ERR)
            elif w.opcode == Opcode.RDMA_READ:
                self._outstanding[w.wr_id] = w
                self._transmit(Frame(FrameType.READ_REQ, w.wr_id, w.remote_mr,
                                     w.remote_offset, w.length))
            else:
                self._outstanding[w.wr_id] = w
                self._transmit(Frame(FrameType.WRITE, w.wr_id, w.remote_mr, w.remote_offset,
                                     w.length, mr.read(w.offset, w.length)))
            self._sq.popleft()

    def _rnr_expired(self, w: _Work) -> None:
        self._rnr_timer = None
        if self._sq and self._sq[0] is w and w.status is None:
            self._sq.popleft()
            w.finish(WcStatus.RNR_RETRY_EXC_ERR)
            self._flush()
            self._pump()
            self._flush()

    # -- completions -----------------------------------------------------------

    def _flush(self) -> None:
        while self._order and self._order[0].status is not None:
            w = self._order.popleft()
            self.endpoint._complete(
                WorkCompletion(w.wr_id, w.opcode, w.status, w.byte_count, self.qp_id, w.imm))

    def _emit(self, w: _Work, status: WcStatus, byte_count: int = 0, imm: int = 0) -> None:
        self.endpoint._complete(WorkCompletion(
            w.wr_id, w.opcode, status, byte_count if status == WcStatus.SUCCESS else 0,
            self.qp_id, imm))

    # -- wire ------------------------------------------------------------------

    def _transmit(self, frame: Frame) -> None:
        self.stats["frames_out"] += 1
        self.stats["bytes_out"] += frame.length if frame.payload else 0
        self.link.send(frame)

    def on_frame(self, frame: Frame) -> None:
        if self.state == QPState.CLOSED:
            return
        self.stats["frames_in"] += 1
        handler = _HANDLERS.get(frame.type)
        if handler is None:  # pragma: no cover - FrameType is exhaustive
            return
        handler(self, frame)

    def _on_hello(self, frame: Frame) -> None:
        if self.initiator or self.state != QPState.CONNECTING:
            self.close("unexpected HELLO")
            return
        self.peer = EndpointId(frame.length, frame.wr_id, frame.offset)
        self.remote_ctrl_mr = frame.mr_id
        ident = self.endpoint.identity
        if self.peer.rail_id != ident.rail_id:
            self._transmit(hello(FrameType.HELLO_ACK, ident.role, ident.worker_id,
                                 ident.rail_id, NO_MR))
            self.close(f"rail mismatch: peer rail {self.peer.rail_id} vs {ident.rail_id}")
            return
        if self._on_accept is not None:
            try:
                ctrl = self._on_accept(self)
            except Exception as exc:
                log.info("%s refused connection: %s", self.endpoint.name, exc)
                self.close(f"refused: {exc}")
                return
            if ctrl is not None:
                self.local_ctrl_mr = ctrl
        self.state = QPState.READY
        self._transmit(hello(FrameType.HELLO_ACK, ident.role, ident.worker_id,
                             ident.rail_id, self.local_ctrl_mr))

    def _on_hello_ack(self, frame: Frame) -> None:
        if not self.initiator or self.state != QPState.CONNECTING:
            return
        self.peer = EndpointId(frame.length, frame.wr_id, frame.offset)
        self.remote_ctrl_mr = frame.mr_id
        cb, self._on_ready = self._on_ready, None
        if self.peer.rail_id != self.endpoint.identity.rail_id:
            self.close("rail mismatch")
            if cb is not None:
                cb(None, RailMismatch(
                    f"rail {self.endpoint.identity.rail_id} cannot pair with rail {self.peer.rail_id}"))
            return
        self.state = QPState.READY
        if cb is not None:
            cb(self, None)

    def _on_read_req(self, frame: Frame) -> None:
        # Serviced entirely inside the transport: no application involvement.
        ep = self.endpoint
        mr = ep.mrs.get(frame.mr_id)
        ep.stats["served_reads"] += 1
        if mr is None or not mr.in_bounds(frame.offset, frame.length):
            self._transmit(Frame(FrameType.READ_RESP, frame.wr_id, WcStatus.REM_ACCESS_ERR,
                                 frame.offset, 0))
            return
        self._transmit(Frame(FrameType.READ_RESP, frame.wr_id, WcStatus.SUCCESS, frame.offset,
                             frame.length, mr.read(frame.offset, frame.length)))

    def _on_write(self, frame: Frame) -> None:
        ep = self.endpoint
        mr = ep.mrs.get(frame.mr_id)
        ep.stats["served_writes"] += 1
        if mr is None or not mr.in_bounds(frame.offset, frame.length):
            status = WcStatus.REM_ACCESS_ERR
        else:
            mr.write(frame.offset, frame.payload)
            status = WcStatus.SUCCESS
        self._transmit(Frame(FrameType.WRITE_ACK, frame.wr_id, status, frame.offset, frame.length))

    def _on_response(self, frame: Frame) -> None:
        w = self._outstanding.pop(frame.wr_id, None)
        if w is None:
            log.warning("%s: response for unknown wr_id %d", self.endpoint.name, frame.wr_id)
            return
        status = WcStatus(frame.mr_id)
        if status == WcStatus.SUCCESS and w.opcode == Opcode.RDMA_READ:
            mr = self.endpoint.mrs.get(w.mr_id)
            if mr is None or len(frame.payload) != w.length:
                status = WcStatus.LOC_PROT_ERR
            else:
                mr.write(w.offset, frame.payload)
        w.finish(status, w.length)
        self._flush()

    def _on_send(self, frame: Frame) -> None:
        if not self._rq:
            self.stats["unexpected_send"] += 1
            log.warning("%s: SEND without a posted receive", self.endpoint.name)
            return
        w = self._rq.popleft()
        mr = self.endpoint.mrs.get(w.mr_id)
        if frame.length > w.length or mr is None:
            self._emit(w, WcStatus.LOC_LEN_ERR)
            return
        mr.write(w.offset, frame.payload)
        self._emit(w, WcStatus.SUCCESS, frame.length, frame.mr_id)

    def _on_recv_ready(self, frame: Frame) -> None:
        self._credits.append(frame.length)
        self._pump()
        self._flush()


_HANDLERS = {
    FrameType.HELLO: QueuePair._on_hello,
    FrameType.HELLO_ACK: QueuePair._on_hello_ack,
    FrameType.READ_REQ: QueuePair._on_read_req,
    FrameType.READ_RESP: QueuePair._on_response,
    FrameType.WRITE: QueuePair._on_write,
    FrameType.WRITE_ACK: QueuePair._on_response,
    FrameType.SEND: QueuePair._on_send,
    FrameType.RECV_READY: QueuePair._on_recv_ready,
}
