"""Cluster membership, request routing and the control-message plane.

The scheduler keeps the full membership view and broadcasts it, whole and
tagged with an epoch, on every change. Workers apply a view only if its
epoch is newer than the one they hold, so duplicated or reordered
broadcasts are harmless. Data-plane sessions never pass through the
scheduler: once a decode worker has connected to a prefill worker, losing
the scheduler only freezes membership.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Union

from .request import Request
from .transport.sockets import split_address
from .transport.verbs import Role

log = logging.getLogger(__name__)


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class WorkerRecord:
    worker_id: int
    role: Role
    control_address: str
    rails: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.worker_id < 0:
            raise ClusterError("worker ids are non-negative")
        if not self.rails:
            raise ClusterError(f"worker {self.worker_id} has no rails")
        addresses = (self.control_address,) + tuple(self.rails)
        if len(set(addresses)) != len(addresses) or not all(addresses):
            raise ClusterError(f"worker {self.worker_id} repeats or omits an address")


@dataclass(frozen=True)
class ClusterView:
    epoch: int
    workers: tuple[WorkerRecord, ...] = ()

    def of_role(self, role: Role) -> list[WorkerRecord]:
        return [w for w in self.workers if w.role == role]

    def get(self, worker_id: int) -> WorkerRecord | None:
        for w in self.workers:
            if w.worker_id == worker_id:
                return w
        return None


def rail_pairings(decode: WorkerRecord, prefill: WorkerRecord) -> list[tuple[int, str, str]]:
    """Rail i of the decode worker pairs only with rail i of the prefill worker."""
    n = min(len(decode.rails), len(prefill.rails))
    return [(i, decode.rails[i], prefill.rails[i]) for i in range(n)]


# -- messages ------------------------------------------------------------------


class MsgType(IntEnum):
    REGISTER = 1
    VIEW = 2
    REMOVE = 3
    ROUTE = 4
    SUBMIT = 5
    KV_READY = 6
    PUSH = 7
    ABORT = 8


@dataclass(frozen=True)
class Register:
    record: WorkerRecord


@dataclass(frozen=True)
class ViewMsg:
    view: ClusterView


@dataclass(frozen=True)
class Remove:
    worker_id: int


@dataclass(frozen=True)
class Submit:
    request: Request


@dataclass(frozen=True)
class Route:
    """Hand ``request`` to its entry worker, naming both workers that serve it."""

    request: Request
    prefill_id: int
    decode_id: int


@dataclass(frozen=True)
class KvReady:
    """Pull mode: the prefill worker's blocks for ``request`` are ready to read."""

    request: Request
    prefill_id: int
    rail: int
    blocks: tuple[int, ...]


@dataclass(frozen=True)
class PushRequest:
    """Push mode: prefill ``request`` and write its KV into these decode blocks."""

    request: Request
    decode_id: int
    rail: int
    blocks: tuple[int, ...]


@dataclass(frozen=True)
class Abort:
    """Tell the peer worker to drop ``request_id`` and free what it holds for it."""

    request_id: int
    reason: str


Message = Union[Register, ViewMsg, Remove, Submit, Route, KvReady, PushRequest, Abort]

_REQ = struct.Struct("<QIIQ")


class _Writer:
    def __init__(self) -> None:
        self.buf = bytearray()

    def pack(self, fmt: str, *values) -> None:
        self.buf += struct.pack("<" + fmt, *values)

    def text(self, s: str) -> None:
        raw = s.encode()
        self.pack("H", len(raw))
        self.buf += raw

    def request(self, r: Request) -> None:
        self.buf += _REQ.pack(r.request_id, r.prompt_tokens, r.response_tokens, r.arrival_ns)

    def record(self, w: WorkerRecord) -> None:
        self.pack("IB", w.worker_id, int(w.role))
        self.text(w.control_address)
        self.pack("B", len(w.rails))
        for a in w.rails:
            self.text(a)

    def blocks(self, blocks: Iterable[int]) -> None:
        blocks = list(blocks)
        self.pack("I", len(blocks))
        self.buf += struct.pack(f"<{len(blocks)}I", *blocks)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.view = memoryview(data)
        self.pos = 0

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        if self.pos + st.size > len(self.view):
            raise ClusterError("truncated control message")
        out = st.unpack_from(self.view, self.pos)
        self.pos += st.size
        return out

    def text(self) -> str:
        (n,) = self.unpack("H")
        if self.pos + n > len(self.view):
            raise ClusterError("truncated control message")
        s = bytes(self.view[self.pos : self.pos + n]).decode()
        self.pos += n
        return s

    def request(self) -> Request:
        return Request(*self.unpack("QIIQ"))

    def record(self) -> WorkerRecord:
        wid, role = self.unpack("IB")
        control = self.text()
        (n,) = self.unpack("B")
        return WorkerRecord(wid, Role(role), control, tuple(self.text() for _ in range(n)))

    def blocks(self) -> tuple[int, ...]:
        (n,) = self.unpack("I")
        return tuple(self.unpack(f"{n}I"))

    def done(self) -> None:
        if self.pos != len(self.view):
            raise ClusterError(f"{len(self.view) - self.pos} trailing bytes in control message")


def encode_message(msg: Message) -> bytes:
    w = _Writer()
    if isinstance(msg, Register):
        w.pack("B", MsgType.REGISTER)
        w.record(msg.record)
    elif isinstance(msg, ViewMsg):
        w.pack("BQH", MsgType.VIEW, msg.view.epoch, len(msg.view.workers))
        for rec in msg.view.workers:
            w.record(rec)
    elif isinstance(msg, Remove):
        w.pack("BI", MsgType.REMOVE, msg.worker_id)
    elif isinstance(msg, Submit):
        w.pack("B", MsgType.SUBMIT)
        w.request(msg.request)
    elif isinstance(msg, Route):
        w.pack("B", MsgType.ROUTE)
        w.request(msg.request)
        w.pack("II", msg.prefill_id, msg.decode_id)
    elif isinstance(msg, KvReady):
        w.pack("B", MsgType.KV_READY)
        w.request(msg.request)
        w.pack("IB", msg.prefill_id, msg.rail)
        w.blocks(msg.blocks)
    elif isinstance(msg, PushRequest):
        w.pack("B", MsgType.PUSH)
        w.request(msg.request)
        w.pack("IB", msg.decode_id, msg.rail)
        w.blocks(msg.blocks)
    elif isinstance(msg, Abort):
        w.pack("BQ", MsgType.ABORT, msg.request_id)
        w.text(msg.reason)
    else:
        raise TypeError(f"not a control message: {msg!r}")
    return bytes(w.buf)


def decode_message(data: bytes) -> Message:
    r = _Reader(data)
    (kind,) = r.unpack("B")
    try:
        kind = MsgType(kind)
    except ValueError:
        raise ClusterError(f"unknown control message type {kind}") from None
    if kind == MsgType.REGISTER:
        msg: Message = Register(r.record())
    elif kind == MsgType.VIEW:
        epoch, n = r.unpack("QH")
        msg = ViewMsg(ClusterView(epoch, tuple(r.record() for _ in range(n))))
    elif kind == MsgType.REMOVE:
        msg = Remove(*r.unpack("I"))
    elif kind == MsgType.SUBMIT:
        msg = Submit(r.request())
    elif kind == MsgType.ROUTE:
        req = r.request()
        msg = Route(req, *r.unpack("II"))
    elif kind == MsgType.KV_READY:
        req = r.request()
        pid, rail = r.unpack("IB")
        msg = KvReady(req, pid, rail, r.blocks())
    elif kind == MsgType.PUSH:
        req = r.request()
        did, rail = r.unpack("IB")
        msg = PushRequest(req, did, rail, r.blocks())
    else:
        (rid,) = r.unpack("Q")
        msg = Abort(rid, r.text())
    r.done()
    return msg


# -- message buses -------------------------------------------------------------


Handler = Callable[[str, Message], None]


class LoopbackBus:
    """In-process control plane: ordered, fixed-latency delivery per sender."""

    def __init__(self, loop, latency: float = 20e-6):
        self.loop = loop
        self.latency = latency
        self.ports: dict[str, Handler] = {}
        self.sent = 0
        self.dropped = 0
        self._names = itertools.count()

    def attach(self, address: str | None, handler: Handler) -> "BusPort":
        address = address or f"ctl-{next(self._names)}"
        if address in self.ports:
            raise ClusterError(f"control address {address} already in use")
        self.ports[address] = handler
        return BusPort(self, address)

    def detach(self, address: str) -> None:
        self.ports.pop(address, None)

    def _send(self, src: str, dst: str, msg: Message) -> None:
        data = encode_message(msg)
        self.sent += 1
        self.loop.call_later(self.latency, self._deliver, src, dst, data)

    def _deliver(self, src: str, dst: str, data: bytes) -> None:
        handler = self.ports.get(dst)
        if handler is None:
            self.dropped += 1
            return
        handler(src, decode_message(data))


@dataclass
class BusPort:
    bus: object
    address: str

    def send(self, dst: str, msg: Message) -> None:
        self.bus._send(self.address, dst, msg)

    def close(self) -> None:
        self.bus.detach(self.address)


_LEN = struct.Struct("<I")


class _ControlStream(asyncio.Protocol):
    def __init__(self, bus: "SocketBus", handler: Handler | None):
        self.bus = bus
        self.handler = handler
        self.transport = None
        self.buf = bytearray()

    def connection_made(self, transport) -> None:
        self.transport = transport

    def data_received(self, data: bytes) -> None:
        self.buf += data
        while len(self.buf) >= _LEN.size:
            (n,) = _LEN.unpack_from(self.buf)
            if len(self.buf) < _LEN.size + n:
                return
            body = bytes(self.buf[_LEN.size : _LEN.size + n])
            del self.buf[: _LEN.size + n]
            r = _Reader(body)
            src = r.text()
            msg = decode_message(body[r.pos :])
            if self.handler is not None:
                self.handler(src, msg)


class SocketBus:
    """Control plane over TCP; one outbound connection per destination."""

    def __init__(self, loop: asyncio.AbstractEventLoop, host: str = "127.0.0.1"):
        self.loop = loop
        self.host = host
        self.sent = 0
        self.dropped = 0
        self._servers: dict[str, asyncio.Future] = {}
        self._out: dict[str, deque] = {}
        self._conns: dict[str, asyncio.Transport] = {}

    def attach(self, address: str | None, handler: Handler) -> BusPort:
        import socket

        host, port = split_address(address) if address else (self.host, 0)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(64)
        sock.setblocking(False)
        bound = f"{host}:{sock.getsockname()[1]}"
        self._servers[bound] = asyncio.ensure_future(
            self.loop.create_server(lambda: _ControlStream(self, handler), sock=sock), loop=self.loop)
        return BusPort(self, bound)

    def detach(self, address: str) -> None:
        fut = self._servers.pop(address, None)
        if fut is not None:
            fut.add_done_callback(lambda f: f.cancelled() or f.exception() or f.result().close())

    def close(self) -> None:
        for a in list(self._servers):
            self.detach(a)
        for t in self._conns.values():
            t.close()
        self._conns.clear()

    def _send(self, src: str, dst: str, msg: Message) -> None:
        w = _Writer()
        w.text(src)
        body = bytes(w.buf) + encode_message(msg)
        frame = _LEN.pack(len(body)) + body
        self.sent += 1
        conn = self._conns.get(dst)
        if conn is not None and not conn.is_closing():
            conn.write(frame)
            return
        pending = self._out.get(dst)
        if pending is not None:
            pending.append(frame)
            return
        self._out[dst] = deque([frame])
        host, port = split_address(dst)
        task = asyncio.ensure_future(
            self.loop.create_connection(lambda: _ControlStream(self, None), host, port),
            loop=self.loop)
        task.add_done_callback(lambda f: self._connected(dst, f))

    def _connected(self, dst: str, fut: asyncio.Future) -> None:
        frames = self._out.pop(dst, deque())
        if fut.cancelled() or fut.exception() is not None:
            self.dropped += len(frames)
            log.warning("control message to %s dropped: %s", dst,
                        None if fut.cancelled() else fut.exception())
            return
        transport, _ = fut.result()
        self._conns[dst] = transport
        for frame in frames:
            transport.write(frame)


# -- scheduler -----------------------------------------------------------------


@dataclass
class RoutingState:
    prefill_rr: int = 0
    decode_rr: int = 0
    routed: dict[int, int] = field(default_factory=dict)


class ClusterScheduler:
    """Membership registry and round-robin request router.

    ``entry`` names the role that first receives a routed request: the
    prefill worker in pull mode, the decode worker in push mode.
    """

    def __init__(self, bus, address: str | None = None, entry: Role = Role.PREFILL):
        self.bus = bus
        self.port = bus.attach(address, self._on_message)
        self.address = self.port.address
        self.entry = entry
        self.view = ClusterView(0)
        self.routing = RoutingState()
        self.running = True
        self.rejected: list[tuple[int, str]] = []

    def register_worker(self, record: WorkerRecord) -> int:
        if self.view.get(record.worker_id) is not None:
            raise ClusterError(f"worker {record.worker_id} is already registered")
        taken = {a for w in self.view.workers for a in (w.control_address, *w.rails)}
        clash = taken & {record.control_address, *record.rails}
        if clash:
            raise ClusterError(f"addresses already in use: {sorted(clash)}")
        self._publish(self.view.workers + (record,))
        return self.view.epoch

    def remove_worker(self, worker_id: int) -> int:
        if self.view.get(worker_id) is None:
            raise ClusterError(f"unknown worker {worker_id}")
        self._publish(tuple(w for w in self.view.workers if w.worker_id != worker_id),
                      also=[self.view.get(worker_id)])
        return self.view.epoch

    def _publish(self, workers: tuple[WorkerRecord, ...], also: Iterable[WorkerRecord] = ()) -> None:
        self.view = ClusterView(self.view.epoch + 1, tuple(sorted(workers, key=lambda w: w.worker_id)))
        msg = ViewMsg(self.view)
        for w in (*self.view.workers, *also):
            self.port.send(w.control_address, msg)

    def route(self, request: Request) -> Route | None:
        prefills = self.view.of_role(Role.PREFILL)
        decodes = self.view.of_role(Role.DECODE)
        if not prefills or not decodes:
            self.rejected.append((request.request_id, "no prefill or decode worker"))
            return None
        rs = self.routing
        p = prefills[rs.prefill_rr % len(prefills)]
        d = decodes[rs.decode_rr % len(decodes)]
        rs.prefill_rr += 1
        rs.decode_rr += 1
        route = Route(request, p.worker_id, d.worker_id)
        rs.routed[request.request_id] = p.worker_id
        target = p if self.entry == Role.PREFILL else d
        self.port.send(target.control_address, route)
        return route

    def stop(self) -> None:
        self.running = False
        self.port.close()

    def _on_message(self, src: str, msg: Message) -> None:
        if not self.running:
            return
        try:
            if isinstance(msg, Register):
                self.register_worker(msg.record)
            elif isinstance(msg, Remove):
                self.remove_worker(msg.worker_id)
            elif isinstance(msg, Submit):
                self.route(msg.request)
            else:
                log.warning("scheduler ignoring %s from %s", type(msg).__name__, src)
        except ClusterError as exc:
            log.warning("scheduler rejected %s from %s: %s", type(msg).__name__, src, exc)
            self.rejected.append((0, str(exc)))
