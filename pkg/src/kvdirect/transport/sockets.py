"""TCP transport for the verbs emulation, driven by an asyncio event loop.

Each queue pair owns one TCP connection. Listening sockets are bound
synchronously so the caller learns the real port before the loop runs.
"""

from __future__ import annotations

import asyncio
import logging
import socket
from typing import Callable

from .frames import Frame, FrameDecoder, FrameError, encode_frame
from .verbs import NO_MR, ConnectError, ConnectTimeout, Endpoint, QueuePair

log = logging.getLogger(__name__)


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address {address!r} is not host:port")
    return host, int(port)


class StreamLink(asyncio.Protocol):
    """Frames over one TCP connection; implements the Link protocol."""

    def __init__(self, net: "SocketNetwork"):
        self.net = net
        self.transport: asyncio.Transport | None = None
        self.decoder = FrameDecoder()
        self.receiver: Callable[[Frame], None] | None = None
        self.on_closed: Callable[[str], None] | None = None
        self.on_made: Callable[[StreamLink], None] | None = None
        self.closed = False

    def connection_made(self, transport) -> None:
        self.transport = transport
        sock = transport.get_extra_info("socket")
        if sock is not None:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if self.on_made is not None:
            self.on_made(self)

    def data_received(self, data: bytes) -> None:
        try:
            frames = self.decoder.feed(data)
        except FrameError as exc:
            log.warning("dropping connection on bad frame: %s", exc)
            self.close()
            self._lost(f"protocol error: {exc}")
            return
        for frame in frames:
            if self.receiver is not None and not self.closed:
                self.receiver(frame)

    def connection_lost(self, exc) -> None:
        self._lost("peer disconnected" if exc is None else f"connection lost: {exc}")

    def _lost(self, reason: str) -> None:
        if self.closed:
            return
        self.closed = True
        if self.on_closed is not None:
            self.on_closed(reason)

    def send(self, frame: Frame) -> None:
        if self.closed or self.transport is None:
            return
        data = encode_frame(frame)
        self.net.frames_sent += 1
        self.net.bytes_sent += len(data)
        self.transport.write(data)

    def close(self) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.close()
        self.closed = True


class SocketNetwork:
    """Same surface as LoopbackNetwork, but every queue pair is a TCP stream."""

    def __init__(self, loop: asyncio.AbstractEventLoop, host: str = "127.0.0.1"):
        self.loop = loop
        self.host = host
        self.frames_sent = 0
        self.bytes_sent = 0
        self._servers: dict[str, asyncio.AbstractServer | asyncio.Future] = {}

    def listen(self, endpoint: Endpoint, address: str | None = None,
               on_accept: Callable | None = None) -> str:
        host, port = split_address(address) if address else (self.host, 0)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((host, port))
        sock.listen(128)
        sock.setblocking(False)
        bound = f"{host}:{sock.getsockname()[1]}"

        def factory():
            link = StreamLink(self)

            def accepted(_link):
                qp = QueuePair(endpoint, link, initiator=False, on_accept=on_accept)
                link.receiver = qp.on_frame
                link.on_closed = qp.link_lost

            link.on_made = accepted
            return link

        self._servers[bound] = asyncio.ensure_future(
            self.loop.create_server(factory, sock=sock), loop=self.loop)
        return bound

    def unlisten(self, address: str) -> None:
        fut = self._servers.pop(address, None)
        if fut is None:
            return

        def shut(f):
            if not f.cancelled() and f.exception() is None:
                f.result().close()

        fut.add_done_callback(shut)

    def listening(self, address: str) -> bool:
        return address in self._servers

    def close(self) -> None:
        for address in list(self._servers):
            self.unlisten(address)

    def connect(self, endpoint: Endpoint, address: str, on_done: Callable,
                ctrl_mr: int = NO_MR, timeout: float = 2.0) -> None:
        """Open a queue pair to ``address``; ``on_done(qp, error)`` fires exactly once."""
        host, port = split_address(address)
        state = {"done": False, "qp": None}

        def finish(qp, err):
            if state["done"]:
                return
            state["done"] = True
            timer.cancel()
            on_done(qp, err)

        def expire():
            if state["done"]:
                return
            task.cancel()
            if state["qp"] is not None:
                state["qp"].close("connect timeout")
            finish(None, ConnectTimeout(f"{endpoint.name}: no answer from {address}"))

        def made(link: StreamLink) -> None:
            qp = QueuePair(endpoint, link, initiator=True, ctrl_mr=ctrl_mr, on_ready=finish)
            state["qp"] = qp
            link.receiver = qp.on_frame
            link.on_closed = qp.link_lost
            qp.start()

        def factory():
            link = StreamLink(self)
            link.on_made = made
            return link

        def connected(fut: asyncio.Future) -> None:
            if fut.cancelled():
                return
            exc = fut.exception()
            if exc is not None:
                finish(None, ConnectError(f"{endpoint.name}: cannot reach {address}: {exc}"))

        timer = self.loop.call_later(timeout, expire)
        task = asyncio.ensure_future(self.loop.create_connection(factory, host, port), loop=self.loop)
        task.add_done_callback(connected)

