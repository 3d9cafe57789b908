"""Deterministic in-process network for the verbs emulation.

Frames are encoded to bytes on send and decoded on delivery, so the loopback
exercises the same codec as the socket transport. Each direction of a link
is a FIFO lane: a frame is delivered no earlier than the one before it,
mirroring a reliable connected queue pair. Delivery time comes from a
pluggable latency model driven by a seeded RNG.
"""

from __future__ import annotations

import random
from typing import Callable

from ..eventloop import to_ns
from .frames import Frame, FrameType, decode_frame, encode_frame
from .verbs import NO_MR, ConnectTimeout, Endpoint, QueuePair, TransportError


class Lane:
    __slots__ = ("busy_until", "last_delivery")

    def __init__(self) -> None:
        self.busy_until = 0
        self.last_delivery = 0


class LinkModel:
    """Base latency plus serialization at a fixed bandwidth.

    ``byte_scale`` inflates the bytes the link charges for, letting a
    simulation move small synthetic payloads while paying for full-size ones.
    """

    def __init__(self, base_latency: float = 2e-6, bandwidth: float | None = None,
                 byte_scale: float = 1.0, jitter: float = 0.0, seed: int = 0):
        self.base_ns = to_ns(base_latency)
        self.ns_per_byte = 0.0 if not bandwidth else 1e9 * byte_scale / bandwidth
        self.jitter_ns = to_ns(jitter)
        self.rng = random.Random(seed)

    def extra_delay(self, frame_type: FrameType, nbytes: int) -> int:
        if self.jitter_ns:
            return int(self.rng.random() * self.jitter_ns)
        return 0

    def schedule(self, lane: Lane, frame_type: FrameType, nbytes: int, now: int) -> int:
        start = max(now, lane.busy_until)
        lane.busy_until = start + round(nbytes * self.ns_per_byte)
        when = lane.busy_until + self.base_ns + self.extra_delay(frame_type, nbytes)
        when = max(when, lane.last_delivery)
        lane.last_delivery = when
        return when


class AdversarialModel(LinkModel):
    """Heavy-tailed random delays, harsher on chosen frame types.

    Order within a lane is still preserved; only relative timing between
    lanes and between request and response is perturbed.
    """

    def __init__(self, seed: int, base_latency: float = 1e-6, spike_prob: float = 0.3,
                 spike: float = 50e-6, slow_types: dict[FrameType, float] | None = None):
        super().__init__(base_latency=base_latency, seed=seed)
        self.spike_prob = spike_prob
        self.spike_ns = to_ns(spike)
        self.slow_types = {t: to_ns(d) for t, d in (slow_types or {}).items()}

    def extra_delay(self, frame_type: FrameType, nbytes: int) -> int:
        delay = int(self.rng.random() * self.base_ns * 4)
        if self.rng.random() < self.spike_prob:
            delay += int(self.rng.expovariate(1.0) * self.spike_ns)
        slow = self.slow_types.get(frame_type)
        if slow:
            delay += int(self.rng.random() * slow)
        return delay


class _PipeEnd:
    """One side of an in-process link; implements the Link protocol."""

    def __init__(self, net: "LoopbackNetwork", lane: Lane):
        self.net = net
        self.lane = lane
        self.peer: _PipeEnd | None = None
        self.receiver: Callable[[Frame], None] | None = None
        self.on_closed: Callable[[str], None] | None = None
        self.closed = False

    def send(self, frame: Frame) -> None:
        if self.closed:
            return
        data = encode_frame(frame)
        self.net.frames_sent += 1
        self.net.bytes_sent += len(data)
        loop = self.net.loop
        when = self.net.model.schedule(self.lane, frame.type, len(data), loop.time_ns())
        loop.call_at_ns(when, self.peer._deliver, data)

    def _deliver(self, data: bytes) -> None:
        if self.closed or self.receiver is None:
            return
        self.receiver(decode_frame(data))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        # Queued behind in-flight frames so the peer sees them first.
        loop = self.net.loop
        when = max(loop.time_ns() + self.net.model.base_ns, self.lane.last_delivery)
        self.lane.last_delivery = when
        loop.call_at_ns(when, self.peer._peer_closed)

    def _peer_closed(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.on_closed is not None:
            self.on_closed("peer disconnected")


class LoopbackNetwork:
    def __init__(self, loop, model: LinkModel | None = None):
        self.loop = loop
        self.model = model or LinkModel()
        self._listeners: dict[str, tuple[Endpoint, Callable]] = {}
        self.frames_sent = 0
        self.bytes_sent = 0

    def listen(self, endpoint: Endpoint, address: str, on_accept: Callable | None = None) -> str:
        if address in self._listeners:
            raise TransportError(f"address {address} already in use")
        self._listeners[address] = (endpoint, on_accept)
        return address

    def unlisten(self, address: str) -> None:
        self._listeners.pop(address, None)

    def listening(self, address: str) -> bool:
        return address in self._listeners

    def connect(self, endpoint: Endpoint, address: str, on_done: Callable,
                ctrl_mr: int = NO_MR, timeout: float = 0.5) -> None:
        """Open a queue pair to ``address``; ``on_done(qp, error)`` fires exactly once."""
        done = False

        def finish(qp, err):
            nonlocal done
            if done:
                return
            done = True
            timer.cancel()
            on_done(qp, err)

        def expire():
            if not done:
                if qp_holder:
                    qp_holder[0].close("connect timeout")
                finish(None, ConnectTimeout(f"{endpoint.name}: no answer from {address}"))

        timer = self.loop.call_later(timeout, expire)
        qp_holder: list[QueuePair] = []
        target = self._listeners.get(address)
        if target is None:
            return
        remote_ep, on_accept = target
        a, b = _PipeEnd(self, Lane()), _PipeEnd(self, Lane())
        a.peer, b.peer = b, a
        qp = QueuePair(endpoint, a, initiator=True, ctrl_mr=ctrl_mr, on_ready=finish)
        qp_holder.append(qp)
        a.receiver = qp.on_frame
        a.on_closed = qp.link_lost

        def accept_first(frame: Frame) -> None:
            # The responder's queue pair exists once the HELLO lands.
            if frame.type != FrameType.HELLO:
                return
            rqp = QueuePair(remote_ep, b, initiator=False, on_accept=on_accept)
            b.receiver = rqp.on_frame
            b.on_closed = rqp.link_lost
            rqp.on_frame(frame)

        b.receiver = accept_first
        qp.start()
