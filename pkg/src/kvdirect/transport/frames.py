"""Little-endian frame codec for the emulated verbs wire protocol.

Every frame starts with a fixed 25-byte header::

    u8 frame_type | u64 wr_id | u32 mr_id | u64 offset | u32 length

READ_RESP, WRITE and SEND are followed by ``length`` payload bytes; the other
types carry none. On response frames (READ_RESP, WRITE_ACK) ``mr_id`` holds
the completion status, 0 meaning success; on SEND it carries the sender's
immediate value. HELLO and HELLO_ACK pack the endpoint identity into the
header: ``wr_id`` = worker id, ``offset`` = rail id, ``length`` = role byte
and ``mr_id`` = the sender's control region for this connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

HEADER = struct.Struct("<BQIQI")
MAX_PAYLOAD = 1 << 20


class FrameType(IntEnum):
    READ_REQ = 0
    READ_RESP = 1
    WRITE = 2
    WRITE_ACK = 3
    SEND = 4
    RECV_READY = 5
    HELLO = 6
    HELLO_ACK = 7


_WITH_PAYLOAD = frozenset({FrameType.READ_RESP, FrameType.WRITE, FrameType.SEND})


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    wr_id: int = 0
    mr_id: int = 0
    offset: int = 0
    length: int = 0
    payload: bytes = b""

    def __post_init__(self) -> None:
        if self.type in _WITH_PAYLOAD:
            if len(self.payload) != self.length:
                raise FrameError(
                    f"{self.type.name} length {self.length} != payload {len(self.payload)}"
                )
            if self.length > MAX_PAYLOAD:
                raise FrameError(f"payload {self.length} exceeds {MAX_PAYLOAD}")
        elif self.payload:
            raise FrameError(f"{self.type.name} frames carry no payload")


def encode_frame(frame: Frame) -> bytes:
    header = HEADER.pack(frame.type, frame.wr_id, frame.mr_id, frame.offset, frame.length)
    return header + frame.payload if frame.payload else header


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame; raises FrameError on any mismatch."""
    frame, used = _decode_prefix(memoryview(data))
    if frame is None:
        raise FrameError(f"truncated frame ({len(data)} bytes)")
    if used != len(data):
        raise FrameError(f"{len(data) - used} trailing bytes after frame")
    return frame


def _decode_prefix(view: memoryview) -> tuple[Frame | None, int]:
    if len(view) < HEADER.size:
        return None, 0
    ftype, wr_id, mr_id, offset, length = HEADER.unpack_from(view)
    try:
        ftype = FrameType(ftype)
    except ValueError:
        raise FrameError(f"unknown frame type {ftype}") from None
    if ftype not in _WITH_PAYLOAD:
        return Frame(ftype, wr_id, mr_id, offset, length), HEADER.size
    if length > MAX_PAYLOAD:
        raise FrameError(f"payload {length} exceeds {MAX_PAYLOAD}")
    end = HEADER.size + length
    if len(view) < end:
        return None, 0
    return Frame(ftype, wr_id, mr_id, offset, length, bytes(view[HEADER.size : end])), end


class FrameDecoder:
    """Reassembles frames from an arbitrarily chunked byte stream."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        pos = 0
        view = memoryview(self._buf)
        try:
            while True:
                frame, used = _decode_prefix(view[pos:])
                if frame is None:
                    break
                frames.append(frame)
                pos += used
        finally:
            view.release()
        if pos:
            del self._buf[:pos]
        return frames

    @property
    def buffered(self) -> int:
        return len(self._buf)


def hello(kind: FrameType, role: int, worker_id: int, rail_id: int, ctrl_mr: int) -> Frame:
    return Frame(kind, wr_id=worker_id, mr_id=ctrl_mr, offset=rail_id, length=role)
