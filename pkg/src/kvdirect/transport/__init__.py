from .frames import MAX_PAYLOAD, Frame, FrameDecoder, FrameError, FrameType, decode_frame, encode_frame
from .loopback import AdversarialModel, LinkModel, LoopbackNetwork
from .sockets import SocketNetwork
from .verbs import (
    NO_MR,
    ConnectError,
    ConnectTimeout,
    Endpoint,
    EndpointId,
    MRKind,
    Opcode,
    QueuePair,
    RailMismatch,
    ResourceExhausted,
    Role,
    TransportError,
    WcStatus,
    WorkCompletion,
)

__all__ = [
    "MAX_PAYLOAD", "NO_MR", "AdversarialModel", "ConnectError", "ConnectTimeout", "Endpoint",
    "EndpointId", "Frame", "FrameDecoder", "FrameError", "FrameType", "LinkModel",
    "LoopbackNetwork", "MRKind", "Opcode", "QueuePair", "RailMismatch", "ResourceExhausted",
    "Role", "SocketNetwork", "TransportError", "WcStatus", "WorkCompletion", "decode_frame", "encode_frame",
]
