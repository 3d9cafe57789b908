"""Transfer microbenchmark: one prefill/decode pair moving a fixed block set.

Reports wire operations and bytes rather than bandwidth: on loopback the
elapsed time is virtual and follows the configured link model.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass

from .eventloop import VirtualLoop, drive, now_ns
from .tensor_meta import TensorLayout, block_to_spans
from .transfer_engine import TransferAgent, baseline_message_transfer, connect
from .transport.loopback import LinkModel, LoopbackNetwork
from .transport.sockets import SocketNetwork
from .transport.verbs import Endpoint, EndpointId, Role
from .workers import KVView

BENCH_MODES = ("pull", "push", "baseline")


@dataclass(frozen=True)
class BenchConfig:
    blocks: int = 1024
    # Pool size on both ends; defaults to twice ``blocks`` so the moved set
    # is not the whole buffer (whose K and V halves would touch and merge).
    pool_blocks: int | None = None
    block_tokens: int = 16
    heads: int = 1
    head_dim: int = 32
    element_size: int = 2
    mode: str = "pull"
    coalescing: bool = True
    buffer_blocks: int = 2
    placement: str = "contiguous"
    transport: str = "loopback"
    bandwidth: float = 25e9
    latency: float = 5e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in BENCH_MODES:
            raise ValueError(f"bench mode must be one of {BENCH_MODES}")
        if self.placement not in ("contiguous", "shuffled"):
            raise ValueError("placement must be contiguous or shuffled")
        if self.transport not in ("loopback", "socket"):
            raise ValueError("transport must be loopback or socket")
        if self.blocks < 1 or self.buffer_blocks < 1:
            raise ValueError("blocks and buffer_blocks must be positive")
        if self.pool_blocks is not None and self.pool_blocks < self.blocks:
            raise ValueError("pool_blocks must be at least blocks")

    def layout(self) -> TensorLayout:
        pool = self.pool_blocks if self.pool_blocks is not None else 2 * self.blocks
        return TensorLayout.paged_kv(pool, self.block_tokens, self.heads, self.head_dim,
                                     self.element_size)


@dataclass(frozen=True)
class BenchReport:
    mode: str
    coalescing: bool
    blocks: int
    wire_ops: int
    moves: int
    completes: int
    iterations: int
    bytes_moved: int
    spans: int
    mean_run_spans: float
    elapsed_ns: int
    wall_s: float
    verified: bool

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _block_pairs(cfg: BenchConfig, pool: int) -> list[tuple[int, int]]:
    remote = list(range(cfg.blocks))
    local = list(range(cfg.blocks))
    if cfg.placement == "shuffled":
        local = random.Random(cfg.seed).sample(range(pool), cfg.blocks)
    return list(zip(remote, local))


def run_bench(cfg: BenchConfig) -> BenchReport:
    layout = cfg.layout()
    if cfg.transport == "loopback":
        loop = VirtualLoop()
        net = LoopbackNetwork(loop, LinkModel(cfg.latency, cfg.bandwidth))
        address, msg_address = "prefill/rail0", "prefill/msg"
    else:
        import asyncio

        loop = asyncio.new_event_loop()
        net = SocketNetwork(loop)
        address = msg_address = None
    p_mem = bytearray(layout.nbytes)
    prefill = TransferAgent(Endpoint(loop, EndpointId(Role.PREFILL, 1, 0)), layout, p_mem,
                            coalescing=cfg.coalescing)
    decode = TransferAgent(Endpoint(loop, EndpointId(Role.DECODE, 2, 0)), layout,
                           coalescing=cfg.coalescing)
    pairs = _block_pairs(cfg, layout.num_blocks)
    rid = 1
    src = KVView(layout, p_mem, prefill.spans)
    src.fill(rid, [r for r, _ in pairs])
    wall = time.perf_counter()
    try:
        if cfg.mode != "baseline":
            address = prefill.listen(net, address)
            d_side = connect(decode, net, address)
            drive(loop, lambda: bool(prefill.ready_sessions()), 5.0)
            p_side = prefill.ready_sessions()[0]
            seen: list[int] = []
            prefill.on_peer_complete = decode.on_peer_complete = lambda _s, r: seen.append(r)
            t0 = now_ns(loop)
            if cfg.mode == "pull":
                s = d_side
                p_side.expect(rid)
                for remote, local in pairs:
                    s.transfer(remote, local, rid)
            else:
                s = p_side
                d_side.expect(rid)
                for remote, local in pairs:
                    s.push(remote, local, rid)
            s.complete(rid)
            if not drive(loop, lambda: rid in seen, 600.0):
                raise RuntimeError("transfer did not complete")
            elapsed = now_ns(loop) - t0
            moves = s.stats["reads"] + s.stats["writes"]
            completes = s.stats["completes"]
            report_args = dict(wire_ops=moves + completes, moves=moves, completes=completes,
                               iterations=1, bytes_moved=s.stats["move_bytes"],
                               spans=s.stats["drained_spans"],
                               mean_run_spans=s.stats["drained_spans"] / max(moves, 1))
        else:
            msg_address = prefill.listen_messages(net, msg_address)
            rep = baseline_message_transfer(decode, net, msg_address, pairs, cfg.buffer_blocks,
                                            request_id=rid)
            elapsed = rep.elapsed_ns
            report_args = dict(wire_ops=rep.wire_ops, moves=0, completes=0,
                               iterations=rep.iterations, bytes_moved=rep.bytes_moved,
                               spans=cfg.blocks * layout.num_kv, mean_run_spans=0.0)
        wall = time.perf_counter() - wall
        verified = all(_same_block(layout, p_mem, decode.buffer, r, l) for r, l in pairs)
    finally:
        if cfg.transport == "socket":
            net.close()
            drive(loop, lambda: False, 0.05)
            loop.close()
    return BenchReport(cfg.mode, cfg.coalescing, cfg.blocks, elapsed_ns=elapsed, wall_s=wall,
                       verified=verified, **report_args)


def _same_block(layout: TensorLayout, src, dst, remote: int, local: int) -> bool:
    for a, b in zip(block_to_spans(layout, remote), block_to_spans(layout, local)):
        if bytes(src[a.offset : a.end]) != bytes(dst[b.offset : b.end]):
            return False
    return True
