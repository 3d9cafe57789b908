"""Randomised cross-checks of the fast paths against the brute-force oracles.

Each check draws its instances from one seed and returns the first
counterexample it finds along with the seed that reproduces it. The
implementation under test is a parameter, so a deliberately broken variant
can be fed in to show the harness catches it.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Callable

from .eventloop import VirtualLoop
from .kv_allocator import AllocationImpossible, BlockPool
from .oracles import (
    AllocatorModel,
    VerbLogInterpreter,
    all_indices,
    byte_pairs,
    contiguous_range,
    maximal_run_count,
    strided_offsets,
    subtensor_bytes,
)
from .tensor_meta import ByteSpan, LayoutError, TensorLayout, block_span_bytes, element_offset
from .transfer_engine import Member, SpanRead, SpanTable, coalesce
from .transport.loopback import AdversarialModel, LoopbackNetwork
from .transport.verbs import Endpoint, EndpointId, MRKind, Role


@dataclass
class CheckResult:
    name: str
    cases: int = 0
    mismatches: int = 0
    counterexample: str | None = None
    seed: int | None = None
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.mismatches == 0

    def miss(self, seed: int, what: str) -> None:
        self.mismatches += 1
        if self.counterexample is None:
            self.counterexample, self.seed = what, seed

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        text = f"{status} {self.name}: {self.cases} cases, {self.mismatches} mismatches"
        if not self.ok:
            text += f"; first at seed {self.seed}: {self.counterexample}"
        return text


def random_layout(rng: random.Random, max_elements: int = 256) -> TensorLayout:
    """A small layout with B and KV somewhere among the dims and a random storage order."""
    labels = ["B", "KV"] + rng.sample(["L", "H", "D"], rng.randint(0, 3))
    rng.shuffle(labels)
    while True:
        shape = [rng.randint(2, 4) for _ in labels]
        n = 1
        for e in shape:
            n *= e
        if n <= max_elements:
            break
    order = list(range(len(labels)))
    rng.shuffle(order)
    stride = [0] * len(labels)
    step = 1
    for axis in reversed(order):
        stride[axis] = step
        step *= shape[axis]
    return TensorLayout(rng.randrange(0, 64), tuple(labels), tuple(shape), tuple(stride),
                        rng.choice([1, 2, 4]))


def check_offsets(count: int = 1000, seed: int = 0,
                  offset_fn: Callable = element_offset, span_fn: Callable = block_span_bytes) -> CheckResult:
    res = CheckResult("element offsets and block spans")
    for i in range(count):
        case_seed = seed * 1_000_003 + i
        layout = random_layout(random.Random(case_seed))
        res.cases += 1
        truth = strided_offsets(layout.shape, layout.stride, layout.element_size)
        bad = next((idx for idx in all_indices(layout.shape)
                    if offset_fn(layout, idx) != int(truth[idx])), None)
        if bad is not None:
            res.miss(case_seed, f"{layout} index {bad}: got {offset_fn(layout, bad)}, want {int(truth[bad])}")
            continue
        b, kv = layout.axis("B"), layout.axis("KV")
        ranges = {contiguous_range(subtensor_bytes(layout.shape, layout.stride, layout.element_size,
                                                   {b: 0, kv: 0}))}
        want = None if None in ranges else next(iter(ranges))[1]
        try:
            got = span_fn(layout)
        except LayoutError:
            got = None
        if got != want:
            res.miss(case_seed, f"{layout}: span {got}, oracle {want}")
    return res


def check_coalescing(count: int = 1000, seed: int = 0, coalesce_fn: Callable = coalesce) -> CheckResult:
    res = CheckResult("coalescing against maximal bi-contiguous runs")
    for i in range(count):
        case_seed = seed * 1_000_003 + i
        rng = random.Random(case_seed)
        blocks = rng.randint(1, 24)
        tokens, heads, dim = rng.choice([1, 2, 4]), rng.randint(1, 2), rng.choice([1, 2, 8])
        remote = TensorLayout.paged_kv(blocks, tokens, heads, dim, 2)
        local = TensorLayout.paged_kv(blocks + rng.randint(0, 8), tokens, heads, dim, 2)
        n = rng.randint(1, blocks)
        src = rng.sample(range(blocks), n)
        # Mostly-sorted destinations leave plenty of mergeable runs.
        dst = sorted(rng.sample(range(local.num_blocks), n)) if rng.random() < 0.5 else \
            rng.sample(range(local.num_blocks), n)
        if rng.random() < 0.5:
            src = sorted(src)
        rt, lt = SpanTable(remote), SpanTable(local)
        ds = [SpanRead(ByteSpan(rt.offset(rb, k), rt.span), ByteSpan(lt.offset(lb, k), lt.span),
                       Member(1, rb, lb, k))
              for rb, lb in zip(src, dst) for k in range(rt.num_kv)]
        rng.shuffle(ds)
        cap = rng.choice([None, None, rt.span * rng.randint(1, 6)])
        runs = coalesce_fn(ds) if cap is None else coalesce_fn(ds, cap=cap)
        triples = [(d.remote.offset, d.local.offset, d.local.length) for d in ds]
        merged = [(r.remote.offset, r.local.offset, r.local.length) for r in runs]
        res.cases += 1
        if sorted(byte_pairs(merged)) != sorted(byte_pairs(triples)):
            res.miss(case_seed, f"coverage differs for pairs {list(zip(src, dst))}")
            continue
        want = maximal_run_count(triples, cap)
        if len(runs) != want:
            res.miss(case_seed, f"{len(runs)} reads for pairs {list(zip(src, dst))} cap={cap}, oracle {want}")
    return res


def check_verbs(count: int = 200, seed: int = 0) -> CheckResult:
    """Random READ/WRITE logs over an adversarial loopback vs the sequential interpreter."""
    res = CheckResult("verb logs against the sequential interpreter")
    for i in range(count):
        case_seed = seed * 1_000_003 + i
        rng = random.Random(case_seed)
        loop = VirtualLoop()
        net = LoopbackNetwork(loop, AdversarialModel(seed=case_seed))
        server = Endpoint(loop, EndpointId(Role.PREFILL, 1, 0))
        client = Endpoint(loop, EndpointId(Role.DECODE, 2, 0))
        net.listen(server, "s")
        got: list = []
        net.connect(client, "s", lambda qp, err: got.append(qp))
        loop.run_until(lambda: bool(got), 1.0)
        qp = got[0]
        size = 1024
        a_init, b_init = bytearray(rng.randbytes(size)), bytearray(rng.randbytes(size))
        remote = server.register_mr(MRKind.GPU_PAYLOAD, size, bytearray(a_init))
        local = client.register_mr(MRKind.GPU_PAYLOAD, size, bytearray(b_init))
        log = []
        # Reads land in the low local half and writes source from the high
        # half, so a read never feeds a later write on the same side.
        for wr in range(rng.randint(1, 20)):
            length = rng.randint(1, 200)
            roff = rng.randint(0, size - length)
            if rng.random() < 0.5:
                loff = rng.randint(0, size // 2 - length)
                qp.post_read(remote, roff, local, loff, length, wr_id=wr)
                log.append(("read", "c", local, loff, "s", remote, roff, length))
            else:
                loff = rng.randint(size // 2, size - length)
                qp.post_write(local, loff, length, remote, roff, wr_id=wr)
                log.append(("write", "c", local, loff, "s", remote, roff, length))
        loop.run()
        VerbLogInterpreter({("s", remote): a_init, ("c", local): b_init}).run(log)
        res.cases += 1
        if bytes(server.mr(remote).buf) != bytes(a_init) or bytes(client.mr(local).buf) != bytes(b_init):
            res.miss(case_seed, f"memory differs after {len(log)} verbs")
            continue
        wcs = client.poll_cq(1000)
        if sorted(w.wr_id for w in wcs) != list(range(len(log))) or not all(w.ok for w in wcs):
            res.miss(case_seed, "completions missing, duplicated or failed")
    return res


def check_allocator(count: int = 300, seed: int = 0, pool_cls=BlockPool) -> CheckResult:
    res = CheckResult("block pool against the set model")
    for i in range(count):
        case_seed = seed * 1_000_003 + i
        rng = random.Random(case_seed)
        total = rng.randint(1, 64)
        pool, model = pool_cls(total, 16), AllocatorModel(total)
        ids = itertools.count(1)
        live: list[int] = []
        res.cases += 1
        try:
            for _ in range(rng.randint(1, 60)):
                op = rng.random()
                if op < 0.45:
                    rid, n = next(ids), rng.randint(1, total + 2)
                    try:
                        alloc = pool.allocate_all_or_nothing(rid, n)
                    except AllocationImpossible:
                        assert n > total, f"impossible raised for n={n} <= {total}"
                        continue
                    if alloc is None:
                        assert not model.can_allocate(n), f"refused {n} with {len(model.free)} free"
                        continue
                    assert len(alloc.block_ids) == n
                    model.commit(rid, list(alloc.block_ids))
                    live.append(rid)
                elif op < 0.65 and live:
                    rid = rng.choice(live)
                    block = pool.allocate_append(rid)
                    if block is None:
                        assert not model.free, "append refused with free blocks"
                    else:
                        model.commit(rid, [block])
                elif live:
                    rid = live.pop(rng.randrange(len(live)))
                    assert pool.release(rid) == model.release(rid)
                assert pool.free_set() == model.free, "free sets diverge"
                pool.check_invariants()
        except AssertionError as exc:
            res.miss(case_seed, str(exc) or "assertion failed")
    return res


def run_all(seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    def n(k: int) -> int:
        return max(1, int(k * scale))

    return [
        check_offsets(n(1000), seed),
        check_coalescing(n(1000), seed),
        check_verbs(n(200), seed),
        check_allocator(n(300), seed),
    ]
