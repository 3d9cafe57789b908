"""Brute-force reference implementations used to cross-check the fast paths.

Each oracle takes a different route to the same answer: numpy's own stride
machinery for element addresses, per-byte enumeration for spans and
coalescing, a plain set model for the allocator and a sequential
interpreter for verb logs. None of them import the code they check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


def strided_offsets(shape: Sequence[int], stride: Sequence[int], element_size: int) -> np.ndarray:
    """Byte offset of every element, computed by numpy indexing a strided view."""
    extent = 1 + sum((e - 1) * s for e, s in zip(shape, stride))
    flat = np.arange(extent, dtype=np.int64)
    item = flat.itemsize
    view = as_strided(flat, shape=tuple(shape), strides=tuple(s * item for s in stride))
    return view * element_size


def offset_by_enumeration(shape, stride, element_size, index) -> int:
    return int(strided_offsets(shape, stride, element_size)[tuple(index)])


def subtensor_bytes(shape, stride, element_size, fixed: dict[int, int]) -> list[int]:
    """Sorted byte addresses covered by the sub-tensor with ``fixed`` axes pinned."""
    offsets = strided_offsets(shape, stride, element_size)
    sel = tuple(fixed.get(axis, slice(None)) for axis in range(len(shape)))
    starts = np.asarray(offsets[sel]).ravel()
    covered = (starts[:, None] + np.arange(element_size)[None, :]).ravel()
    return sorted(int(b) for b in covered)


def contiguous_range(addresses: Sequence[int]) -> tuple[int, int] | None:
    """(start, length) if the addresses form one gap-free range, else None."""
    if not addresses:
        return None
    lo, hi = addresses[0], addresses[-1]
    if hi - lo + 1 != len(addresses) or len(set(addresses)) != len(addresses):
        return None
    return lo, hi - lo + 1


def byte_pairs(spans: Iterable[tuple[int, int, int]]) -> list[tuple[int, int]]:
    """Expand (remote_offset, local_offset, length) triples into byte pairs."""
    out = []
    for remote, local, length in spans:
        out.extend((remote + i, local + i) for i in range(length))
    return out


def maximal_run_count(spans: Iterable[tuple[int, int, int]], cap: int | None = None) -> int:
    """Number of reads needed to cover the byte mapping with bi-contiguous runs.

    A chain continues from (r, l) to (r + 1, l + 1); every pair without such a
    predecessor starts a new chain. With ``cap``, a chain of m bytes costs
    ceil(m / cap) reads.
    """
    pairs = set(byte_pairs(spans))
    total = 0
    for r, l in pairs:
        if (r - 1, l - 1) in pairs:
            continue
        m = 1
        while (r + m, l + m) in pairs:
            m += 1
        total += 1 if cap is None else -(-m // cap)
    return total


@dataclass
class AllocatorModel:
    """Set-based reference for the block pool."""

    total: int
    free: set[int] = field(default_factory=set)
    owned: dict[object, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.free = set(range(self.total))

    def can_allocate(self, n: int) -> bool:
        return n <= len(self.free)

    def commit(self, rid, blocks: Sequence[int]) -> None:
        assert set(blocks) <= self.free, "allocated a block that was not free"
        assert len(set(blocks)) == len(blocks)
        self.free -= set(blocks)
        self.owned.setdefault(rid, []).extend(blocks)

    def release(self, rid) -> int:
        blocks = self.owned.pop(rid, [])
        self.free |= set(blocks)
        return len(blocks)


@dataclass
class VerbLogInterpreter:
    """Executes READ/WRITE verb logs one at a time against plain bytearrays."""

    regions: dict[tuple[str, int], bytearray]

    def run(self, log: Iterable[tuple]) -> None:
        for verb in log:
            kind = verb[0]
            if kind == "read":
                _, local, local_mr, local_off, remote, remote_mr, remote_off, length = verb
                src = self.regions[(remote, remote_mr)]
                if remote_off + length > len(src):
                    continue
                dst = self.regions[(local, local_mr)]
                if local_off + length > len(dst):
                    continue
                dst[local_off : local_off + length] = src[remote_off : remote_off + length]
            elif kind == "write":
                _, local, local_mr, local_off, remote, remote_mr, remote_off, length = verb
                src = self.regions[(local, local_mr)]
                dst = self.regions[(remote, remote_mr)]
                if remote_off + length > len(dst) or local_off + length > len(src):
                    continue
                dst[remote_off : remote_off + length] = src[local_off : local_off + length]
            else:
                raise ValueError(f"unknown verb {kind!r}")


def all_indices(shape: Sequence[int]):
    return itertools.product(*(range(e) for e in shape))


_MASK64 = (1 << 64) - 1


def _splitmix_finish(z: int) -> int:
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def payload_byte_reference(request_id: int, block_index: int, kv_index: int, byte_offset: int) -> int:
    """Scalar, pure-integer rendering of the synthetic KV payload."""
    golden = 0x9E3779B97F4A7C15
    key = _splitmix_finish(((request_id * golden) & _MASK64) ^ ((block_index << 8) | kv_index))
    return _splitmix_finish((key + byte_offset * golden) & _MASK64) >> 56
