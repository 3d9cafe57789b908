"""KV-cache tensor layouts and block-to-byte-span translation.

A layout describes one strided KV-cache tensor the way the owning worker
exposes it to peers: a base offset inside a registered memory region plus
per-dimension labels, extents and element strides. Peers use it to turn a
block id into the byte spans a one-sided read has to cover, without asking
the owner anything.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

BLOCK_DIM = "B"
KV_DIM = "KV"

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class LayoutError(ValueError):
    """Invalid layout, index or block id."""


class LayoutDecodeError(LayoutError):
    """Truncated or malformed layout frame."""


@dataclass(frozen=True)
class ByteSpan:
    offset: int
    length: int

    def __post_init__(self) -> None:
        if self.offset < 0:
            raise LayoutError(f"negative span offset {self.offset}")
        if self.length <= 0:
            raise LayoutError(f"span length must be positive, got {self.length}")

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class TensorLayout:
    """Strided tensor descriptor exchanged at connection time.

    Strides are in elements; ``element_size`` converts to bytes. The
    ``base_address`` is an offset into the owning memory region.
    """

    base_address: int
    dims: tuple[str, ...]
    shape: tuple[int, ...]
    stride: tuple[int, ...]
    element_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        n = len(self.dims)
        if n < 2 or len(self.shape) != n or len(self.stride) != n:
            raise LayoutError(
                f"dims/shape/stride must have equal length >= 2, got "
                f"{len(self.dims)}/{len(self.shape)}/{len(self.stride)}"
            )
        if len(set(self.dims)) != n:
            raise LayoutError(f"duplicate dimension labels in {self.dims}")
        for label in (BLOCK_DIM, KV_DIM):
            if label not in self.dims:
                raise LayoutError(f"layout needs a {label!r} dimension, got {self.dims}")
        if any(s <= 0 for s in self.shape):
            raise LayoutError(f"shape extents must be positive: {self.shape}")
        if any(s <= 0 for s in self.stride):
            raise LayoutError(f"strides must be positive: {self.stride}")
        if self.element_size <= 0:
            raise LayoutError("element_size must be positive")
        if self.base_address < 0:
            raise LayoutError("base_address must be non-negative")
        self._check_no_aliasing()

    def _check_no_aliasing(self) -> None:
        # Mixed-radix test: visiting dims by increasing stride, each stride must
        # clear the farthest element reachable through the smaller ones. This is
        # sufficient for distinct offsets; exotic interleavings are refused.
        reach = 0
        dims = sorted(
            ((e, s) for e, s in zip(self.shape, self.stride) if e > 1),
            key=lambda p: p[1],
        )
        for extent, stride in dims:
            if stride <= reach:
                raise LayoutError(
                    f"layout aliases: stride {stride} overlaps elements up to {reach}"
                )
            reach += (extent - 1) * stride

    @classmethod
    def canonical(
        cls,
        dims: Sequence[str],
        shape: Sequence[int],
        element_size: int,
        base_address: int = 0,
    ) -> "TensorLayout":
        """Row-major (C-order) layout for the given dims and shape."""
        stride = [1] * len(shape)
        for i in range(len(shape) - 2, -1, -1):
            stride[i] = stride[i + 1] * shape[i + 1]
        return cls(base_address, tuple(dims), tuple(shape), tuple(stride), element_size)

    @classmethod
    def paged_kv(
        cls,
        num_blocks: int,
        block_tokens: int,
        heads: int,
        head_dim: int,
        element_size: int,
        base_address: int = 0,
    ) -> "TensorLayout":
        """[B][KV][L][H][D] labels with KV-major storage.

        All K sub-tensors come first, block after block, then all V
        sub-tensors, so consecutive blocks are contiguous within each half.
        """
        span = block_tokens * heads * head_dim
        return cls(
            base_address,
            (BLOCK_DIM, KV_DIM, "L", "H", "D"),
            (num_blocks, 2, block_tokens, heads, head_dim),
            (span, num_blocks * span, heads * head_dim, head_dim, 1),
            element_size,
        )

    def axis(self, label: str) -> int:
        try:
            return self.dims.index(label)
        except ValueError:
            raise LayoutError(f"no dimension {label!r} in {self.dims}") from None

    @property
    def num_blocks(self) -> int:
        return self.shape[self.axis(BLOCK_DIM)]

    @property
    def num_kv(self) -> int:
        return self.shape[self.axis(KV_DIM)]

    @property
    def nbytes(self) -> int:
        """Bytes from base_address to one past the last element."""
        last = sum((e - 1) * s for e, s in zip(self.shape, self.stride))
        return (last + 1) * self.element_size


def element_offset(layout: TensorLayout, index: Sequence[int]) -> int:
    """Base-relative byte offset of ``index``: (index . stride) * element_size."""
    if len(index) != len(layout.dims):
        raise LayoutError(
            f"index arity {len(index)} does not match {len(layout.dims)} dims"
        )
    total = 0
    for i, extent, stride, label in zip(index, layout.shape, layout.stride, layout.dims):
        if not 0 <= i < extent:
            raise LayoutError(f"index {i} out of bounds for {label}={extent}")
        total += i * stride
    return total * layout.element_size


def block_span_bytes(layout: TensorLayout) -> int:
    """Bytes of one contiguous (block, KV) sub-tensor.

    Takes the trailing dimension with the largest stride and multiplies its
    extent by its stride. Refuses layouts whose trailing dimensions do not
    form one gap-free range.
    """
    trailing = [
        (layout.stride[d], layout.shape[d], layout.dims[d])
        for d in range(len(layout.dims))
        if layout.dims[d] not in (BLOCK_DIM, KV_DIM)
    ]
    if not trailing:
        return layout.element_size
    trailing.sort()
    expected = 1
    for stride, extent, label in trailing:
        if stride != expected:
            raise LayoutError(
                f"trailing dims are not contiguous: {label} has stride {stride}, "
                f"expected {expected}"
            )
        expected = stride * extent
    stride, extent, _ = trailing[-1]
    return extent * stride * layout.element_size


def block_to_spans(layout: TensorLayout, block_id: int) -> list[ByteSpan]:
    """One span per KV sub-tensor of ``block_id``, as region offsets."""
    b_axis = layout.axis(BLOCK_DIM)
    kv_axis = layout.axis(KV_DIM)
    if not 0 <= block_id < layout.shape[b_axis]:
        raise LayoutError(
            f"block {block_id} out of range [0, {layout.shape[b_axis]})"
        )
    length = block_span_bytes(layout)
    spans = []
    index = [0] * len(layout.dims)
    index[b_axis] = block_id
    for kv in range(layout.shape[kv_axis]):
        index[kv_axis] = kv
        spans.append(ByteSpan(layout.base_address + element_offset(layout, index), length))
    return spans


def encode_layout(layout: TensorLayout) -> bytes:
    """Little-endian frame: u64 base, u8 ndims, labels, u64 shape, u64 stride, u32 elem."""
    out = bytearray(_U64.pack(layout.base_address))
    out += _U8.pack(len(layout.dims))
    for label in layout.dims:
        raw = label.encode("utf-8")
        if len(raw) > 255:
            raise LayoutError(f"dimension label too long: {label!r}")
        out += _U8.pack(len(raw)) + raw
    n = len(layout.dims)
    out += struct.pack(f"<{n}Q", *layout.shape)
    out += struct.pack(f"<{n}Q", *layout.stride)
    out += _U32.pack(layout.element_size)
    return bytes(out)


def decode_layout(data: bytes) -> TensorLayout:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise LayoutDecodeError(
                f"layout frame truncated at byte {pos}: need {n}, have {len(view) - pos}"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (base,) = _U64.unpack(take(8))
    (ndims,) = _U8.unpack(take(1))
    dims = []
    for _ in range(ndims):
        (ln,) = _U8.unpack(take(1))
        try:
            dims.append(bytes(take(ln)).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise LayoutDecodeError(f"bad dimension label: {exc}") from None
    shape = struct.unpack(f"<{ndims}Q", take(8 * ndims))
    stride = struct.unpack(f"<{ndims}Q", take(8 * ndims))
    (element_size,) = _U32.unpack(take(4))
    if pos != len(view):
        raise LayoutDecodeError(f"{len(view) - pos} trailing bytes after layout frame")
    try:
        return TensorLayout(base, tuple(dims), shape, stride, element_size)
    except LayoutDecodeError:
        raise
    except LayoutError as exc:
        raise LayoutDecodeError(str(exc)) from None
