from __future__ import annotations

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvdirect import oracles
from kvdirect.tensor_meta import (
    ByteSpan,
    LayoutDecodeError,
    LayoutError,
    TensorLayout,
    block_span_bytes,
    block_to_spans,
    decode_layout,
    element_offset,
    encode_layout,
)

# Worked-example tensor: cache[B][KV][L][H][D], K tensors of all blocks first.
FIG5 = TensorLayout(
    base_address=0,
    dims=("B", "KV", "L", "H", "D"),
    shape=(10, 2, 16, 2, 128),
    stride=(4096, 40960, 256, 128, 1),
    element_size=2,
)


class TestElementOffset:
    def test_block8_k(self):
        assert element_offset(FIG5, (8, 0, 0, 0, 0)) == 65536

    def test_origin(self):
        assert element_offset(FIG5, (0, 0, 0, 0, 0)) == 0

    def test_block8_v(self):
        # The printed figure has 147453; the dot product gives 147456.
        assert element_offset(FIG5, (8, 1, 0, 0, 0)) == 147456

    def test_out_of_bounds(self):
        with pytest.raises(LayoutError):
            element_offset(FIG5, (10, 0, 0, 0, 0))

    def test_arity_mismatch(self):
        with pytest.raises(LayoutError, match="arity"):
            element_offset(FIG5, (1, 0, 0))


class TestBlockSpan:
    def test_fig5(self):
        assert block_span_bytes(FIG5) == 8192

    def test_single_element(self):
        layout = TensorLayout.canonical(("B", "KV", "L", "H", "D"), (3, 2, 1, 1, 1), 2)
        assert block_span_bytes(layout) == 2

    def test_canonical_l16_h2_d64(self):
        layout = TensorLayout.canonical(("B", "KV", "L", "H", "D"), (4, 2, 16, 2, 64), 2)
        assert block_span_bytes(layout) == 4096

    def test_non_contiguous_trailing_rejected(self):
        # H stride leaves a gap after each D row.
        layout = TensorLayout(0, ("B", "KV", "L", "H", "D"), (2, 2, 4, 2, 8),
                              (1024, 2048, 32, 16, 1), 2)
        with pytest.raises(LayoutError, match="contiguous"):
            block_span_bytes(layout)

    def test_other_dimension_order(self):
        layout = TensorLayout.canonical(("KV", "B", "L", "H", "D"), (2, 10, 16, 2, 128), 2)
        assert block_span_bytes(layout) == 16 * 2 * 128 * 2
        spans = block_to_spans(layout, 3)
        assert spans == [ByteSpan(3 * 8192, 8192), ByteSpan(10 * 8192 + 3 * 8192, 8192)]


class TestBlockToSpans:
    def test_block8(self):
        assert block_to_spans(FIG5, 8) == [ByteSpan(65536, 8192), ByteSpan(147456, 8192)]

    def test_block0(self):
        assert block_to_spans(FIG5, 0) == [ByteSpan(0, 8192), ByteSpan(81920, 8192)]

    def test_block1_k_adjacent_to_block0_k(self):
        assert block_to_spans(FIG5, 1)[0] == ByteSpan(8192, 8192)

    def test_out_of_range(self):
        with pytest.raises(LayoutError):
            block_to_spans(FIG5, 10)

    def test_base_address_shifts_spans(self):
        shifted = TensorLayout(4096, FIG5.dims, FIG5.shape, FIG5.stride, 2)
        assert block_to_spans(shifted, 8)[0] == ByteSpan(4096 + 65536, 8192)

    def test_partition(self):
        seen = bytearray(FIG5.nbytes)
        for b in range(FIG5.num_blocks):
            for span in block_to_spans(FIG5, b):
                assert not any(seen[span.offset : span.end])
                seen[span.offset : span.end] = b"\x01" * span.length
        assert sum(seen) == 10 * 2 * 8192 == FIG5.nbytes


class TestLayoutValidation:
    def test_missing_block_dim(self):
        with pytest.raises(LayoutError):
            TensorLayout(0, ("X", "KV", "L"), (2, 2, 4), (8, 4, 1), 2)

    def test_duplicate_label(self):
        with pytest.raises(LayoutError):
            TensorLayout(0, ("B", "B", "KV"), (2, 2, 2), (4, 2, 1), 2)

    def test_aliasing_rejected(self):
        with pytest.raises(LayoutError, match="alias"):
            TensorLayout(0, ("B", "KV", "L"), (4, 2, 4), (4, 4, 1), 2)

    def test_zero_extent(self):
        with pytest.raises(LayoutError):
            TensorLayout(0, ("B", "KV", "L"), (0, 2, 4), (8, 4, 1), 2)


class TestLayoutCodec:
    def test_fig5_round_trip(self):
        decoded = decode_layout(encode_layout(FIG5))
        assert decoded == FIG5
        assert decoded.stride == (4096, 40960, 256, 128, 1)

    def test_encoding_is_stable(self):
        raw = encode_layout(FIG5)
        assert raw[:9] == struct.pack("<QB", 0, 5)
        assert raw[9:11] == b"\x01B"
        assert raw[-4:] == struct.pack("<I", 2)
        assert encode_layout(FIG5) == raw

    def test_reencode_identity(self):
        raw = encode_layout(FIG5)
        assert encode_layout(decode_layout(raw)) == raw

    def test_arity_mismatch_frame(self):
        # Five labels announced but only four shape/stride entries present.
        raw = bytearray(struct.pack("<QB", 0, 5))
        for label in FIG5.dims:
            raw += bytes([len(label)]) + label.encode()
        raw += struct.pack("<4Q", *FIG5.shape[:4]) + struct.pack("<4Q", *FIG5.stride[:4])
        raw += struct.pack("<I", 2)
        with pytest.raises(LayoutDecodeError):
            decode_layout(bytes(raw))

    @pytest.mark.parametrize("cut", [0, 5, 9, 20, 60])
    def test_truncated(self, cut):
        with pytest.raises(LayoutDecodeError):
            decode_layout(encode_layout(FIG5)[:cut])

    def test_trailing_garbage(self):
        with pytest.raises(LayoutDecodeError, match="trailing"):
            decode_layout(encode_layout(FIG5) + b"\x00")


@st.composite
def small_layouts(draw):
    """Random valid layouts (any dim order) holding at most ~10^4 elements."""
    inner = draw(st.lists(st.integers(1, 6), min_size=1, max_size=3))
    nb = draw(st.integers(1, 6))
    nkv = draw(st.integers(1, 2))
    labels = ["B", "KV"] + [f"T{i}" for i in range(len(inner))]
    extents = [nb, nkv] + inner
    order = draw(st.permutations(range(len(labels))))
    dims = [labels[i] for i in order]
    shape = [extents[i] for i in order]
    elem = draw(st.sampled_from([1, 2, 4]))
    base = draw(st.integers(0, 64))
    # Trailing dims stay row-major among themselves; B and KV strides are placed
    # above the sub-tensor in a random relative order, optionally padded.
    sub = 1
    strides = {}
    for label in reversed(labels[2:]):
        strides[label] = sub
        sub *= extents[labels.index(label)]
    pad = draw(st.integers(0, 3))
    if draw(st.booleans()):
        strides["B"] = sub + pad
        strides["KV"] = strides["B"] * nb + draw(st.integers(0, 3))
    else:
        strides["KV"] = sub + pad
        strides["B"] = strides["KV"] * nkv + draw(st.integers(0, 3))
    stride = [strides[d] for d in dims]
    return TensorLayout(base, tuple(dims), tuple(shape), tuple(stride), elem)


class TestAgainstOracles:
    @settings(max_examples=200, deadline=None)
    @given(small_layouts())
    def test_offsets_match_enumeration(self, layout):
        expected = oracles.strided_offsets(layout.shape, layout.stride, layout.element_size)
        for index in oracles.all_indices(layout.shape):
            assert element_offset(layout, index) == expected[index]

    @settings(max_examples=200, deadline=None)
    @given(small_layouts())
    def test_no_aliasing(self, layout):
        offsets = oracles.strided_offsets(layout.shape, layout.stride, 1).ravel()
        assert len(set(offsets.tolist())) == offsets.size

    @settings(max_examples=200, deadline=None)
    @given(small_layouts())
    def test_spans_match_enumerated_subtensors(self, layout):
        b_axis, kv_axis = layout.axis("B"), layout.axis("KV")
        covered = []
        for block in range(layout.num_blocks):
            spans = block_to_spans(layout, block)
            assert len(spans) == layout.num_kv
            for kv, span in enumerate(spans):
                addrs = oracles.subtensor_bytes(
                    layout.shape, layout.stride, layout.element_size, {b_axis: block, kv_axis: kv}
                )
                assert oracles.contiguous_range(addrs) == (
                    span.offset - layout.base_address,
                    span.length,
                )
                covered.append(span)
        total = sum(s.length for s in covered)
        assert total == layout.num_blocks * layout.num_kv * block_span_bytes(layout)
        covered.sort(key=lambda s: s.offset)
        for a, b in zip(covered, covered[1:]):
            assert a.end <= b.offset

    @settings(max_examples=100, deadline=None)
    @given(small_layouts())
    def test_codec_round_trip(self, layout):
        raw = encode_layout(layout)
        assert decode_layout(raw) == layout
        assert encode_layout(decode_layout(raw)) == raw
