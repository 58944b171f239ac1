import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoinfer.errors import DomainError, FormatError
from nanoinfer.quant import (
    BLOCK_SIZE,
    PRECISIONS,
    QuantBlock,
    dequantize_block,
    dequantize_tensor,
    n_blocks,
    quantize_block,
    quantize_tensor,
)


class TestQuantizeBlock:
    @pytest.mark.parametrize("precision", PRECISIONS)
    def test_zero_block(self, precision):
        block = quantize_block(np.zeros(32, np.float32), precision)
        assert block.scale == 1.0
        np.testing.assert_array_equal(dequantize_block(block), np.zeros(32, np.float32))

    def test_endpoints_at_8_bits(self):
        block = quantize_block([-1.0, 1.0], 8)
        assert block.scale == pytest.approx(1 / 127)
        codes = np.frombuffer(block.packed, dtype=np.int8)
        assert codes[0] == -127 and codes[1] == 127
        np.testing.assert_allclose(dequantize_block(block), [-1.0, 1.0], atol=1e-6)

    def test_round_trip_bound_16_bits(self):
        # exhaustive per-element bound at the finest precision
        rng = np.random.default_rng(3)
        w = rng.standard_normal(32).astype(np.float32)
        block = quantize_block(w, 16)
        err = np.abs(dequantize_block(block).astype(np.float64) - w.astype(np.float64))
        assert (err <= block.scale / 2 + 1e-12).all()

    @pytest.mark.parametrize("precision", PRECISIONS)
    def test_round_trip_bound_all_precisions(self, precision):
        rng = np.random.default_rng(4)
        for _ in range(20):
            w = (rng.standard_normal(32) * rng.uniform(0.01, 10)).astype(np.float32)
            block = quantize_block(w, precision)
            err = np.abs(dequantize_block(block).astype(np.float64) - w.astype(np.float64))
            # scale/2 plus one float32 ulp of the largest reconstructed value,
            # the representation error of storing code * scale as float32
            slack = float(np.spacing(np.float32(abs(w).max())))
            assert (err <= block.scale / 2 + slack).all()

    def test_coarse_precision_no_better_in_mse(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            w = rng.standard_normal(32).astype(np.float32)
            mse = {}
            for p in (4, 16):
                back = dequantize_block(quantize_block(w, p))
                mse[p] = float(np.mean((back.astype(np.float64) - w.astype(np.float64)) ** 2))
            assert mse[4] >= mse[16]

    def test_tail_block(self):
        w = np.arange(5, dtype=np.float32)
        block = quantize_block(w, 8)
        assert block.original_count == 5
        assert block.block_size == BLOCK_SIZE
        assert dequantize_block(block).shape == (5,)

    def test_rejects_bad_inputs(self):
        with pytest.raises(DomainError):
            quantize_block(np.zeros(33, np.float32), 8)
        with pytest.raises(DomainError):
            quantize_block(np.zeros(4, np.float32), 7)
        with pytest.raises(DomainError):
            quantize_block([], 8)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-100, 100, width=32), min_size=1, max_size=32),
        st.sampled_from(PRECISIONS),
    )
    def test_requantize_is_idempotent(self, values, precision):
        first = quantize_block(np.asarray(values, np.float32), precision)
        second = quantize_block(dequantize_block(first), precision)
        assert second.packed == first.packed


class TestDequantizeBlock:
    def test_truncated_packed_rejected(self):
        block = quantize_block(np.ones(32, np.float32), 16)
        bad = QuantBlock(
            precision=16, scale=block.scale, packed=block.packed[:-1], original_count=16
        )
        with pytest.raises(FormatError):
            dequantize_block(bad)

    def test_truncated_8bit_block_rejected(self):
        block = quantize_block(np.ones(32, np.float32), 8)
        with pytest.raises(FormatError):
            QuantBlock(precision=8, scale=block.scale, packed=block.packed[:-1], original_count=32)

    def test_out_of_range_code_rejected(self):
        # -128 is outside the symmetric 8-bit range [-127, 127]
        packed = np.full(32, -128, dtype=np.int8).tobytes()
        bad = QuantBlock(precision=8, scale=1.0, packed=packed, original_count=32)
        with pytest.raises(FormatError):
            dequantize_block(bad)

    def test_count_exceeding_capacity_rejected(self):
        with pytest.raises(FormatError):
            QuantBlock(precision=8, scale=1.0, packed=bytes(32), original_count=33)

    def test_nbytes_accounting(self):
        for precision in PRECISIONS:
            block = quantize_block(np.ones(32, np.float32), precision)
            assert block.nbytes == 32 * precision // 8 + 4


class TestTensorHelpers:
    def test_blocks_cover_tensor(self):
        rng = np.random.default_rng(6)
        t = rng.standard_normal((5, 13)).astype(np.float32)
        blocks = quantize_tensor(t, 16)
        assert len(blocks) == n_blocks(t.size)
        back = dequantize_tensor(blocks, t.shape)
        assert back.shape == t.shape
        assert np.abs(back - t).max() <= max(b.scale for b in blocks) / 2 + 1e-9

    def test_packed_size_ratio(self):
        t = np.random.default_rng(7).standard_normal((8, 32)).astype(np.float32)
        sizes = {p: sum(b.nbytes for b in quantize_tensor(t, p)) for p in PRECISIONS}
        n = n_blocks(t.size)
        # codes scale 1:2:4; each block also carries a 4-byte scale
        assert sizes[8] - 4 * n == 2 * (sizes[4] - 4 * n)
        assert sizes[16] - 4 * n == 4 * (sizes[4] - 4 * n)
