"""Block-wise symmetric linear quantization to 4-, 8- or 16-bit integer codes.

A block covers up to BLOCK_SIZE weights. Codes are signed, zero-point
free, and packed little-endian (two's-complement nibbles for 4-bit).
The stored scale is a float32 value so that serialized blocks reproduce
in-memory blocks exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, NumericError

BLOCK_SIZE = 32
PRECISIONS = (4, 8, 16)


def code_range(precision: int) -> int:
    """Largest representable code magnitude for a signed precision."""
    if precision not in PRECISIONS:
        raise DomainError(f"precision must be one of {PRECISIONS}, got {precision}")
    return (1 << (precision - 1)) - 1


@dataclass(frozen=True)
class QuantBlock:
    precision: int
    scale: float
    packed: bytes
    original_count: int

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise DomainError(f"precision must be one of {PRECISIONS}, got {self.precision}")
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale}")
        if self.original_count < 0 or self.original_count > self.block_size:
            raise FormatError(
                f"original_count {self.original_count} exceeds packed capacity {self.block_size}"
            )

    @property
    def block_size(self) -> int:
        return len(self.packed) * 8 // self.precision

    @property
    def nbytes(self) -> int:
        """Packed codes plus the float32 scale."""
        return len(self.packed) + 4


def _pack_codes(codes: np.ndarray, precision: int) -> bytes:
    if precision == 4:
        nibbles = (codes & 0xF).astype(np.uint8)
        return bytes(nibbles[0::2] | (nibbles[1::2] << 4))
    if precision == 8:
        return codes.astype(np.int8).tobytes()
    return codes.astype("<i2").tobytes()


def _unpack_codes(packed: bytes, precision: int) -> np.ndarray:
    if precision == 4:
        raw = np.frombuffer(packed, dtype=np.uint8)
        nibbles = np.empty(raw.size * 2, dtype=np.int64)
        nibbles[0::2] = raw & 0xF
        nibbles[1::2] = raw >> 4
        nibbles[nibbles >= 8] -= 16
        return nibbles
    if precision == 8:
        return np.frombuffer(packed, dtype=np.int8).astype(np.int64)
    return np.frombuffer(packed, dtype="<i2").astype(np.int64)


def quantize_block(weights, precision: int, block_size: int = BLOCK_SIZE) -> QuantBlock:
    """Quantize up to block_size weights; all-zero blocks get scale 1 and zero codes."""
    qmax = code_range(precision)
    if block_size < 1 or block_size % 2 != 0:
        raise DomainError(f"block_size must be a positive even number, got {block_size}")
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0 or w.size > block_size:
        raise DomainError(f"block holds 1..{block_size} weights, got {w.size}")
    if not np.all(np.isfinite(w)):
        raise NumericError("quantize_block: weights contain NaN or Inf")
    maxabs = float(np.abs(w).max())
    if maxabs == 0.0:
        scale = 1.0
        codes = np.zeros(block_size, dtype=np.int64)
    else:
        # float32 scale so file round trips reproduce in-memory blocks bit-exactly
        scale = float(np.float32(maxabs / qmax))
        codes = np.zeros(block_size, dtype=np.int64)
        codes[: w.size] = np.clip(np.round(w / scale), -qmax, qmax).astype(np.int64)
    return QuantBlock(
        precision=precision,
        scale=scale,
        packed=_pack_codes(codes, precision),
        original_count=int(w.size),
    )


def dequantize_block(block: QuantBlock) -> np.ndarray:
    """Reconstruct the block's weights as float32 (code * scale)."""
    expected = block.block_size * block.precision // 8
    if len(block.packed) != expected or block.block_size == 0:
        raise FormatError(
            f"packed payload of {len(block.packed)} bytes is invalid for "
            f"{block.precision}-bit codes"
        )
    codes = _unpack_codes(block.packed, block.precision)
    qmax = code_range(block.precision)
    if np.any(np.abs(codes[: block.original_count]) > qmax):
        raise FormatError("packed codes exceed the signed range for this precision")
    return (codes[: block.original_count] * block.scale).astype(np.float32)


def quantize_tensor(tensor, precision: int, block_size: int = BLOCK_SIZE) -> list[QuantBlock]:
    """Split a tensor row-major into blocks and quantize each at one precision."""
    flat = np.asarray(tensor, dtype=np.float32).ravel()
    if flat.size == 0:
        raise DomainError("quantize_tensor: empty tensor")
    return [
        quantize_block(flat[i : i + block_size], precision, block_size)
        for i in range(0, flat.size, block_size)
    ]


def dequantize_tensor(blocks: list[QuantBlock], shape) -> np.ndarray:
    """Concatenate dequantized blocks and restore the original shape."""
    parts = [dequantize_block(b) for b in blocks]
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise FormatError(f"blocks carry {flat.size} weights, shape {tuple(shape)} needs {expected}")
    return flat.reshape(shape)


def n_blocks(numel: int, block_size: int = BLOCK_SIZE) -> int:
    return (numel + block_size - 1) // block_size
