"""Binary checkpoint formats.

Version 1 stores float32 tensor payloads; version 2 replaces quantizable
tensor payloads with block streams (u8 precision, f32 scale, packed
codes per block). Both share the header: magic "HOLA", u32 version,
then five u32 config fields, all little-endian, no padding.
"""

from __future__ import annotations

import struct
from io import BufferedReader

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .lobi import QuantizedModel
from .model import ModelConfig, ModelWeights, expected_shapes
from .quant import QuantBlock, n_blocks

MAGIC = b"HOLA"
VERSION_WEIGHTS = 1
VERSION_QUANTIZED = 2

_KIND_RAW = 0
_KIND_BLOCKS = 1


def _read_exact(f: BufferedReader, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file ends inside {what} ({len(data)}/{n} bytes)")
    return data


def _read_header(f: BufferedReader) -> tuple[int, ModelConfig]:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version not in (VERSION_WEIGHTS, VERSION_QUANTIZED):
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    fields = struct.unpack("<5I", _read_exact(f, 20, "config block"))
    return version, ModelConfig(*fields)


def _write_header(f, version: int, config: ModelConfig) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<I", version))
    f.write(
        struct.pack(
            "<5I",
            config.n_layers,
            config.d_model,
            config.n_heads,
            config.vocab_size,
            config.max_seq_len,
        )
    )


def _write_tensor_intro(f, name: str, shape: tuple[int, ...]) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", len(shape)))
    for dim in shape:
        f.write(struct.pack("<I", dim))


def _read_tensor_intro(f: BufferedReader) -> tuple[str, tuple[int, ...]]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    (rank,) = struct.unpack("<B", _read_exact(f, 1, "tensor rank"))
    if rank < 1 or rank > 2:
        raise FormatError(f"tensor {name!r} declares rank {rank}, expected 1 or 2")
    dims = tuple(
        struct.unpack("<I", _read_exact(f, 4, f"dims of {name!r}"))[0] for _ in range(rank)
    )
    return name, dims


def _ordered_names(weights_names, config: ModelConfig) -> list[str]:
    # canonical order first so save -> load -> save is byte stable
    canon = [n for n in expected_shapes(config) if n in weights_names]
    rest = sorted(set(weights_names) - set(canon))
    return canon + rest


def save_weights(weights: ModelWeights, path) -> None:
    weights.audit()
    with open(path, "wb") as f:
        _write_header(f, VERSION_WEIGHTS, weights.config)
        names = _ordered_names(weights.tensors, weights.config)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = weights.tensors[name]
            _write_tensor_intro(f, name, tuple(tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        version, config = _read_header(f)
        if version != VERSION_WEIGHTS:
            raise VersionMismatchError(
                f"expected a version {VERSION_WEIGHTS} weight file, got version {version}"
            )
        return _load_weight_table(f, config)


def _load_weight_table(f: BufferedReader, config: ModelConfig) -> ModelWeights:
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, dims = _read_tensor_intro(f)
        numel = int(np.prod(dims))
        raw = _read_exact(f, 4 * numel, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    weights = ModelWeights(config=config, tensors=tensors)
    weights.audit()
    return weights


def save_quantized(qmodel: QuantizedModel, path) -> None:
    with open(path, "wb") as f:
        _write_header(f, VERSION_QUANTIZED, qmodel.config)
        all_names = list(qmodel.raw) + list(qmodel.blocks)
        names = _ordered_names(all_names, qmodel.config)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            if name in qmodel.raw:
                tensor = qmodel.raw[name]
                _write_tensor_intro(f, name, tuple(tensor.shape))
                f.write(struct.pack("<B", _KIND_RAW))
                f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
            else:
                blocks = qmodel.blocks[name]
                _write_tensor_intro(f, name, qmodel.shapes[name])
                f.write(struct.pack("<B", _KIND_BLOCKS))
                f.write(struct.pack("<II", qmodel.block_size, len(blocks)))
                for b in blocks:
                    f.write(struct.pack("<Bf", b.precision, np.float32(b.scale)))
                    f.write(b.packed)


def load_quantized(path) -> QuantizedModel:
    with open(path, "rb") as f:
        version, config = _read_header(f)
        if version != VERSION_QUANTIZED:
            raise VersionMismatchError(
                f"expected a version {VERSION_QUANTIZED} quantized file, got version {version}"
            )
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        raw: dict[str, np.ndarray] = {}
        blocks: dict[str, list[QuantBlock]] = {}
        shapes: dict[str, tuple[int, ...]] = {}
        block_size = None
        for _ in range(count):
            name, dims = _read_tensor_intro(f)
            numel = int(np.prod(dims))
            (kind,) = struct.unpack("<B", _read_exact(f, 1, f"storage kind of {name!r}"))
            if kind == _KIND_RAW:
                payload = _read_exact(f, 4 * numel, f"payload of {name!r}")
                raw[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            elif kind == _KIND_BLOCKS:
                bs, nb = struct.unpack("<II", _read_exact(f, 8, f"block header of {name!r}"))
                if nb != n_blocks(numel, bs):
                    raise FormatError(
                        f"tensor {name!r} declares {nb} blocks, shape {dims} needs "
                        f"{n_blocks(numel, bs)}"
                    )
                block_size = bs if block_size is None else block_size
                if bs != block_size:
                    raise FormatError("quantized file mixes block sizes")
                tail = numel - (nb - 1) * bs
                blist = []
                for bi in range(nb):
                    precision, scale = struct.unpack(
                        "<Bf", _read_exact(f, 5, f"block meta of {name!r}")
                    )
                    if precision not in (4, 8, 16):
                        raise FormatError(f"block precision {precision} invalid in {name!r}")
                    packed = _read_exact(f, bs * precision // 8, f"codes of {name!r}")
                    blist.append(
                        QuantBlock(
                            precision=precision,
                            scale=float(np.float32(scale)),
                            packed=packed,
                            original_count=bs if bi < nb - 1 else tail,
                        )
                    )
                blocks[name] = blist
                shapes[name] = dims
            else:
                raise FormatError(f"unknown storage kind {kind} for tensor {name!r}")
        qmodel = QuantizedModel(
            config=config,
            block_size=block_size or 0,
            blocks=blocks,
            shapes=shapes,
            raw=raw,
        )
        # materializing runs the shape audit against the declared config
        qmodel.materialized().audit()
        return qmodel


def load_checkpoint(path):
    """Load either checkpoint flavor, dispatching on the version field."""
    with open(path, "rb") as f:
        version, _ = _read_header(f)
    if version == VERSION_WEIGHTS:
        return load_weights(path)
    return load_quantized(path)
