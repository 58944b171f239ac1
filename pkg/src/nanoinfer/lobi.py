"""Low-rank adapter merging and calibration-driven mixed-precision assignment.

Adapters fold into base weights as additive deltas. Precision selection
quantizes one weight subblock at a time, measures the mean final-position
logit distance against the unmodified model over a calibration set, and
keeps the cheapest precision that minimizes it (ties go to fewer bits).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, ShapeError, ValidationError
from .model import ModelConfig, ModelWeights, forward
from .quant import (
    BLOCK_SIZE,
    PRECISIONS,
    QuantBlock,
    dequantize_block,
    dequantize_tensor,
    n_blocks,
    quantize_block,
)


@dataclass(frozen=True)
class LoraAdapter:
    target: str
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("adapter factors must be rank 2")
        if self.a.shape[1] != self.b.shape[0]:
            raise ShapeError(
                f"adapter rank disagrees: a is {self.a.shape}, b is {self.b.shape}"
            )

    @property
    def rank(self) -> int:
        return self.a.shape[1]


def random_adapter(shape: tuple[int, int], target: str, rank: int = 4, seed: int = 0) -> LoraAdapter:
    """Seeded random adapter conforming to a target tensor shape."""
    rows, cols = shape
    if rank < 1 or rank > min(rows, cols):
        raise DomainError(f"rank must be in [1, {min(rows, cols)}], got {rank}")
    rng = np.random.default_rng(seed)
    scale = np.float32(1.0 / np.sqrt(rows))
    return LoraAdapter(
        target=target,
        a=rng.standard_normal((rows, rank), dtype=np.float32) * scale,
        b=rng.standard_normal((rank, cols), dtype=np.float32) * scale,
    )


def merge_lora(weights: ModelWeights, adapters: list[LoraAdapter]) -> ModelWeights:
    """Fold each adapter's a @ b delta into its target tensor; inputs stay untouched."""
    seen: set[str] = set()
    updates: dict[str, np.ndarray] = {}
    for ad in adapters:
        if ad.target in seen:
            raise ValidationError(f"duplicate adapter for tensor {ad.target!r}")
        seen.add(ad.target)
        if ad.target not in weights.tensors:
            raise ValidationError(f"adapter targets unknown tensor {ad.target!r}")
        w = weights.tensors[ad.target]
        if w.ndim != 2:
            raise ShapeError(f"adapter target {ad.target!r} is not a matrix")
        if ad.a.shape[0] != w.shape[0] or ad.b.shape[1] != w.shape[1]:
            raise ShapeError(
                f"adapter for {ad.target!r} has shape {ad.a.shape}x{ad.b.shape}, "
                f"target is {w.shape}"
            )
        if ad.rank > min(w.shape):
            raise ShapeError(f"adapter rank {ad.rank} exceeds min dim of {w.shape}")
        delta = ad.a.astype(np.float64) @ ad.b.astype(np.float64)
        updates[ad.target] = (w.astype(np.float64) + delta).astype(np.float32)
    return weights.replace_tensors(updates)


ADAPTER_FILE_VERSION = 1


def _b64_f32(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _f32_b64(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise FormatError(f"payload holds {arr.size} floats, shape {tuple(shape)} needs {expected}")
    return arr.reshape(shape).astype(np.float32)


def save_adapters(adapters: list[LoraAdapter], path) -> None:
    doc = {
        "version": ADAPTER_FILE_VERSION,
        "adapters": [
            {
                "target": ad.target,
                "a_shape": list(ad.a.shape),
                "a": _b64_f32(ad.a),
                "b_shape": list(ad.b.shape),
                "b": _b64_f32(ad.b),
            }
            for ad in adapters
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_adapters(path) -> list[LoraAdapter]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or doc.get("version") != ADAPTER_FILE_VERSION:
        raise FormatError(f"unsupported adapter file: {path}")
    out = []
    for entry in doc.get("adapters", []):
        out.append(
            LoraAdapter(
                target=entry["target"],
                a=_f32_b64(entry["a"], entry["a_shape"]),
                b=_f32_b64(entry["b"], entry["b_shape"]),
            )
        )
    return out


def quantizable_tensors(weights: ModelWeights) -> list[str]:
    """Attention and MLP projection matrices; embeddings and norms stay float32."""
    return [
        name
        for name in weights.tensors
        if ".attn.w" in name or ".mlp.w" in name
    ]


@dataclass
class TensorPrecisions:
    block_size: int
    precisions: list[int]
    errors: dict[int, list[float]]


@dataclass
class PrecisionMap:
    tensors: dict[str, TensorPrecisions] = field(default_factory=dict)

    def total_blocks(self) -> int:
        return sum(len(tp.precisions) for tp in self.tensors.values())

    def fraction_at(self, precision: int) -> float:
        total = self.total_blocks()
        if total == 0:
            return 0.0
        hits = sum(tp.precisions.count(precision) for tp in self.tensors.values())
        return hits / total

    def fraction_at_most(self, precision: int) -> float:
        total = self.total_blocks()
        if total == 0:
            return 0.0
        hits = sum(
            sum(1 for p in tp.precisions if p <= precision) for tp in self.tensors.values()
        )
        return hits / total


def save_precision_map(pmap: PrecisionMap, path) -> None:
    doc = {
        name: {
            "block_size": tp.block_size,
            "precisions": tp.precisions,
            "errors": {str(p): errs for p, errs in sorted(tp.errors.items())},
        }
        for name, tp in pmap.tensors.items()
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_precision_map(path) -> PrecisionMap:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise FormatError(f"precision map must be a JSON object: {path}")
    tensors = {}
    for name, entry in doc.items():
        tensors[name] = TensorPrecisions(
            block_size=int(entry["block_size"]),
            precisions=[int(p) for p in entry["precisions"]],
            errors={int(p): [float(e) for e in errs] for p, errs in entry["errors"].items()},
        )
    return PrecisionMap(tensors=tensors)


def _check_calibration(weights: ModelWeights, calib) -> list[list[int]]:
    samples = [list(map(int, s)) for s in calib]
    if not samples:
        raise DomainError("calibration set is empty")
    for s in samples:
        if not s or len(s) > weights.config.max_seq_len:
            raise DomainError("calibration sample length outside [1, max_seq_len]")
    return samples


def _perturbed_weights(
    weights: ModelWeights, tensor_name: str, block_index: int, precision: int, block_size: int
) -> ModelWeights:
    tensor = weights.tensors[tensor_name]
    flat = tensor.astype(np.float32).ravel().copy()
    start = block_index * block_size
    if block_index < 0 or start >= flat.size:
        raise DomainError(
            f"block index {block_index} outside tensor {tensor_name!r} "
            f"({n_blocks(flat.size, block_size)} blocks)"
        )
    stop = min(start + block_size, flat.size)
    qb = quantize_block(flat[start:stop], precision, block_size)
    flat[start:stop] = dequantize_block(qb)
    return weights.replace_tensors({tensor_name: flat.reshape(tensor.shape)})


def _final_logit_distance(reference_logits, perturbed: ModelWeights, samples) -> float:
    dists = [
        float(np.linalg.norm(ref.astype(np.float64) - forward(perturbed, s)[-1].astype(np.float64)))
        for ref, s in zip(reference_logits, samples)
    ]
    return float(np.mean(dists))


def block_error(
    weights: ModelWeights,
    tensor_name: str,
    block_index: int,
    precision: int,
    calib,
    block_size: int = BLOCK_SIZE,
) -> float:
    """Mean L2 shift of final-position logits when one subblock is quantized."""
    if tensor_name not in weights.tensors:
        raise ValidationError(f"unknown tensor {tensor_name!r}")
    samples = _check_calibration(weights, calib)
    reference = [forward(weights, s)[-1] for s in samples]
    perturbed = _perturbed_weights(weights, tensor_name, block_index, precision, block_size)
    return _final_logit_distance(reference, perturbed, samples)


def assign_precisions(
    weights: ModelWeights,
    calib,
    candidates=PRECISIONS,
    block_size: int = BLOCK_SIZE,
    progress=None,
) -> PrecisionMap:
    """Pick the error-minimizing precision per subblock; ties go to fewer bits."""
    cands = sorted(set(int(c) for c in candidates))
    if not cands or any(c not in PRECISIONS for c in cands):
        raise DomainError(f"candidates must be a nonempty subset of {PRECISIONS}")
    samples = _check_calibration(weights, calib)
    reference = [forward(weights, s)[-1] for s in samples]
    pmap = PrecisionMap()
    for name in quantizable_tensors(weights):
        count = n_blocks(weights.tensors[name].size, block_size)
        errors: dict[int, list[float]] = {c: [] for c in cands}
        chosen: list[int] = []
        for bi in range(count):
            best_p, best_e = None, None
            for c in cands:
                perturbed = _perturbed_weights(weights, name, bi, c, block_size)
                e = _final_logit_distance(reference, perturbed, samples)
                errors[c].append(e)
                # ascending candidate order makes ties resolve to fewer bits
                if best_e is None or e < best_e:
                    best_p, best_e = c, e
            chosen.append(best_p)
            if progress is not None:
                progress(name, bi + 1, count)
        pmap.tensors[name] = TensorPrecisions(
            block_size=block_size, precisions=chosen, errors=errors
        )
    return pmap


@dataclass(eq=False)
class QuantizedModel:
    config: ModelConfig
    block_size: int
    blocks: dict[str, list[QuantBlock]]
    shapes: dict[str, tuple[int, ...]]
    raw: dict[str, np.ndarray]
    _materialized: ModelWeights | None = field(default=None, repr=False, compare=False)

    @property
    def packed_size(self) -> int:
        """Packed code bytes plus one float32 scale per block."""
        return sum(b.nbytes for blks in self.blocks.values() for b in blks)

    @property
    def model_bytes(self) -> int:
        """In-memory weight payload: packed blocks plus float32 leftovers."""
        return self.packed_size + sum(4 * t.size for t in self.raw.values())

    def materialized(self) -> ModelWeights:
        """Dequantize on first use; the result is cached for reuse."""
        if self._materialized is None:
            tensors = dict(self.raw)
            for name, blks in self.blocks.items():
                tensors[name] = dequantize_tensor(blks, self.shapes[name])
            self._materialized = ModelWeights(config=self.config, tensors=tensors)
        return self._materialized


def quantize_model(
    weights: ModelWeights, pmap: PrecisionMap, block_size: int | None = None
) -> QuantizedModel:
    """Pack every quantizable tensor according to the precision map."""
    quantizable = quantizable_tensors(weights)
    missing = sorted(set(quantizable) - set(pmap.tensors))
    if missing:
        raise ValidationError(f"precision map lacks tensors: {missing}")
    unknown = sorted(set(pmap.tensors) - set(quantizable))
    if unknown:
        raise ValidationError(f"precision map names non-quantizable tensors: {unknown}")
    blocks: dict[str, list[QuantBlock]] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    bs = None
    for name in quantizable:
        tp = pmap.tensors[name]
        if block_size is not None and tp.block_size != block_size:
            raise ValidationError(
                f"map block_size {tp.block_size} for {name!r} disagrees with {block_size}"
            )
        bs = tp.block_size if bs is None else bs
        if tp.block_size != bs:
            raise ValidationError("precision map mixes block sizes")
        tensor = weights.tensors[name]
        expect = n_blocks(tensor.size, tp.block_size)
        if len(tp.precisions) != expect:
            raise ValidationError(
                f"map for {name!r} lists {len(tp.precisions)} blocks, tensor has {expect}"
            )
        flat = tensor.ravel()
        blocks[name] = [
            quantize_block(flat[i * tp.block_size : (i + 1) * tp.block_size], p, tp.block_size)
            for i, p in enumerate(tp.precisions)
        ]
        shapes[name] = tuple(tensor.shape)
    raw = {
        name: tensor for name, tensor in weights.tensors.items() if name not in blocks
    }
    return QuantizedModel(
        config=weights.config, block_size=bs or BLOCK_SIZE, blocks=blocks, shapes=shapes, raw=raw
    )


def quantized_forward(qmodel: QuantizedModel, seq) -> np.ndarray:
    """Standard forward pass over the dequantized weights."""
    return forward(qmodel.materialized(), seq)
