"""Deterministic toy decoder-only transformer.

Pre-norm attention and MLP blocks with learned positional embeddings.
Weights are float32; the forward pass is pure, causal and bit-stable
for identical inputs. Reverse-mode differentiation is implemented for
the input-embedding path only, which is what the retrieval router's
complexity score needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DomainError, ShapeAuditError
from .tokenizer import VOCAB_SIZE

LN_EPS = 1e-5
MLP_RATIO = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise DomainError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )


# Desk-scale defaults keep the draft strictly smaller than the verifier;
# the large presets restore the reference sizes behind a CLI flag.
DRAFT_PRESET = ModelConfig(n_layers=2, d_model=64, n_heads=2)
VERIFIER_PRESET = ModelConfig(n_layers=4, d_model=128, n_heads=4)
LARGE_DRAFT_PRESET = ModelConfig(n_layers=6, d_model=512, n_heads=8)
LARGE_VERIFIER_PRESET = ModelConfig(n_layers=12, d_model=768, n_heads=12)

PRESETS = {
    "draft": DRAFT_PRESET,
    "verifier": VERIFIER_PRESET,
    "draft-large": LARGE_DRAFT_PRESET,
    "verifier-large": LARGE_VERIFIER_PRESET,
}


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and their shapes, fully determined by config."""
    d, h = config.d_model, MLP_RATIO * config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.wq"] = (d, d)
        shapes[f"{p}.attn.wk"] = (d, d)
        shapes[f"{p}.attn.wv"] = (d, d)
        shapes[f"{p}.attn.wo"] = (d, d)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.w1"] = (d, h)
        shapes[f"{p}.mlp.w2"] = (h, d)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["out_proj"] = (d, config.vocab_size)
    return shapes


@dataclass(eq=False)
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    _audited: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.setflags(write=False)

    def audit(self) -> None:
        """Verify every tensor exists with the shape the config dictates."""
        if self._audited:
            return
        expected = expected_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(expected))
        if missing or extra:
            raise ShapeAuditError(f"tensor set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            got = self.tensors[name].shape
            if tuple(got) != shape:
                raise ShapeAuditError(f"{name}: expected shape {shape}, got {tuple(got)}")
        self._audited = True

    @property
    def nbytes(self) -> int:
        """Full-precision payload size in bytes (4 bytes per weight)."""
        return sum(4 * t.size for t in self.tensors.values())

    def replace_tensors(self, updates: dict[str, np.ndarray]) -> "ModelWeights":
        """New weights with some tensors swapped; the receiver is untouched."""
        tensors = dict(self.tensors)
        tensors.update({k: np.ascontiguousarray(v, dtype=np.float32) for k, v in updates.items()})
        return ModelWeights(config=self.config, tensors=tensors)


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded random weights: matrices are zero-mean with 1/sqrt(d_model) scale."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(config.d_model)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = rng.standard_normal(shape, dtype=np.float32) * np.float32(scale)
    return ModelWeights(config=config, tensors=tensors)


def _check_sequence(config: ModelConfig, seq) -> list[int]:
    ids = [int(t) for t in seq]
    if not ids:
        raise DomainError("sequence must be nonempty")
    if len(ids) > config.max_seq_len:
        raise CapacityError(f"sequence of {len(ids)} tokens exceeds max_seq_len {config.max_seq_len}")
    for t in ids:
        if t < 0 or t >= config.vocab_size:
            raise DomainError(f"token id {t} outside [0, {config.vocab_size})")
    return ids


_GELU_C = np.float32(math.sqrt(2.0 / math.pi))
_GELU_A = np.float32(0.044715)


def _gelu(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return np.float32(0.5) * x * (np.float32(1.0) + t)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    du = _GELU_C * (np.float32(1.0) + np.float32(3.0) * _GELU_A * x2)
    return np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * x * (np.float32(1.0) - t * t) * du


def _ln_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float32)
    var = np.square(x - mu).mean(axis=-1, keepdims=True, dtype=np.float32)
    inv = np.float32(1.0) / np.sqrt(var + np.float32(LN_EPS))
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy: np.ndarray, cache) -> np.ndarray:
    xhat, inv, g = cache
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float32)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float32)
    return inv * (dxhat - m1 - xhat * m2)


def _run(weights: ModelWeights, ids: list[int], need_cache: bool):
    """Forward pass over one sequence; optionally keeps activations for backward."""
    weights.audit()
    cfg = weights.config
    w = weights.tensors
    t = len(ids)
    x = w["tok_emb"][ids] + w["pos_emb"][:t]
    mask = np.triu(np.full((t, t), -np.inf, dtype=np.float32), k=1)
    dh = cfg.d_model // cfg.n_heads
    inv_sqrt = np.float32(1.0 / math.sqrt(dh))
    caches = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        x_in = x
        n1, ln1 = _ln_forward(x_in, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        q = n1 @ w[f"{p}.attn.wq"]
        k = n1 @ w[f"{p}.attn.wk"]
        v = n1 @ w[f"{p}.attn.wv"]
        o = np.empty_like(q)
        attn_probs = []
        for h in range(cfg.n_heads):
            s = slice(h * dh, (h + 1) * dh)
            scores = (q[:, s] @ k[:, s].T) * inv_sqrt + mask
            scores -= scores.max(axis=1, keepdims=True)
            e = np.exp(scores)
            a = e / e.sum(axis=1, keepdims=True)
            o[:, s] = a @ v[:, s]
            attn_probs.append(a)
        x_mid = x_in + o @ w[f"{p}.attn.wo"]
        n2, ln2 = _ln_forward(x_mid, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        h1 = n2 @ w[f"{p}.mlp.w1"]
        x = x_mid + _gelu(h1) @ w[f"{p}.mlp.w2"]
        if need_cache:
            caches.append((ln1, q, k, v, attn_probs, ln2, h1))
    xf, ln_f = _ln_forward(x, w["ln_f.g"], w["ln_f.b"])
    logits = xf @ w["out_proj"]
    return logits, xf, (caches, ln_f, inv_sqrt)


def forward(weights: ModelWeights, seq) -> np.ndarray:
    """Logits for every position, shape (len(seq), vocab_size)."""
    ids = _check_sequence(weights.config, seq)
    logits, _, _ = _run(weights, ids, need_cache=False)
    return logits


def hidden_states(weights: ModelWeights, seq) -> np.ndarray:
    """Final hidden states after the last layer norm, shape (len(seq), d_model)."""
    ids = _check_sequence(weights.config, seq)
    _, xf, _ = _run(weights, ids, need_cache=False)
    return xf


def next_token_loss(weights: ModelWeights, seq) -> float:
    """Mean cross-entropy of predicting each token from its prefix."""
    ids = _check_sequence(weights.config, seq)
    if len(ids) < 2:
        raise DomainError("next-token loss needs at least 2 tokens")
    logits, _, _ = _run(weights, ids, need_cache=False)
    z = logits[:-1].astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    targets = ids[1:]
    return float(-logp[np.arange(len(targets)), targets].mean())


def embedding_gradient(weights: ModelWeights, seq) -> np.ndarray:
    """Gradient of next_token_loss w.r.t. a shift of the pooled input embedding.

    The query embedding is the mean of the input token embeddings, so a
    perturbation of it shifts every position's embedding equally; the
    returned d_model vector is the sum over positions of the
    input-embedding gradients.
    """
    ids = _check_sequence(weights.config, seq)
    if len(ids) < 2:
        raise DomainError("embedding gradient needs at least 2 tokens")
    cfg = weights.config
    w = weights.tensors
    logits, _, (caches, ln_f, inv_sqrt) = _run(weights, ids, need_cache=True)
    t = len(ids)
    dh = cfg.d_model // cfg.n_heads

    z = logits[:-1].astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    dlogits = np.zeros((t, cfg.vocab_size), dtype=np.float32)
    dlogits[:-1] = probs.astype(np.float32)
    dlogits[np.arange(t - 1), ids[1:]] -= np.float32(1.0)
    dlogits[:-1] /= np.float32(t - 1)

    dx = _ln_backward(dlogits @ w["out_proj"].T, ln_f)
    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        ln1, q, k, v, attn_probs, ln2, h1 = caches[i]
        dg1 = dx @ w[f"{p}.mlp.w2"].T
        dn2 = (dg1 * _gelu_grad(h1)) @ w[f"{p}.mlp.w1"].T
        dx_mid = dx + _ln_backward(dn2, ln2)
        do = dx_mid @ w[f"{p}.attn.wo"].T
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for h in range(cfg.n_heads):
            s = slice(h * dh, (h + 1) * dh)
            a = attn_probs[h]
            da = do[:, s] @ v[:, s].T
            dv[:, s] = a.T @ do[:, s]
            ds = a * (da - (da * a).sum(axis=1, keepdims=True))
            dq[:, s] = (ds @ k[:, s]) * inv_sqrt
            dk[:, s] = (ds.T @ q[:, s]) * inv_sqrt
        dn1 = dq @ w[f"{p}.attn.wq"].T + dk @ w[f"{p}.attn.wk"].T + dv @ w[f"{p}.attn.wv"].T
        dx = dx_mid + _ln_backward(dn1, ln1)
    return dx.sum(axis=0).astype(np.float32)
