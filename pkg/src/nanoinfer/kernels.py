"""Dense numeric kernels: matmul, softmax, entropy, layer norm.

Inputs are rank-1/2 arrays of 32-bit floats (lists are accepted and
converted). Kernels accumulate in float64 and round the result to
float32, so outputs do not depend on the BLAS reduction order.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, ShapeError

PROB_SUM_TOL = 1e-5


def _as_array(x, rank: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got rank {arr.ndim}")
    return arr


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what}: input contains NaN or Inf")


def matmul(a, b) -> np.ndarray:
    """Matrix product of an m x k by a k x n array, returned as float32."""
    a64 = _as_array(a, 2, "matmul lhs")
    b64 = _as_array(b, 2, "matmul rhs")
    if a64.shape[1] != b64.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree ({a64.shape} by {b64.shape})")
    _require_finite(a64, "matmul lhs")
    _require_finite(b64, "matmul rhs")
    return (a64 @ b64).astype(np.float32)


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax of a rank-1 vector, max-subtracted for stability."""
    v64 = _as_array(v, 1, "softmax")
    if v64.size == 0:
        raise ShapeError("softmax: empty input")
    _require_finite(v64, "softmax")
    if not temperature > 0:
        raise DomainError(f"softmax: temperature must be > 0, got {temperature}")
    # subtract the max before scaling so extreme temperatures cannot overflow
    z = (v64 - v64.max()) / float(temperature)
    e = np.exp(z)
    return (e / e.sum()).astype(np.float32)


def _check_probability(p64: np.ndarray, what: str) -> None:
    _require_finite(p64, what)
    if np.any(p64 < 0):
        raise DomainError(f"{what}: negative probability")
    if abs(p64.sum() - 1.0) > PROB_SUM_TOL:
        raise DomainError(f"{what}: probabilities sum to {p64.sum()!r}, not 1")


def entropy(p) -> float:
    """Shannon entropy in nats of a probability vector; 0 * log 0 counts as 0."""
    p64 = _as_array(p, 1, "entropy")
    if p64.size == 0:
        raise ShapeError("entropy: empty input")
    _check_probability(p64, "entropy")
    nz = p64[p64 > 0]
    return float(-(nz * np.log(nz)).sum())


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim not in (1, 2):
        raise ShapeError(f"layer_norm: expected rank 1 or 2, got rank {x64.ndim}")
    _require_finite(x64, "layer_norm")
    g = _as_array(gamma, 1, "layer_norm gamma")
    b = _as_array(beta, 1, "layer_norm beta")
    if g.shape != (x64.shape[-1],) or b.shape != (x64.shape[-1],):
        raise ShapeError("layer_norm: gamma/beta must match the last axis")
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x64 - mu) / np.sqrt(var + eps)
    return (xhat * g + b).astype(np.float32)
