"""Dense tensor primitives: matmul, norms, softmax, spectral norm, attention.

All values are float64 ``numpy`` arrays in row-major order. Operations are
pure functions; nothing here holds state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError, NumericError, ShapeError


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally checking rank."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"expected a {ndim}-d tensor, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed reduction order on the reference backend."""
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    return backend.matmul(a, b)


def frobenius_sq(a: np.ndarray) -> float:
    """Sum of squared elements (squared Frobenius norm)."""
    a = as_tensor(a)
    return float(np.sum(a * a))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    x = as_tensor(x, 2)
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


@dataclass(frozen=True)
class SpectralResult:
    """Outcome of power iteration on a symmetric PSD matrix."""

    value: float
    converged: bool
    iterations: int


def spectral_norm(m: np.ndarray, max_iters: int = 1000, tol: float = 1e-10) -> SpectralResult:
    """Largest eigenvalue of a symmetric PSD matrix via power iteration.

    Converged when successive Rayleigh quotients agree to ``tol`` relative;
    otherwise the last iterate is returned with ``converged=False``.
    """
    m = as_tensor(m, 2)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"spectral_norm needs a square matrix, got {m.shape}")
    if m.shape[0] == 0:
        raise ShapeError("spectral_norm of an empty matrix")
    value, converged, iters = backend.power_iteration(m, max_iters, tol)
    return SpectralResult(value=value, converged=converged, iterations=iters)


@dataclass(frozen=True)
class AttentionOutput:
    """Attention result with the per-head maps taken before the value product."""

    output: np.ndarray  # [n, d]
    attn_maps: np.ndarray  # [heads, n, n]


def attention_forward(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    num_heads: int,
) -> AttentionOutput:
    """Multi-head scaled-dot-product attention, ``y = softmax(QK^T/sqrt(dh))V``.

    Projections follow the row-major weight convention ``q = x @ wq.T``.
    Heads split the feature axis into contiguous slices of width ``d // num_heads``.
    """
    x = as_tensor(x, 2)
    n, d = x.shape
    if num_heads < 1 or d % num_heads != 0:
        raise ConfigError(f"feature dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    q = matmul(x, as_tensor(wq, 2).T)
    k = matmul(x, as_tensor(wk, 2).T)
    v = matmul(x, as_tensor(wv, 2).T)
    maps = np.empty((num_heads, n, n))
    concat = np.empty((n, d))
    scale = 1.0 / np.sqrt(dh)
    for h in range(num_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = matmul(q[:, sl], np.ascontiguousarray(k[:, sl]).T) * scale
        probs = softmax_rows(scores)
        maps[h] = probs
        concat[:, sl] = matmul(probs, np.ascontiguousarray(v[:, sl]))
    out = matmul(concat, as_tensor(wo, 2).T)
    return AttentionOutput(output=out, attn_maps=maps)
