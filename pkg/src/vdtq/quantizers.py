"""Symmetric uniform quantization with per-tensor/per-channel/per-token groups.

Integer codes live in ``[-2^(N-1), 2^(N-1) - 1]``; the step size of a group is
``delta = clip_factor * max(abs(group)) / (2^(N-1) - 1)`` with the degenerate
all-zero group pinned to ``delta = 1``. Rounding is half-away-from-zero.

Two weight quantizers are provided: plain round-to-nearest (``rtn``), and a
Hessian-compensated column sweep (``gptq``) that redistributes each column's
rounding error over the not-yet-quantized columns using the upper Cholesky
factor of the inverse activation Hessian ``H = 2 X^T X + damp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import NumericError, ShapeError
from .tensors import as_tensor

PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
PER_TOKEN = "per-token"

_GRANULARITIES = (PER_TENSOR, PER_CHANNEL, PER_TOKEN)


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width, grouping scheme and clip factor of one quantizer."""

    bits: int
    granularity: str = PER_TENSOR
    clip_factor: float = 1.0
    channel_axis: int = 0

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ShapeError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in _GRANULARITIES:
            raise ShapeError(f"unknown granularity {self.granularity!r}")
        if not 0.0 < self.clip_factor <= 1.0:
            raise ShapeError(f"clip_factor must be in (0, 1], got {self.clip_factor}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass
class QuantizedTensor:
    """Integer payload plus the per-group step sizes needed to dequantize."""

    ints: np.ndarray
    deltas: np.ndarray  # scalar array for per-tensor, else one per group
    spec: QuantSpec

    def __post_init__(self):
        if np.any(self.deltas <= 0):
            raise NumericError("all step sizes must be positive")


def _group_view(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Reshape to [groups, group_len] according to the spec's granularity."""
    if x.size == 0:
        raise ShapeError("cannot quantize an empty tensor")
    if spec.granularity == PER_TENSOR:
        return x.reshape(1, -1)
    if spec.granularity == PER_TOKEN:
        if x.ndim < 2:
            raise ShapeError("per-token quantization needs at least 2 dims")
        return x.reshape(x.shape[0], -1)
    axis = spec.channel_axis
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"channel axis {axis} out of range for shape {x.shape}")
    moved = np.moveaxis(x, axis, 0)
    return np.ascontiguousarray(moved).reshape(moved.shape[0], -1)


def _ungroup(flat: np.ndarray, shape: tuple, spec: QuantSpec) -> np.ndarray:
    if spec.granularity in (PER_TENSOR, PER_TOKEN):
        return flat.reshape(shape)
    axis = spec.channel_axis % len(shape)
    moved_shape = (shape[axis],) + tuple(s for i, s in enumerate(shape) if i != axis)
    return np.moveaxis(flat.reshape(moved_shape), 0, axis)


def group_deltas(x2: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Step size per group row: clip * absmax / qmax, zero groups pinned to 1."""
    absmax = np.max(np.abs(x2), axis=1)
    deltas = spec.clip_factor * absmax / spec.qmax
    deltas[absmax == 0.0] = 1.0
    return deltas


def compute_delta(group, spec: QuantSpec) -> float:
    """Step size of a single group (flattened)."""
    g = as_tensor(group).ravel()
    if g.size == 0:
        raise ShapeError("empty quantization group")
    return float(group_deltas(g.reshape(1, -1), spec)[0])


def quantize(x, spec: QuantSpec) -> QuantizedTensor:
    """Quantize a tensor; per-token step sizes are recomputed per call."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot quantize non-finite values")
    x2 = _group_view(x, spec)
    deltas = group_deltas(x2, spec)
    ints2 = backend.quantize_groups(x2, deltas, spec.qmin, spec.qmax)
    ints = _ungroup(ints2, x.shape, spec)
    if spec.granularity == PER_TENSOR:
        deltas = deltas.reshape(())
    return QuantizedTensor(ints=ints, deltas=deltas, spec=spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Back to floats: integer codes times the owning group's step size."""
    spec = q.spec
    ints = q.ints.astype(np.float64)
    if spec.granularity == PER_TENSOR:
        return ints * float(q.deltas)
    if spec.granularity == PER_TOKEN:
        shape = (ints.shape[0],) + (1,) * (ints.ndim - 1)
        return ints * q.deltas.reshape(shape)
    axis = spec.channel_axis % ints.ndim
    shape = tuple(ints.shape[i] if i == axis else 1 for i in range(ints.ndim))
    return ints * q.deltas.reshape(shape)


def rtn_quantize_weight(w, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest per output row; the no-compensation baseline."""
    w = as_tensor(w, 2)
    if spec.granularity != PER_CHANNEL or spec.channel_axis not in (0, -2):
        raise ShapeError("weight quantization expects per-channel over output rows")
    return quantize(w, spec)


def gptq_quantize_weight(w, x, spec: QuantSpec, damp_frac: float = 0.01) -> QuantizedTensor:
    """Error-compensating weight quantization against activations ``x``.

    ``H = 2 X^T X`` damped by ``damp_frac`` of its mean diagonal; columns are
    processed in natural order with step sizes frozen per row from the
    original weights. Raises :class:`NumericError` when the damped Hessian is
    not positive definite (degenerate calibration activations).
    """
    w = as_tensor(w, 2)
    x = as_tensor(x, 2)
    if spec.granularity != PER_CHANNEL or spec.channel_axis not in (0, -2):
        raise ShapeError("weight quantization expects per-channel over output rows")
    if x.shape[0] < 1:
        raise ShapeError("need at least one activation row")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"activation dim {x.shape[1]} does not match weight dim {w.shape[1]}")
    if damp_frac <= 0:
        raise ShapeError("damp_frac must be positive")

    h = 2.0 * (x.T @ x)
    h[np.diag_indices_from(h)] += damp_frac * float(np.mean(np.diag(h)))
    try:
        np.linalg.cholesky(h)
        hinv = np.linalg.inv(h)
        hinv = 0.5 * (hinv + hinv.T)
        u = np.linalg.cholesky(hinv).T  # upper factor: hinv = u.T @ u
    except np.linalg.LinAlgError as exc:
        raise NumericError("activation Hessian is not positive definite after damping") from exc

    deltas = group_deltas(w, spec)
    wwork = w.copy()
    ints = backend.gptq_sweep(wwork, deltas, np.ascontiguousarray(u), spec.qmin, spec.qmax)
    return QuantizedTensor(ints=ints, deltas=deltas, spec=spec)
