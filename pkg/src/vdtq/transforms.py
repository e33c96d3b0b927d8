"""Learnable per-layer reparameterization for quantization-friendly linears.

Each linear layer ``y = x @ w.T`` gets a channel-wise balancing scale
``s = exp(log_scale)`` and an orthogonal rotation ``r`` parameterized through
the Cayley map of a skew-symmetric matrix. Inputs and weights are rewritten
as ``x' = x @ diag(1/s) @ r`` and ``w' = w @ diag(s) @ r``, which leaves the
product ``x' @ w'.T = x @ w.T`` exactly invariant in infinite precision while
reshaping the per-channel value distributions both quantizers see.

Quantization inside the layer is fake-quant (quantize-dequantize) with three
modes:

* ``ste``      -- real rounding in the forward pass; the backward pass treats
                  round as identity inside the clamp range and keeps the
                  dependence of the step size on the clip factor and on the
                  group maximum (so clip thresholds receive the rounding
                  residual as their learning signal).
* ``noround``  -- rounding replaced by identity. The backward pass is then
                  the exact gradient of the forward pass away from clamp /
                  argmax kinks, which is what the finite-difference checks
                  validate.
* ``disabled`` -- no quantization at all; the layer is the exact identity
                  reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .quantizers import QuantizedTensor, dequantize

MODE_STE = "ste"
MODE_NOROUND = "noround"
MODE_DISABLED = "disabled"

CLIP_MIN = 0.05
CLIP_MAX = 1.0


@dataclass
class LayerTransform:
    """Learnable parameters of one linear layer."""

    log_scale: np.ndarray  # [d_in]
    skew_upper: np.ndarray  # [d_in, d_in], strictly upper triangular
    clip_w: np.ndarray  # shape (1,), weight clip factor in (0, 1]
    clip_a: np.ndarray  # shape (1,), activation clip factor in (0, 1]

    @classmethod
    def identity(cls, d_in: int) -> "LayerTransform":
        return cls(
            log_scale=np.zeros(d_in),
            skew_upper=np.zeros((d_in, d_in)),
            clip_w=np.array([1.0]),
            clip_a=np.array([1.0]),
        )

    def clamp_clips(self) -> None:
        np.clip(self.clip_w, CLIP_MIN, CLIP_MAX, out=self.clip_w)
        np.clip(self.clip_a, CLIP_MIN, CLIP_MAX, out=self.clip_a)


def cayley_rotation(skew_upper: np.ndarray):
    """Orthogonal ``r = (I - a)(I + a)^-1`` from the strictly-upper parameters."""
    a = skew_upper - skew_upper.T
    eye = np.eye(a.shape[0])
    r = np.linalg.solve((eye + a).T, (eye - a).T).T
    return r, a


def cayley_rotation_grad(g_r: np.ndarray, a: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``r`` back to the strictly-upper skew parameters.

    Uses ``dr = -(I + r) da (I + a)^-1``; the result is projected onto the
    skew-symmetric tangent and returned as a strictly-upper array.
    """
    eye = np.eye(a.shape[0])
    g_a = -(eye + r).T @ np.linalg.solve(eye + a, g_r.T).T
    return np.triu(g_a - g_a.T, 1)


def orthogonality_defect(r: np.ndarray) -> float:
    return float(np.max(np.abs(r.T @ r - np.eye(r.shape[0]))))


@dataclass
class PreparedTransform:
    """Per-step cache: scale vectors and the rotation for one layer."""

    s: np.ndarray
    inv_s: np.ndarray
    r: np.ndarray
    a: np.ndarray

    @classmethod
    def from_transform(cls, t: LayerTransform) -> "PreparedTransform":
        s = np.exp(t.log_scale)
        r, a = cayley_rotation(t.skew_upper)
        return cls(s=s, inv_s=1.0 / s, r=r, a=a)


def apply_transform_fp(x: np.ndarray, w: np.ndarray, t: LayerTransform):
    """The plain (quantization-free) reparameterization of inputs and weights."""
    prep = PreparedTransform.from_transform(t)
    return (x * prep.inv_s) @ prep.r, (w * prep.s) @ prep.r


# ---------------------------------------------------------------------------
# fake quantization over row groups
# ---------------------------------------------------------------------------


@dataclass
class QdqCtx:
    t: np.ndarray  # pre-round codes x / delta
    c: np.ndarray  # post-clamp codes actually used in the forward value
    inr: np.ndarray  # True where the pre-clamp code is inside the clamp range
    deltas: np.ndarray  # [rows]
    absmax: np.ndarray  # [rows]
    jstar: np.ndarray  # argmax |x| per row
    sstar: np.ndarray  # sign of the max-magnitude element per row
    nonzero: np.ndarray  # rows with absmax > 0 (others have frozen delta = 1)
    alpha: float
    qlevel: int


def qdq_rows(x: np.ndarray, bits: int, alpha: float, mode: str):
    """Quantize-dequantize each row as one group; returns (values, context)."""
    if mode == MODE_DISABLED:
        return x, None
    qlevel = (1 << (bits - 1)) - 1
    qmin = -(1 << (bits - 1))
    ax = np.abs(x)
    jstar = np.argmax(ax, axis=1)
    rows = np.arange(x.shape[0])
    absmax = ax[rows, jstar]
    nonzero = absmax > 0.0
    deltas = np.where(nonzero, alpha * absmax / qlevel, 1.0)
    t = x / deltas[:, None]
    if mode == MODE_STE:
        c0 = np.floor(np.abs(t) + 0.5) * np.sign(t)
    elif mode == MODE_NOROUND:
        c0 = t
    else:
        raise ConfigError(f"unknown quantization mode {mode!r}")
    inr = (c0 >= qmin) & (c0 <= qlevel)
    c = np.clip(c0, qmin, qlevel)
    y = deltas[:, None] * c
    ctx = QdqCtx(t=t, c=c, inr=inr, deltas=deltas, absmax=absmax, jstar=jstar,
                 sstar=np.sign(x[rows, jstar]), nonzero=nonzero,
                 alpha=alpha, qlevel=qlevel)
    return y, ctx


def qdq_rows_backward(gy: np.ndarray, ctx: QdqCtx | None):
    """Backward of :func:`qdq_rows`; returns (gx, g_alpha).

    Inside the clamp range the code path is treated as identity; the step
    size path carries ``c - t`` (the rounding residual, zero in ``noround``
    mode) plus the clamp edges, and fans out to the clip factor and to the
    row's max-magnitude element.
    """
    if ctx is None:
        return gy, 0.0
    g_delta = np.sum(gy * (ctx.c - ctx.inr * ctx.t), axis=1)
    g_delta = np.where(ctx.nonzero, g_delta, 0.0)
    gx = gy * ctx.inr
    rows = np.arange(gx.shape[0])
    gx[rows, ctx.jstar] += g_delta * (ctx.alpha * ctx.sstar / ctx.qlevel)
    g_alpha = float(np.sum(g_delta * ctx.absmax / ctx.qlevel))
    return gx, g_alpha


# ---------------------------------------------------------------------------
# quantized linear layer
# ---------------------------------------------------------------------------


@dataclass
class LinearCtx:
    x: np.ndarray
    w: np.ndarray
    prep: PreparedTransform
    n_mat: np.ndarray  # x * inv_s
    x1: np.ndarray  # transformed input
    m_mat: np.ndarray  # w * s
    w1: np.ndarray  # transformed weight
    xq: np.ndarray
    wq: np.ndarray
    ctx_a: QdqCtx | None
    ctx_w: QdqCtx | None
    mode: str


def quantized_linear_forward(
    x: np.ndarray,
    w: np.ndarray,
    t: LayerTransform,
    bits_w: int,
    bits_a: int,
    mode: str,
    prep: PreparedTransform | None = None,
    baked_weight: QuantizedTensor | None = None,
):
    """Transformed, fake-quantized ``y = qdq(x') @ qdq(w').T``.

    ``baked_weight`` replaces the weight-side fake quantizer with a
    previously committed integer weight (final-bake evaluation mode).
    """
    if prep is None:
        prep = PreparedTransform.from_transform(t)
    n_mat = x * prep.inv_s
    x1 = n_mat @ prep.r
    m_mat = w * prep.s
    w1 = m_mat @ prep.r
    if mode == MODE_DISABLED:
        xq, ctx_a = x1, None
        wq, ctx_w = w1, None
    else:
        xq, ctx_a = qdq_rows(x1, bits_a, float(t.clip_a[0]), mode)
        if baked_weight is not None:
            wq, ctx_w = dequantize(baked_weight), None
        else:
            wq, ctx_w = qdq_rows(w1, bits_w, float(t.clip_w[0]), mode)
    y = xq @ wq.T
    ctx = LinearCtx(x=x, w=w, prep=prep, n_mat=n_mat, x1=x1, m_mat=m_mat,
                    w1=w1, xq=xq, wq=wq, ctx_a=ctx_a, ctx_w=ctx_w, mode=mode)
    return y, ctx


@dataclass
class LayerGrads:
    log_scale: np.ndarray
    skew_upper: np.ndarray
    clip_w: float
    clip_a: float

    def accumulate(self, other: "LayerGrads") -> None:
        self.log_scale += other.log_scale
        self.skew_upper += other.skew_upper
        self.clip_w += other.clip_w
        self.clip_a += other.clip_a

    def scale(self, factor: float) -> None:
        self.log_scale *= factor
        self.skew_upper *= factor
        self.clip_w *= factor
        self.clip_a *= factor

    @classmethod
    def zeros(cls, d_in: int) -> "LayerGrads":
        return cls(log_scale=np.zeros(d_in), skew_upper=np.zeros((d_in, d_in)),
                   clip_w=0.0, clip_a=0.0)


def quantized_linear_backward(gy: np.ndarray, ctx: LinearCtx):
    """Gradients of the layer output w.r.t. its input and its transform.

    Returns ``(gx, LayerGrads)``. The weight matrix itself is frozen; only
    the reparameterization and the clip factors are learnable.
    """
    prep = ctx.prep
    g_xq = gy @ ctx.wq
    g_wq = gy.T @ ctx.xq
    g_x1, g_clip_a = qdq_rows_backward(g_xq, ctx.ctx_a)
    g_w1, g_clip_w = qdq_rows_backward(g_wq, ctx.ctx_w)
    g_n = g_x1 @ prep.r.T
    g_m = g_w1 @ prep.r.T
    g_r = ctx.n_mat.T @ g_x1 + ctx.m_mat.T @ g_w1
    gx = g_n * prep.inv_s
    # s appears as w * s on the weight side and 1/s on the input side
    g_s = np.sum(g_m * ctx.w, axis=0) - prep.inv_s ** 2 * np.sum(g_n * ctx.x, axis=0)
    g_log_scale = g_s * prep.s
    g_skew = cayley_rotation_grad(g_r, prep.a, prep.r)
    grads = LayerGrads(log_scale=g_log_scale, skew_upper=g_skew,
                       clip_w=g_clip_w, clip_a=g_clip_a)
    return gx, grads
