"""Attention-weighted token distillation.

Column sums of the teacher's attention maps measure how much mass each token
receives across heads and query positions; an affine min-max map turns those
sums into per-token loss weights inside ``[lambda_min, lambda_max]``. The
block reconstruction loss then weighs each token's squared residual by its
weight, so optimization concentrates on the tokens the block actually
attends to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensors import as_tensor

DEFAULT_LAMBDA_MIN = 0.5
DEFAULT_LAMBDA_MAX = 1.0


@dataclass(frozen=True)
class TokenWeights:
    s: np.ndarray  # raw attention column mass per token
    lam: np.ndarray  # loss weight per token
    lambda_min: float
    lambda_max: float


def token_attention_mass(attn_maps) -> np.ndarray:
    """Per-token received mass: sum of map columns over heads and queries.

    For row-stochastic maps the total is ``heads * n``.
    """
    a = as_tensor(attn_maps, 3)
    if a.shape[1] != a.shape[2]:
        raise ShapeError(f"attention maps must be square per head, got {a.shape}")
    return a.sum(axis=(0, 1))


def token_loss_weights(s, lambda_min: float = DEFAULT_LAMBDA_MIN,
                       lambda_max: float = DEFAULT_LAMBDA_MAX) -> TokenWeights:
    """Min-max map of mass onto [lambda_min, lambda_max].

    A constant mass vector (no token distinguished) maps every weight to
    ``lambda_max``, recovering the uniform loss.
    """
    s = as_tensor(s, 1)
    if s.size < 1:
        raise ShapeError("need at least one token")
    if lambda_min > lambda_max:
        raise ShapeError(f"lambda_min {lambda_min} exceeds lambda_max {lambda_max}")
    lo, hi = float(np.min(s)), float(np.max(s))
    if hi == lo:
        lam = np.full(s.shape, lambda_max)
    else:
        lam = (s - lo) / (hi - lo) * (lambda_max - lambda_min) + lambda_min
    return TokenWeights(s=s, lam=lam, lambda_min=lambda_min, lambda_max=lambda_max)


def weighted_token_loss(fp_out, q_out, lam) -> float:
    """Mean over tokens of ``lam_j * ||fp_row_j - q_row_j||^2``."""
    fp_out = as_tensor(fp_out, 2)
    q_out = as_tensor(q_out, 2)
    lam = as_tensor(lam, 1)
    if fp_out.shape != q_out.shape:
        raise ShapeError(f"output shapes disagree: {fp_out.shape} vs {q_out.shape}")
    if lam.shape[0] != fp_out.shape[0]:
        raise ShapeError(f"{lam.shape[0]} weights for {fp_out.shape[0]} tokens")
    diff = fp_out - q_out
    per_token = np.sum(diff * diff, axis=1)
    return float(np.mean(lam * per_token))


def sparsity_report(s, top_frac: float) -> dict:
    """Share of total attention mass held by the top ``ceil(top_frac * n)`` tokens."""
    s = as_tensor(s, 1)
    if not 0.0 < top_frac <= 1.0:
        raise ShapeError(f"top_frac must be in (0, 1], got {top_frac}")
    n = s.size
    top_n = int(np.ceil(top_frac * n))
    order = np.sort(s)[::-1]
    total = float(np.sum(order))
    top_mass = float(np.sum(order[:top_n]))
    share = top_mass / total if total > 0 else 0.0
    return {
        "tokens": int(n),
        "top_frac": float(top_frac),
        "top_tokens": int(top_n),
        "mass_share": share,
    }
