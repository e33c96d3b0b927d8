"""Block-wise post-training calibration.

For each transformer block, the full-precision teacher's outputs (and its
attention maps, which set the per-token loss weights) are cached once; the
quantized student then learns per-layer channel scales, Cayley rotations and
clip thresholds by minimizing the token-weighted reconstruction loss with
straight-through gradients, AdamW and a cosine learning-rate schedule.
Weights are finally committed with the error-compensating GPTQ sweep against
the student's own quantized activations.

Blocks are calibrated in order: each block's student input is the quantized
output of the already-calibrated prefix, while targets stay on the teacher
path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distill import token_attention_mass, token_loss_weights, weighted_token_loss
from .errors import ConfigError, TrainingError
from .model import LN_EPS, ToyBlock, ToyModel, block_forward, gelu, gelu_grad, model_forward
from .quantizers import PER_CHANNEL, QuantSpec, gptq_quantize_weight
from .transforms import (
    MODE_DISABLED,
    MODE_STE,
    LayerGrads,
    LayerTransform,
    PreparedTransform,
    orthogonality_defect,
    quantized_linear_backward,
    quantized_linear_forward,
)

ORTHO_TOL = 1e-8
EQUIV_TOL = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 15
    lr_transform: float = 5e-3
    lr_clip: float = 5e-2
    batch: int = 0  # 0 = full batch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    bits_w: int = 4
    bits_a: int = 4
    lambda_min: float = 0.5
    lambda_max: float = 1.0
    damp_frac: float = 0.01
    quant_disabled: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_transform <= 0 or self.lr_clip <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lambda_min > self.lambda_max:
            raise ConfigError("lambda_min must not exceed lambda_max")
        return self


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


def adamw_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place.

    First-moment and second-moment estimates are bias-corrected; epsilon is
    scaled by ``sqrt(1 - beta2^t)`` so the first step moves by exactly
    ``-lr * g / (|g| + eps * sqrt(1 - beta2))`` elementwise.
    """
    if not state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    m = state["m"]
    v = state["v"]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    m_hat = m / bc1
    denom = np.sqrt(v / bc2) + eps * np.sqrt(bc2)
    if weight_decay != 0.0:
        param -= lr * weight_decay * param
    param -= lr * (m_hat / denom)


class AdamW:
    """Keyed AdamW over a set of named parameter arrays."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, key, param: np.ndarray, grad: np.ndarray, lr: float) -> None:
        adamw_step(param, grad, self.state.setdefault(key, {}), lr,
                   self.beta1, self.beta2, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# quantized student block
# ---------------------------------------------------------------------------


@dataclass
class BlockCtx:
    x: np.ndarray
    z1: np.ndarray
    ln1: tuple
    lin: dict  # layer name -> LinearCtx
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray  # [heads, n, n]
    concat: np.ndarray
    h1: np.ndarray
    z2: np.ndarray
    ln2: tuple
    u: np.ndarray
    hidden: np.ndarray
    out: np.ndarray


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def _ln_backward(gy: np.ndarray, ctx: tuple) -> np.ndarray:
    xhat, inv_std, gain = ctx
    gxhat = gy * gain
    mean_g = gxhat.mean(axis=1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=1, keepdims=True)
    return inv_std * (gxhat - mean_g - xhat * mean_gx)


def prepare_transforms(transforms: dict) -> dict:
    return {name: PreparedTransform.from_transform(t) for name, t in transforms.items()}


def block_layer_dims(block: ToyBlock) -> dict:
    d = block.wq.shape[1]
    return {"attn_q": d, "attn_k": d, "attn_v": d, "attn_o": d,
            "mlp_in": d, "mlp_out": 4 * d}


def init_transforms(block: ToyBlock) -> dict:
    return {name: LayerTransform.identity(dim)
            for name, dim in block_layer_dims(block).items()}


def student_block_forward(
    x: np.ndarray,
    block: ToyBlock,
    transforms: dict,
    cfg: TrainConfig,
    mode: str,
    prepared: dict | None = None,
    baked: dict | None = None,
):
    """Quantized mirror of the teacher block; returns (output, BlockCtx).

    The attention score path (softmax of QK^T) stays in full precision; only
    the six linear layers quantize their inputs and weights.
    """
    if prepared is None:
        prepared = prepare_transforms(transforms)
    baked = baked or {}

    def lin(name: str, inp: np.ndarray):
        return quantized_linear_forward(
            inp, block.weight(name), transforms[name], cfg.bits_w, cfg.bits_a,
            mode, prep=prepared[name], baked_weight=baked.get(name))

    lin_ctx = {}
    z1, ln1_ctx = _ln_forward(x, block.ln1_g, block.ln1_b)
    q, lin_ctx["attn_q"] = lin("attn_q", z1)
    k, lin_ctx["attn_k"] = lin("attn_k", z1)
    v, lin_ctx["attn_v"] = lin("attn_v", z1)

    n, d = x.shape
    heads = block.num_heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    probs = np.empty((heads, n, n))
    concat = np.empty((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        shifted = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        probs[h] = p
        concat[:, sl] = p @ v[:, sl]

    ao, lin_ctx["attn_o"] = lin("attn_o", concat)
    h1 = x + ao
    z2, ln2_ctx = _ln_forward(h1, block.ln2_g, block.ln2_b)
    u, lin_ctx["mlp_in"] = lin("mlp_in", z2)
    hidden = gelu(u)
    mo, lin_ctx["mlp_out"] = lin("mlp_out", hidden)
    out = h1 + mo

    ctx = BlockCtx(x=x, z1=z1, ln1=ln1_ctx, lin=lin_ctx, q=q, k=k, v=v,
                   probs=probs, concat=concat, h1=h1, z2=z2, ln2=ln2_ctx,
                   u=u, hidden=hidden, out=out)
    return out, ctx


def student_block_backward(g_out: np.ndarray, block: ToyBlock, ctx: BlockCtx):
    """Backprop through the student block; returns (gx, {layer: LayerGrads})."""
    grads = {}

    g_hidden, grads["mlp_out"] = quantized_linear_backward(g_out, ctx.lin["mlp_out"])
    g_u = g_hidden * gelu_grad(ctx.u)
    g_z2, grads["mlp_in"] = quantized_linear_backward(g_u, ctx.lin["mlp_in"])
    g_h1 = g_out + _ln_backward(g_z2, ctx.ln2)

    g_concat, grads["attn_o"] = quantized_linear_backward(g_h1, ctx.lin["attn_o"])

    n, d = ctx.x.shape
    heads = block.num_heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    g_q = np.empty((n, d))
    g_k = np.empty((n, d))
    g_v = np.empty((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        p = ctx.probs[h]
        g_o = g_concat[:, sl]
        g_p = g_o @ ctx.v[:, sl].T
        g_v[:, sl] = p.T @ g_o
        g_scores = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
        g_q[:, sl] = (g_scores @ ctx.k[:, sl]) * scale
        g_k[:, sl] = (g_scores.T @ ctx.q[:, sl]) * scale

    gz1_q, grads["attn_q"] = quantized_linear_backward(g_q, ctx.lin["attn_q"])
    gz1_k, grads["attn_k"] = quantized_linear_backward(g_k, ctx.lin["attn_k"])
    gz1_v, grads["attn_v"] = quantized_linear_backward(g_v, ctx.lin["attn_v"])
    g_x = g_h1 + _ln_backward(gz1_q + gz1_k + gz1_v, ctx.ln1)
    return g_x, grads


def loss_and_grad(out: np.ndarray, target: np.ndarray, lam: np.ndarray):
    diff = out - target
    n = out.shape[0]
    loss = float(np.mean(lam * np.sum(diff * diff, axis=1)))
    g_out = (2.0 / n) * lam[:, None] * diff
    return loss, g_out


# ---------------------------------------------------------------------------
# block calibration
# ---------------------------------------------------------------------------


@dataclass
class BlockCalibrationResult:
    transforms: dict
    loss_curve: list
    initial_loss: float
    final_loss: float
    baked_weights: dict | None
    baked_train_loss: float
    eval_loss: float | None = None
    extras: dict = field(default_factory=dict)


def _batch_loss(block, transforms, cfg, mode, inputs, targets, lambdas,
                prepared=None, baked=None) -> float:
    if prepared is None:
        prepared = prepare_transforms(transforms)
    total = 0.0
    for x, target, lam in zip(inputs, targets, lambdas):
        out, _ = student_block_forward(x, block, transforms, cfg, mode,
                                       prepared=prepared, baked=baked)
        total += weighted_token_loss(target, out, lam)
    return total / len(inputs)


def _check_invariants(block, transforms, cfg, prepared, x_probe, epoch):
    for name, prep in prepared.items():
        defect = orthogonality_defect(prep.r)
        if defect > ORTHO_TOL:
            raise TrainingError(
                f"rotation for {name} lost orthogonality ({defect:.2e})", epoch=epoch)
    fp_out, _ = block_forward(x_probe, block)
    q_out, _ = student_block_forward(x_probe, block, transforms, cfg,
                                     MODE_DISABLED, prepared=prepared)
    gap = float(np.max(np.abs(fp_out - q_out)))
    if gap > EQUIV_TOL:
        raise TrainingError(
            f"transform equivalence violated ({gap:.2e})", epoch=epoch)


def bake_weights(block: ToyBlock, transforms: dict, cfg: TrainConfig,
                 inputs: list) -> dict:
    """GPTQ-commit the transformed weights against quantized student inputs."""
    prepared = prepare_transforms(transforms)
    collected = {name: [] for name in block.LAYERS}
    for x in inputs:
        _, ctx = student_block_forward(x, block, transforms, cfg, MODE_STE,
                                       prepared=prepared)
        for name in block.LAYERS:
            collected[name].append(ctx.lin[name].xq)
    baked = {}
    for name in block.LAYERS:
        t = transforms[name]
        w1 = (block.weight(name) * prepared[name].s) @ prepared[name].r
        spec = QuantSpec(bits=cfg.bits_w, granularity=PER_CHANNEL,
                         clip_factor=float(t.clip_w[0]))
        baked[name] = gptq_quantize_weight(w1, np.vstack(collected[name]), spec,
                                           damp_frac=cfg.damp_frac)
    return baked


def calibrate_block(
    block: ToyBlock,
    inputs: list,
    targets: list,
    lambdas: list,
    cfg: TrainConfig,
    bake_inputs: list | None = None,
) -> BlockCalibrationResult:
    """Optimize one block's transforms, then commit weights with GPTQ.

    ``inputs``/``targets``/``lambdas`` are the training triples; ``bake_inputs``
    (default: the training inputs) feed the final GPTQ Hessian.
    """
    cfg.validate()
    if not inputs:
        raise ConfigError("calibration sample set is empty")
    if not (len(inputs) == len(targets) == len(lambdas)):
        raise ConfigError("inputs, targets and lambdas must align")

    transforms = init_transforms(block)
    mode = MODE_DISABLED if cfg.quant_disabled else MODE_STE
    opt_transform = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    opt_clip = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    batch = cfg.batch if cfg.batch and cfg.batch > 0 else len(inputs)
    steps_per_epoch = (len(inputs) + batch - 1) // batch
    total_steps = max(cfg.epochs * steps_per_epoch, 1)

    curve = [_batch_loss(block, transforms, cfg, mode, inputs, targets, lambdas)]
    dims = block_layer_dims(block)

    step = 0
    for epoch in range(cfg.epochs):
        for start in range(0, len(inputs), batch):
            chunk = slice(start, start + batch)
            xs, ts, ls = inputs[chunk], targets[chunk], lambdas[chunk]
            prepared = prepare_transforms(transforms)
            acc = {name: LayerGrads.zeros(dims[name]) for name in block.LAYERS}
            for x, target, lam in zip(xs, ts, ls):
                out, ctx = student_block_forward(x, block, transforms, cfg, mode,
                                                 prepared=prepared)
                _, g_out = loss_and_grad(out, target, lam)
                _, grads = student_block_backward(g_out, block, ctx)
                for name in block.LAYERS:
                    acc[name].accumulate(grads[name])
            inv = 1.0 / len(xs)
            lr_t = cosine_lr(step, total_steps, cfg.lr_transform)
            lr_c = cosine_lr(step, total_steps, cfg.lr_clip)
            for name in block.LAYERS:
                g = acc[name]
                g.scale(inv)
                t = transforms[name]
                opt_transform.step((name, "log_scale"), t.log_scale, g.log_scale, lr_t)
                opt_transform.step((name, "skew"), t.skew_upper, g.skew_upper, lr_t)
                opt_clip.step((name, "clip_w"), t.clip_w, np.array([g.clip_w]), lr_c)
                opt_clip.step((name, "clip_a"), t.clip_a, np.array([g.clip_a]), lr_c)
                t.clamp_clips()
            step += 1
        prepared = prepare_transforms(transforms)
        _check_invariants(block, transforms, cfg, prepared, inputs[0], epoch)
        loss = _batch_loss(block, transforms, cfg, mode, inputs, targets, lambdas,
                           prepared=prepared)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        curve.append(loss)

    if cfg.quant_disabled:
        baked = None
        baked_train_loss = curve[-1]
    else:
        baked = bake_weights(block, transforms, cfg, bake_inputs or inputs)
        baked_train_loss = _batch_loss(block, transforms, cfg, MODE_STE,
                                       inputs, targets, lambdas, baked=baked)

    return BlockCalibrationResult(
        transforms=transforms,
        loss_curve=curve,
        initial_loss=curve[0],
        final_loss=curve[-1],
        baked_weights=baked,
        baked_train_loss=baked_train_loss,
    )


# ---------------------------------------------------------------------------
# sequential (multi-block) calibration
# ---------------------------------------------------------------------------


def _uniform_lambdas(n: int) -> np.ndarray:
    return np.ones(n)


def block_lambdas(attn_maps: np.ndarray, cfg: TrainConfig, distill_std: bool) -> np.ndarray:
    if not distill_std:
        return _uniform_lambdas(attn_maps.shape[1])
    weights = token_loss_weights(token_attention_mass(attn_maps),
                                 cfg.lambda_min, cfg.lambda_max)
    return weights.lam


def student_forward_baked(x: np.ndarray, block: ToyBlock, result: BlockCalibrationResult,
                          cfg: TrainConfig) -> np.ndarray:
    mode = MODE_DISABLED if cfg.quant_disabled else MODE_STE
    out, _ = student_block_forward(x, block, result.transforms, cfg, mode,
                                   baked=result.baked_weights)
    return out


def sequential_calibrate(
    model: ToyModel,
    calib_states: list,
    cfg: TrainConfig,
    train_count: int | None = None,
    distill_std: bool = True,
    eval_states: list | None = None,
) -> list:
    """Calibrate all blocks in order; returns one result per block.

    ``calib_states`` are the selected samples (ranked); ``train_count`` of
    them, evenly spaced over the ranking so the subsample keeps the
    selection's composition, drive the gradient loop while the whole set
    feeds the GPTQ bake. ``eval_states``, when given, are scored per block
    with the uniform per-token loss under student-input chaining.
    """
    if not calib_states:
        raise ConfigError("empty calibration set")
    train_count = min(train_count or len(calib_states), len(calib_states))
    train_idx = np.unique(np.round(
        np.linspace(0, len(calib_states) - 1, train_count)).astype(int))

    teacher_calib = [model_forward(model, x)[1] for x in calib_states]
    teacher_eval = [model_forward(model, x)[1] for x in eval_states] if eval_states else None

    student_calib = list(calib_states)
    student_eval = list(eval_states) if eval_states else None

    results = []
    for b, block in enumerate(model.blocks):
        targets = [teacher_calib[i][b].block_output for i in range(len(student_calib))]
        lambdas = [block_lambdas(teacher_calib[i][b].attn_maps, cfg, distill_std)
                   for i in range(len(student_calib))]
        try:
            res = calibrate_block(
                block,
                [student_calib[i] for i in train_idx],
                [targets[i] for i in train_idx],
                [lambdas[i] for i in train_idx],
                cfg,
                bake_inputs=student_calib,
            )
        except TrainingError as exc:
            exc.block = b
            raise
        student_calib = [student_forward_baked(x, block, res, cfg) for x in student_calib]
        if student_eval is not None:
            outs = [student_forward_baked(x, block, res, cfg) for x in student_eval]
            losses = [weighted_token_loss(teacher_eval[i][b].block_output, outs[i],
                                          _uniform_lambdas(outs[i].shape[0]))
                      for i in range(len(outs))]
            res.eval_loss = float(np.mean(losses))
            student_eval = outs
        results.append(res)
    return results
