"""Model and quantized-model checkpoints: tensor files plus a JSON index."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import dump_json
from .engine import BlockCalibrationResult, TrainConfig
from .errors import ConfigError, IOFormatError
from .model import ToyBlock, ToyModel, ToyModelConfig
from .quantizers import PER_CHANNEL, QuantSpec, QuantizedTensor
from .tensorfile import read_tensor, write_tensor
from .transforms import LayerTransform

_BLOCK_FIELDS = ("wq", "wk", "wv", "wo", "w1", "w2",
                 "ln1_g", "ln1_b", "ln2_g", "ln2_b")


def save_model(model: ToyModel, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b, block in enumerate(model.blocks):
        for name in _BLOCK_FIELDS:
            write_tensor(out / f"b{b:02d}_{name}.vdtq", getattr(block, name))
    dump_json(out / "model.json", {
        "kind": "vdtq-model",
        "seed": seed,
        "model": model.config.to_dict(),
    })
    return out / "model.json"


def load_model(model_dir) -> tuple[ToyModel, int]:
    model_dir = Path(model_dir)
    index = model_dir / "model.json"
    if not index.exists():
        raise IOFormatError(f"{index} not found")
    import json

    meta = json.loads(index.read_text())
    if meta.get("kind") != "vdtq-model":
        raise IOFormatError(f"{index}: not a model checkpoint")
    cfg = ToyModelConfig.from_dict(meta["model"])
    blocks = []
    for b in range(cfg.depth):
        fields = {name: read_tensor(model_dir / f"b{b:02d}_{name}.vdtq")
                  for name in _BLOCK_FIELDS}
        blocks.append(ToyBlock(num_heads=cfg.heads, **fields))
    return ToyModel(config=cfg, blocks=blocks), int(meta["seed"])


def save_quantized(results: list, model_cfg: ToyModelConfig, train_cfg: TrainConfig,
                   seed: int, out_dir) -> Path:
    """Persist per-layer transforms plus baked integer weights."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers = ToyBlock.LAYERS
    for b, res in enumerate(results):
        for layer in layers:
            t: LayerTransform = res.transforms[layer]
            stem = out / f"b{b:02d}_{layer}"
            write_tensor(f"{stem}.log_scale.vdtq", t.log_scale)
            write_tensor(f"{stem}.skew.vdtq", t.skew_upper)
            write_tensor(f"{stem}.clips.vdtq", np.array([t.clip_w[0], t.clip_a[0]]))
            if res.baked_weights is not None:
                q: QuantizedTensor = res.baked_weights[layer]
                write_tensor(f"{stem}.ints.vdtq", q.ints.astype(np.float64))
                write_tensor(f"{stem}.deltas.vdtq", q.deltas)
    dump_json(out / "quant.json", {
        "kind": "vdtq-quant",
        "seed": seed,
        "model": model_cfg.to_dict(),
        "bits_w": train_cfg.bits_w,
        "bits_a": train_cfg.bits_a,
        "quant_disabled": train_cfg.quant_disabled,
        "layers": list(layers),
        "blocks": len(results),
    })
    return out / "quant.json"


def load_quantized(quant_dir):
    """Returns (per-block {layer: (transform, baked or None)}, meta dict)."""
    quant_dir = Path(quant_dir)
    index = quant_dir / "quant.json"
    if not index.exists():
        raise IOFormatError(f"{index} not found")
    import json

    meta = json.loads(index.read_text())
    if meta.get("kind") != "vdtq-quant":
        raise IOFormatError(f"{index}: not a quantized checkpoint")
    disabled = bool(meta["quant_disabled"])
    blocks = []
    for b in range(int(meta["blocks"])):
        per_layer = {}
        for layer in meta["layers"]:
            stem = quant_dir / f"b{b:02d}_{layer}"
            clips = read_tensor(f"{stem}.clips.vdtq")
            transform = LayerTransform(
                log_scale=read_tensor(f"{stem}.log_scale.vdtq"),
                skew_upper=read_tensor(f"{stem}.skew.vdtq"),
                clip_w=np.array([clips[0]]),
                clip_a=np.array([clips[1]]),
            )
            baked = None
            if not disabled:
                spec = QuantSpec(bits=int(meta["bits_w"]), granularity=PER_CHANNEL,
                                 clip_factor=float(clips[0]))
                baked = QuantizedTensor(
                    ints=read_tensor(f"{stem}.ints.vdtq").astype(np.int32),
                    deltas=read_tensor(f"{stem}.deltas.vdtq"),
                    spec=spec,
                )
            per_layer[layer] = (transform, baked)
        blocks.append(per_layer)
    return blocks, meta


def check_compatible(model_cfg: ToyModelConfig, quant_meta: dict) -> None:
    if quant_meta["model"] != model_cfg.to_dict():
        raise ConfigError("quantized checkpoint was produced for a different model config")
