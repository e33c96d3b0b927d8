"""Run configuration: the JSON file is the source of truth for every command.

CLI flags override individual fields; the effective config is echoed into
every report so that re-running from the echo reproduces the run exactly.
The ``VDTQ_OUT`` environment variable overrides the output directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .engine import TrainConfig
from .errors import ConfigError
from .model import ToyModelConfig

SELECTION_MODES = ("sds", "random", "atop", "atfp", "rtfp")
DISTILL_MODES = ("std", "uniform")
NORM_CHOICES = ("spectral", "frobenius")

OUT_DIR_ENV = "VDTQ_OUT"


@dataclass
class RunConfig:
    seed: int = 0
    bits_w: int = 4
    bits_a: int = 6
    k_select: int = 40
    train_samples: int = 30
    epochs: int = 15
    lr_transform: float = 5e-3
    lr_clip: float = 5e-2
    batch: int = 0
    lambda_min: float = 0.5
    lambda_max: float = 1.0
    norm_choice: str = "spectral"
    selection_mode: str = "sds"
    distill_mode: str = "std"
    damp_frac: float = 0.01
    quant_disabled: bool = False
    out_dir: str = "runs/out"
    model: ToyModelConfig = field(default_factory=ToyModelConfig)

    def validate(self) -> "RunConfig":
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.norm_choice not in NORM_CHOICES:
            raise ConfigError(f"norm_choice must be one of {NORM_CHOICES}")
        if not 2 <= self.bits_w <= 8 or not 2 <= self.bits_a <= 8:
            raise ConfigError("bit-widths must lie in [2, 8]")
        if self.k_select < 1:
            raise ConfigError("k_select must be positive")
        if self.train_samples < 1:
            raise ConfigError("train_samples must be positive")
        self.model.validate()
        self.train_config().validate()
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr_transform=self.lr_transform, lr_clip=self.lr_clip,
            batch=self.batch, bits_w=self.bits_w, bits_a=self.bits_a,
            lambda_min=self.lambda_min, lambda_max=self.lambda_max,
            damp_frac=self.damp_frac, quant_disabled=self.quant_disabled,
            seed=self.seed)

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.out_dir)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "bits_w": self.bits_w, "bits_a": self.bits_a,
            "k_select": self.k_select, "train_samples": self.train_samples,
            "epochs": self.epochs, "lr_transform": self.lr_transform,
            "lr_clip": self.lr_clip, "batch": self.batch,
            "lambda_min": self.lambda_min, "lambda_max": self.lambda_max,
            "norm_choice": self.norm_choice, "selection_mode": self.selection_mode,
            "distill_mode": self.distill_mode, "damp_frac": self.damp_frac,
            "quant_disabled": self.quant_disabled, "out_dir": self.out_dir,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        for key, value in d.items():
            if key == "model":
                cfg.model = ToyModelConfig.from_dict(value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config field {key!r}")
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)


def dump_json(path, obj: dict) -> None:
    """Deterministic JSON writer used for all reports and manifests."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")
