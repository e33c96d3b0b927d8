"""A miniature pre-LN transformer block stack with synthetic denoising data.

Blocks operate on token grids of ``n = spatial * temporal`` positions and are
seeded-random: good enough to exercise quantizers, selection and calibration
at desk scale, which is the whole point. Query/key weights can be sharpened
by a config factor to induce the concentrated attention-column patterns that
the token-weighted distillation loss exploits.

Trajectories interpolate a per-prompt signal tensor toward a noise tensor
under a mixing schedule; a steep schedule band concentrates the step-to-step
change (and therefore selection-relevant information) in a few timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .selection import DiffusionTrajectory
from .tensors import AttentionOutput, as_tensor, attention_forward

SCHEDULE_CONSTANT = "constant"
SCHEDULE_LINEAR = "linear"
SCHEDULE_STEEP_BAND = "steep_band"


@dataclass
class ScheduleConfig:
    """Mixing schedule gamma_t for the synthetic trajectories."""

    kind: str = SCHEDULE_STEEP_BAND
    band: tuple = (5, 12)  # steep segment, 1-based timesteps (lo, hi]
    gamma_lo: float = 0.05
    gamma_hi: float = 0.9
    band_gain: float = 12.0  # per-step increment ratio inside vs outside band

    def to_dict(self) -> dict:
        return {"kind": self.kind, "band": list(self.band),
                "gamma_lo": self.gamma_lo, "gamma_hi": self.gamma_hi,
                "band_gain": self.band_gain}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        out = cls()
        for k, v in d.items():
            if not hasattr(out, k):
                raise ConfigError(f"unknown schedule field {k!r}")
            setattr(out, k, tuple(v) if k == "band" else v)
        return out


@dataclass
class ToyModelConfig:
    depth: int = 2
    d: int = 32
    heads: int = 4
    spatial: int = 16
    temporal: int = 4
    timesteps: int = 12
    prompts: int = 10
    sharpen: float = 1.5
    hub_align: float = 9.0
    hub_focus: float = 0.75
    noise_gain: float = 1.0
    channel_spread: float = 1.0
    signal_jitter: float = 0.05
    amplitude_range: tuple = (0.9, 1.25)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    @property
    def n_tokens(self) -> int:
        return self.spatial * self.temporal

    def validate(self) -> "ToyModelConfig":
        if self.depth < 1 or self.d < 2 or self.heads < 1:
            raise ConfigError("depth, d and heads must be positive")
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.spatial < 1 or self.temporal < 1:
            raise ConfigError("spatial and temporal token counts must be positive")
        if self.timesteps < 2:
            raise ConfigError("need at least two diffusion timesteps")
        if self.prompts < 1:
            raise ConfigError("need at least one prompt")
        return self

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "d": self.d, "heads": self.heads,
            "spatial": self.spatial, "temporal": self.temporal,
            "timesteps": self.timesteps, "prompts": self.prompts,
            "sharpen": self.sharpen, "hub_align": self.hub_align,
            "hub_focus": self.hub_focus, "noise_gain": self.noise_gain,
            "channel_spread": self.channel_spread,
            "signal_jitter": self.signal_jitter,
            "amplitude_range": list(self.amplitude_range),
            "schedule": self.schedule.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        out = cls()
        for k, v in d.items():
            if k == "schedule":
                out.schedule = ScheduleConfig.from_dict(v)
            elif k == "amplitude_range":
                out.amplitude_range = tuple(v)
            elif hasattr(out, k):
                setattr(out, k, v)
            else:
                raise ConfigError(f"unknown model field {k!r}")
        return out.validate()


@dataclass
class ToyBlock:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray  # [4d, d]
    w2: np.ndarray  # [d, 4d]
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    num_heads: int

    # names of the quantized linear layers, in forward order
    LAYERS = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")

    def weight(self, layer: str) -> np.ndarray:
        return {"attn_q": self.wq, "attn_k": self.wk, "attn_v": self.wv,
                "attn_o": self.wo, "mlp_in": self.w1, "mlp_out": self.w2}[layer]


@dataclass
class ToyModel:
    config: ToyModelConfig
    blocks: list


def channel_profiles(cfg: ToyModelConfig, seed: int):
    """Per-channel scale profiles shared by all prompts of one seed.

    Both profiles carry unit mean-square energy, so what varies along a
    trajectory is channel anisotropy rather than scale: early
    (signal-dominated) states are isotropic and gain only generic
    improvements from calibration, while late (noise-dominated) states
    concentrate energy in a few heavy channels and need transforms fitted
    to that structure.
    """
    rng = np.random.default_rng([seed, 0xC4A2])
    signal_profile = np.ones(cfg.d)
    noise_profile = np.exp(cfg.channel_spread * rng.normal(size=cfg.d))
    noise_profile /= np.sqrt(np.mean(noise_profile ** 2))
    return signal_profile, noise_profile


def outlier_channels(cfg: ToyModelConfig, seed: int) -> np.ndarray:
    """Indices of the heaviest noise channels (the planted outlier group)."""
    _, noise_profile = channel_profiles(cfg, seed)
    k = max(1, cfg.d // 8)
    return np.sort(np.argsort(noise_profile)[-k:])


def hub_channels(cfg: ToyModelConfig, seed: int) -> np.ndarray:
    """Indices of the quietest channels: the ones hub-token content lives in.

    Keeping hub content away from the outlier channels makes hub tokens
    stand out to the attention keys at every timestep, and puts their
    quantization fate in tension with the rotation that serves the majority
    rows (which wants to smear the heavy channels across the quiet ones).
    """
    _, noise_profile = channel_profiles(cfg, seed)
    k = max(1, cfg.d // 8)
    return np.sort(np.argsort(noise_profile)[:k])


def hub_key_direction(cfg: ToyModelConfig, seed: int) -> np.ndarray:
    """Unit indicator of the hub channels; keys aligned with it turn the
    tokens that carry concentrated hub-channel content into attention hubs."""
    idx = hub_channels(cfg, seed)
    b = np.zeros(cfg.d)
    b[idx] = 1.0 / np.sqrt(len(idx))
    return b


def build_toy_model(cfg: ToyModelConfig, seed: int) -> ToyModel:
    """Seeded Gaussian blocks (std 1/sqrt(d)) with optionally sharpened attention.

    Sharpening scales the query/key weights by ``sharpen`` and plants a
    rank-1 key-side alignment (strength ``hub_align``, also gated by
    ``sharpen``) toward the outlier-channel direction. The planted component
    is what produces column-concentrated attention: the same few
    outlier-heavy tokens receive most of the mass in every block.
    """
    cfg.validate()
    rng = np.random.default_rng([seed, 0xB10C])
    d = cfg.d
    std = 1.0 / np.sqrt(d)
    b_dir = hub_key_direction(cfg, seed)
    blocks = []
    for _ in range(cfg.depth):
        wq = rng.normal(0.0, std, (d, d))
        wk = rng.normal(0.0, std, (d, d))
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        # query and key sides share the hub direction: hub tokens attend to
        # each other decisively while diffuse tokens read near-uniformly
        wq = (wq + cfg.hub_align * np.outer(u, b_dir)) * cfg.sharpen
        wk = (wk + cfg.hub_align * np.outer(u, b_dir)) * cfg.sharpen
        blocks.append(ToyBlock(
            wq=wq,
            wk=wk,
            wv=rng.normal(0.0, std, (d, d)),
            wo=rng.normal(0.0, std, (d, d)),
            w1=rng.normal(0.0, std, (4 * d, d)),
            w2=rng.normal(0.0, std, (d, 4 * d)),
            ln1_g=np.ones(d), ln1_b=np.zeros(d),
            ln2_g=np.ones(d), ln2_b=np.zeros(d),
            num_heads=cfg.heads,
        ))
    return ToyModel(config=cfg, blocks=blocks)


LN_EPS = 1e-6


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + np.tanh(0.7978845608028654 * (u + 0.044715 * u ** 3)))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    w = 0.7978845608028654 * (u + 0.044715 * u ** 3)
    th = np.tanh(w)
    dw = 0.7978845608028654 * (1.0 + 3 * 0.044715 * u ** 2)
    return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th ** 2) * dw


def block_forward(x: np.ndarray, block: ToyBlock):
    """Pre-LN residual block; returns the output and the attention maps."""
    x = as_tensor(x, 2)
    if x.shape[1] != block.wq.shape[1]:
        raise ShapeError(f"input dim {x.shape[1]} does not match block dim {block.wq.shape[1]}")
    attn: AttentionOutput = attention_forward(
        layer_norm(x, block.ln1_g, block.ln1_b),
        block.wq, block.wk, block.wv, block.wo, block.num_heads)
    h = x + attn.output
    z = layer_norm(h, block.ln2_g, block.ln2_b)
    hidden = gelu(z @ block.w1.T)
    out = h + hidden @ block.w2.T
    return out, attn.attn_maps


@dataclass(frozen=True)
class BlockTrace:
    """One block's teacher-side forward record."""

    block_input: np.ndarray
    block_output: np.ndarray
    attn_maps: np.ndarray


def model_forward(model: ToyModel, x: np.ndarray):
    """Run all blocks; returns (final output, per-block traces)."""
    traces = []
    cur = as_tensor(x, 2)
    for block in model.blocks:
        out, maps = block_forward(cur, block)
        traces.append(BlockTrace(block_input=cur, block_output=out, attn_maps=maps))
        cur = out
    return cur, traces


def gamma_schedule(cfg: ToyModelConfig) -> np.ndarray:
    """Mixing coefficients gamma_1..gamma_T."""
    sched = cfg.schedule
    t_total = cfg.timesteps
    if sched.kind == SCHEDULE_CONSTANT:
        return np.full(t_total, sched.gamma_lo)
    if sched.kind == SCHEDULE_LINEAR:
        return np.linspace(sched.gamma_lo, sched.gamma_hi, t_total)
    if sched.kind != SCHEDULE_STEEP_BAND:
        raise ConfigError(f"unknown schedule kind {sched.kind!r}")
    lo_t, hi_t = sched.band
    if not 1 <= lo_t < hi_t <= t_total:
        raise ConfigError(f"band {sched.band} must sit inside [1, {t_total}]")
    # per-step increments: band steps get `band_gain` times the outside weight
    inc = np.ones(t_total - 1)
    for t in range(2, t_total + 1):
        if lo_t < t <= hi_t:
            inc[t - 2] = sched.band_gain
    inc *= (sched.gamma_hi - sched.gamma_lo) / inc.sum()
    return sched.gamma_lo + np.concatenate([[0.0], np.cumsum(inc)])


def synth_trajectory(prompt_id: int, cfg: ToyModelConfig, seed: int) -> DiffusionTrajectory:
    """States ``x_t = amp * ((1 - gamma_t) * signal + gamma_t * noise)``.

    The signal component is largely shared across prompts (plus a small
    per-prompt jitter), so flat-schedule early timesteps are near-duplicates
    across the pool; the noise component is fully prompt-specific. A few
    "hub" token rows per prompt have ``hub_focus`` of their energy moved
    into the quiet hub channels (norms preserved): they are the rows the
    sharpened attention concentrates on.
    """
    cfg.validate()
    n = cfg.n_tokens
    signal_profile, noise_profile = channel_profiles(cfg, seed)
    common = np.random.default_rng([seed, 0x5160]).normal(size=(n, cfg.d))
    rng = np.random.default_rng([seed, 0x7A03, prompt_id])
    jitter = cfg.signal_jitter
    signal = (common + jitter * rng.normal(size=(n, cfg.d)))
    signal *= signal_profile / np.sqrt(1.0 + jitter * jitter)
    noise = rng.normal(size=(n, cfg.d)) * noise_profile * cfg.noise_gain
    hub_rows = rng.choice(n, size=max(1, n // 8), replace=False)
    chan = hub_channels(cfg, seed)
    for arr in (signal, noise):
        _concentrate_rows(arr, hub_rows, chan, cfg.hub_focus, rng)
    amp = rng.uniform(*cfg.amplitude_range)
    gammas = gamma_schedule(cfg)
    states = [amp * ((1.0 - g) * signal + g * noise) for g in gammas]
    return DiffusionTrajectory(prompt_id=prompt_id, states=states)


def _concentrate_rows(arr: np.ndarray, rows, chan, focus: float, rng) -> None:
    """Move ``focus`` of each row's energy into ``chan``, norm preserved."""
    if focus <= 0.0:
        return
    spikes = rng.normal(size=(len(rows), len(chan)))
    spikes /= np.linalg.norm(spikes, axis=1, keepdims=True)
    norms = np.linalg.norm(arr[rows], axis=1, keepdims=True)
    arr[rows] *= np.sqrt(1.0 - focus)
    arr[np.ix_(rows, chan)] += np.sqrt(focus) * norms * spikes


def synth_pool(cfg: ToyModelConfig, seed: int) -> list:
    """All prompts' trajectories for one seed."""
    return [synth_trajectory(p, cfg, seed) for p in range(cfg.prompts)]
