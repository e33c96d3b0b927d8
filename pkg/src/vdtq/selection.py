"""Calibration sample selection for denoising trajectories.

Every (prompt, timestep >= 2) state is a candidate. Each candidate gets two
raw scores: a step-information score (relative change against the previous
state) and a quantization-sensitivity score (spectral norm of ``x^T x``,
i.e. the dominant curvature of the layer-wise quantization error). Both are
min-max normalized over the whole pool and combined multiplicatively, so a
sample only ranks high when it is strong on both axes.

Baseline strategies used by the ablation CLI live here too: uniform random,
all timesteps of one prompt, and evenly spaced / random timesteps from the
first five prompts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateStateError, ShapeError
from .tensors import as_tensor, frobenius_sq, spectral_norm

NORM_SPECTRAL = "spectral"
NORM_FROBENIUS = "frobenius"


@dataclass
class DiffusionTrajectory:
    """Ordered denoising states ``x_1 .. x_T`` of one prompt, each [n, d]."""

    prompt_id: int
    states: list

    def __post_init__(self):
        if len(self.states) < 2:
            raise ShapeError("a trajectory needs at least two states")
        shape = self.states[0].shape
        for s in self.states:
            if s.shape != shape:
                raise ShapeError("all trajectory states must share one shape")

    @property
    def timesteps(self) -> int:
        return len(self.states)

    def state(self, t: int) -> np.ndarray:
        """State at 1-based timestep ``t``."""
        return self.states[t - 1]


@dataclass(frozen=True)
class SalienceScore:
    prompt_id: int
    timestep: int
    c_diff_raw: float
    c_quant_raw: float
    c_diff_norm: float = 0.0
    c_quant_norm: float = 0.0
    c_sample: float = 0.0


@dataclass
class CalibrationSet:
    """Ranked selection: samples[i] corresponds to scores[i]."""

    samples: list  # (prompt_id, timestep, state array)
    scores: list  # SalienceScore, descending c_sample
    selection_rule: str


def diffusion_salience(x_t, x_prev) -> float:
    """Relative squared change between consecutive states."""
    x_t = as_tensor(x_t)
    x_prev = as_tensor(x_prev)
    if x_t.shape != x_prev.shape:
        raise ShapeError(f"state shapes disagree: {x_t.shape} vs {x_prev.shape}")
    denom = frobenius_sq(x_t)
    if denom == 0.0:
        raise DegenerateStateError("state has zero norm; candidate must be dropped")
    return frobenius_sq(x_t - x_prev) / denom


def quantization_salience(x_t, norm_choice: str = NORM_SPECTRAL,
                          max_iters: int = 1000, tol: float = 1e-10):
    """Sensitivity score ``||x^T x||``: spectral norm by default.

    Returns ``(value, converged)``; the flag is always True for the
    Frobenius alternative.
    """
    x_t = as_tensor(x_t, 2)
    gram = x_t.T @ x_t
    if norm_choice == NORM_FROBENIUS:
        return float(np.sqrt(frobenius_sq(gram))), True
    if norm_choice != NORM_SPECTRAL:
        raise ConfigError(f"norm_choice must be 'spectral' or 'frobenius', got {norm_choice!r}")
    res = spectral_norm(gram, max_iters=max_iters, tol=tol)
    return res.value, res.converged


def normalize_scores(raw) -> list:
    """Min-max normalize to [0, 1]; a constant pool maps everything to 1."""
    vals = [float(v) for v in raw]
    if not vals:
        raise ShapeError("cannot normalize an empty score list")
    lo, hi = min(vals), max(vals)
    if hi == lo:
        return [1.0] * len(vals)
    span = hi - lo
    return [(v - lo) / span for v in vals]


def combined_salience(c_diff_norm: float, c_quant_norm: float) -> float:
    """Product score; maximal only when both axes are high (AM-GM bound)."""
    return c_diff_norm * c_quant_norm


def _candidates(trajectories):
    for traj in trajectories:
        for t in range(2, traj.timesteps + 1):
            yield traj.prompt_id, t, traj.state(t), traj.state(t - 1)


def score_candidates(trajectories, norm_choice: str = NORM_SPECTRAL) -> list:
    """Score every usable candidate; zero-norm states are silently dropped."""
    scored = []
    for prompt_id, t, x_t, x_prev in _candidates(trajectories):
        try:
            c_diff = diffusion_salience(x_t, x_prev)
        except DegenerateStateError:
            continue
        c_quant, _converged = quantization_salience(x_t, norm_choice)
        scored.append(SalienceScore(prompt_id=prompt_id, timestep=t,
                                    c_diff_raw=c_diff, c_quant_raw=c_quant))
    if not scored:
        raise ConfigError("no usable candidates in the trajectory pool")
    diff_norm = normalize_scores([s.c_diff_raw for s in scored])
    quant_norm = normalize_scores([s.c_quant_raw for s in scored])
    return [
        SalienceScore(
            prompt_id=s.prompt_id,
            timestep=s.timestep,
            c_diff_raw=s.c_diff_raw,
            c_quant_raw=s.c_quant_raw,
            c_diff_norm=dn,
            c_quant_norm=qn,
            c_sample=combined_salience(dn, qn),
        )
        for s, dn, qn in zip(scored, diff_norm, quant_norm)
    ]


def rank_key(score: SalienceScore):
    """Deterministic order: descending score, then earlier timestep, then prompt."""
    return (-score.c_sample, score.timestep, score.prompt_id)


def _states_by_key(trajectories):
    return {(traj.prompt_id, t): traj.state(t)
            for traj in trajectories
            for t in range(2, traj.timesteps + 1)}


def select_calibration(trajectories, k: int, norm_choice: str = NORM_SPECTRAL) -> CalibrationSet:
    """Top-k candidates by the combined salience score."""
    scores = score_candidates(trajectories, norm_choice)
    if k > len(scores):
        raise ConfigError(f"requested k={k} but the pool has only {len(scores)} candidates")
    if k < 1:
        raise ConfigError("k must be at least 1")
    ranked = sorted(scores, key=rank_key)[:k]
    states = _states_by_key(trajectories)
    samples = [(s.prompt_id, s.timestep, states[(s.prompt_id, s.timestep)]) for s in ranked]
    return CalibrationSet(samples=samples, scores=ranked,
                          selection_rule=f"top-{k} by combined salience ({norm_choice} norm)")


def _pick(scored, keys, rule) -> CalibrationSet:
    by_key = {(s.prompt_id, s.timestep): s for s in scored}
    picked = [by_key[key] for key in keys]
    return picked, rule


def select_baseline(trajectories, k: int, mode: str, seed: int,
                    norm_choice: str = NORM_SPECTRAL) -> CalibrationSet:
    """Ablation baselines: ``random``, ``atop``, ``atfp``, ``rtfp``.

    * random -- k uniform draws from the full pool
    * atop   -- all timesteps of prompt 0 (k must not exceed them)
    * atfp   -- evenly spaced timesteps across the first five prompts
    * rtfp   -- k uniform draws restricted to the first five prompts

    Scores are still computed so reports can compare strategies.
    """
    scored = score_candidates(trajectories, norm_choice)
    pool = [(s.prompt_id, s.timestep) for s in scored]
    prompts = sorted({p for p, _ in pool})
    rng = np.random.default_rng([seed, 0x5E1])

    if mode == "random":
        if k > len(pool):
            raise ConfigError(f"k={k} exceeds pool size {len(pool)}")
        idx = rng.choice(len(pool), size=k, replace=False)
        keys = [pool[i] for i in sorted(idx)]
        rule = f"random {k} of {len(pool)}"
    elif mode == "atop":
        keys = [key for key in pool if key[0] == prompts[0]]
        if k > len(keys):
            raise ConfigError(f"atop: prompt {prompts[0]} has only {len(keys)} candidates, k={k}")
        keys = keys[:k]
        rule = f"all timesteps, prompt {prompts[0]}"
    elif mode in ("atfp", "rtfp"):
        front = prompts[: min(5, len(prompts))]
        sub = [key for key in pool if key[0] in front]
        if k > len(sub):
            raise ConfigError(f"{mode}: first-{len(front)}-prompt pool has {len(sub)} candidates, k={k}")
        if mode == "rtfp":
            idx = rng.choice(len(sub), size=k, replace=False)
            keys = [sub[i] for i in sorted(idx)]
            rule = f"random {k} timesteps from {len(front)} prompts"
        else:
            # evenly spaced over each prompt's timesteps, round-robin remainder
            per = {p: [key for key in sub if key[0] == p] for p in front}
            base, extra = divmod(k, len(front))
            keys = []
            for i, p in enumerate(front):
                want = base + (1 if i < extra else 0)
                avail = per[p]
                pos = np.linspace(0, len(avail) - 1, num=want).round().astype(int)
                keys.extend(avail[j] for j in sorted(set(int(x) for x in pos)))
            # even spacing can collapse duplicates; top up deterministically
            remaining = [key for key in sub if key not in set(keys)]
            keys.extend(remaining[: k - len(keys)])
            rule = f"evenly spaced timesteps from {len(front)} prompts"
    else:
        raise ConfigError(f"unknown selection mode {mode!r}")

    picked, rule = _pick(scored, keys, rule)
    picked = sorted(picked, key=rank_key)
    states = _states_by_key(trajectories)
    samples = [(s.prompt_id, s.timestep, states[(s.prompt_id, s.timestep)]) for s in picked]
    return CalibrationSet(samples=samples, scores=picked, selection_rule=rule)
