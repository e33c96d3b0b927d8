"""Command-line pipeline: gen, select, calibrate, eval, report.

Every command is driven by a JSON config file; flags override single fields
and the effective config is echoed into each artifact, so any report can be
reproduced byte-for-byte by re-running with its own echo. Exit codes: 0 ok,
2 config error, 3 numeric/training error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backend
from .checkpoint import (
    check_compatible,
    load_model,
    load_quantized,
    save_model,
    save_quantized,
)
from .config import RunConfig, dump_json
from .distill import sparsity_report, token_attention_mass
from .engine import TrainConfig, sequential_calibrate, student_block_forward
from .errors import ConfigError, IOFormatError, VdtqError, exit_code_for
from .model import build_toy_model, model_forward, synth_pool
from .selection import DiffusionTrajectory, select_baseline, select_calibration
from .tensorfile import read_tensor, write_tensor
from .transforms import MODE_DISABLED, MODE_STE

SPARSITY_TOP_FRAC = 0.1


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for field, attr in (("seed", "seed"), ("bits_w", "bits_w"), ("bits_a", "bits_a"),
                        ("epochs", "epochs"), ("k", "k_select"),
                        ("mode", "selection_mode"), ("distill", "distill_mode"),
                        ("norm", "norm_choice"), ("out", "out_dir")):
        value = getattr(args, field, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg.validate()


def _load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"manifest {path} not found")
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "vdtq-manifest":
        raise IOFormatError(f"{path}: not a vdtq manifest")
    return manifest, path.parent


def _manifest_trajectories(manifest, base: Path):
    trajs = []
    for entry in manifest["prompts"]:
        states = [read_tensor(base / rel) for rel in entry["states"]]
        trajs.append(DiffusionTrajectory(prompt_id=int(entry["prompt_id"]), states=states))
    return trajs


def _state_path(manifest, prompt_id: int, timestep: int) -> str:
    for entry in manifest["prompts"]:
        if int(entry["prompt_id"]) == prompt_id:
            return entry["states"][timestep - 1]
    raise ConfigError(f"prompt {prompt_id} not present in manifest")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)

    model = build_toy_model(cfg.model, cfg.seed)
    save_model(model, cfg.seed, out / "model")

    (out / "traj").mkdir(exist_ok=True)
    prompts = []
    for traj in synth_pool(cfg.model, cfg.seed):
        rels = []
        for t, state in enumerate(traj.states, start=1):
            rel = f"traj/p{traj.prompt_id:03d}_t{t:02d}.vdtq"
            write_tensor(out / rel, state)
            rels.append(rel)
        prompts.append({"prompt_id": traj.prompt_id, "states": rels})

    dump_json(out / "manifest.json", {
        "kind": "vdtq-manifest",
        "config": cfg.to_dict(),
        "model_dir": "model",
        "prompts": prompts,
    })
    print(f"gen: wrote model ({cfg.model.depth} blocks) and "
          f"{len(prompts)}x{cfg.model.timesteps} states under {out}")
    return 0


def _score_dict(s) -> dict:
    return {
        "prompt_id": s.prompt_id, "timestep": s.timestep,
        "c_diff_raw": s.c_diff_raw, "c_quant_raw": s.c_quant_raw,
        "c_diff_norm": s.c_diff_norm, "c_quant_norm": s.c_quant_norm,
        "c_sample": s.c_sample,
    }


def cmd_select(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    manifest, base = _load_manifest(args.manifest)
    trajs = _manifest_trajectories(manifest, base)

    if cfg.selection_mode == "sds":
        calib = select_calibration(trajs, cfg.k_select, cfg.norm_choice)
    else:
        calib = select_baseline(trajs, cfg.k_select, cfg.selection_mode,
                                cfg.seed, cfg.norm_choice)

    from .selection import score_candidates

    all_scores = score_candidates(trajs, cfg.norm_choice)
    selected = []
    for score in calib.scores:
        entry = _score_dict(score)
        entry["state"] = _state_path(manifest, score.prompt_id, score.timestep)
        selected.append(entry)

    out_path = cfg.resolved_out_dir() / "selection.json"
    dump_json(out_path, {
        "kind": "vdtq-selection",
        "config": cfg.to_dict(),
        "selection_rule": calib.selection_rule,
        "selected": selected,
        "all_scores": [_score_dict(s) for s in all_scores],
    })
    print(f"select[{cfg.selection_mode}]: {len(selected)} of {len(all_scores)} "
          f"candidates -> {out_path}")
    return 0


def _load_selection(path, base: Path):
    path = Path(path)
    if not path.exists():
        raise IOFormatError(f"selection file {path} not found")
    sel = json.loads(path.read_text())
    if sel.get("kind") != "vdtq-selection":
        raise IOFormatError(f"{path}: not a vdtq selection")
    states = [read_tensor(base / entry["state"]) for entry in sel["selected"]]
    return sel, states


def _candidate_states(trajs):
    states = []
    for traj in trajs:
        for t in range(2, traj.timesteps + 1):
            states.append(traj.state(t))
    return states


def _block_sparsity(model, states) -> list:
    shares = None
    for x in states:
        _, traces = model_forward(model, x)
        if shares is None:
            shares = [[] for _ in traces]
        for b, trace in enumerate(traces):
            mass = token_attention_mass(trace.attn_maps)
            shares[b].append(sparsity_report(mass, SPARSITY_TOP_FRAC)["mass_share"])
    return [{
        "block": b,
        "top_frac": SPARSITY_TOP_FRAC,
        "mass_share_mean": float(np.mean(vals)),
        "mass_share_min": float(np.min(vals)),
        "mass_share_max": float(np.max(vals)),
    } for b, vals in enumerate(shares)]


def cmd_calibrate(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    manifest, base = _load_manifest(args.manifest)
    model, model_seed = load_model(base / manifest["model_dir"])
    selection, calib_states = _load_selection(args.selection, base)

    trajs = _manifest_trajectories(manifest, base)
    eval_states = _candidate_states(trajs)

    train_cfg = cfg.train_config()
    results = sequential_calibrate(
        model, calib_states, train_cfg,
        train_count=cfg.train_samples,
        distill_std=(cfg.distill_mode == "std"),
        eval_states=eval_states,
    )

    out = cfg.resolved_out_dir()
    save_quantized(results, model.config, train_cfg, cfg.seed, out / "quant")

    report = {
        "kind": "vdtq-calibration-report",
        "config": cfg.to_dict(),
        "backend": backend.active_backend(),
        "selection_rule": selection["selection_rule"],
        "selected": selection["selected"],
        "per_block": [{
            "block": b,
            "loss_curve": res.loss_curve,
            "initial_loss": res.initial_loss,
            "final_loss": res.final_loss,
            "baked_train_loss": res.baked_train_loss,
            "eval_loss": res.eval_loss,
        } for b, res in enumerate(results)],
        "sparsity": _block_sparsity(model, calib_states),
        "seed": cfg.seed,
    }
    report_path = out / "calibration_report.json"
    dump_json(report_path, report)
    for b, res in enumerate(results):
        print(f"calibrate: block {b} loss {res.initial_loss:.6g} -> {res.final_loss:.6g} "
              f"(baked {res.baked_train_loss:.6g}, eval {res.eval_loss:.6g})")
    print(f"calibrate: report -> {report_path}")
    return 0


def quantized_model_forward(model, quant_blocks, meta, x):
    bits_w = int(meta["bits_w"])
    bits_a = int(meta["bits_a"])
    mode = MODE_DISABLED if meta["quant_disabled"] else MODE_STE
    cfg = TrainConfig(bits_w=bits_w, bits_a=bits_a, quant_disabled=meta["quant_disabled"])
    cur = x
    for block, per_layer in zip(model.blocks, quant_blocks):
        transforms = {name: t for name, (t, _q) in per_layer.items()}
        baked = {name: q for name, (_t, q) in per_layer.items() if q is not None}
        cur, _ = student_block_forward(cur, block, transforms, cfg, mode,
                                       baked=baked or None)
    return cur


def cmd_eval(args) -> int:
    manifest, base = _load_manifest(args.manifest)
    model_dir = Path(args.model) if args.model else base / manifest["model_dir"]
    model, _seed = load_model(model_dir)
    quant_blocks, meta = load_quantized(args.quant)
    check_compatible(model.config, meta)

    trajs = _manifest_trajectories(manifest, base)
    per_sample = []
    for traj in trajs:
        for t in range(1, traj.timesteps + 1):
            x = traj.state(t)
            fp_out, _ = model_forward(model, x)
            q_out = quantized_model_forward(model, quant_blocks, meta, x)
            diff = fp_out - q_out
            mse = float(np.mean(diff * diff))
            na = float(np.linalg.norm(fp_out))
            nb = float(np.linalg.norm(q_out))
            cosine = float(np.sum(fp_out * q_out) / (na * nb)) if na > 0 and nb > 0 else 1.0
            per_sample.append({"prompt_id": traj.prompt_id, "timestep": t,
                               "mse": mse, "cosine": cosine})

    report = {
        "kind": "vdtq-eval-report",
        "config": manifest["config"],
        "backend": backend.active_backend(),
        "quant": {"bits_w": meta["bits_w"], "bits_a": meta["bits_a"],
                  "quant_disabled": meta["quant_disabled"]},
        "per_sample": per_sample,
        "mean_mse": float(np.mean([s["mse"] for s in per_sample])),
        "mean_cosine": float(np.mean([s["cosine"] for s in per_sample])),
        "sparsity": _block_sparsity(model, _candidate_states(trajs)),
    }
    out_path = Path(args.out) if args.out else base / "eval_report.json"
    dump_json(out_path, report)
    print(f"eval: W{meta['bits_w']}A{meta['bits_a']} mean MSE {report['mean_mse']:.6g}, "
          f"mean cosine {report['mean_cosine']:.8f} -> {out_path}")
    return 0


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.exists():
        raise IOFormatError(f"report {path} not found")
    rep = json.loads(path.read_text())
    kind = rep.get("kind", "unknown")
    print(f"# {kind} ({path})")
    if kind == "vdtq-selection":
        print(f"rule: {rep['selection_rule']}")
        print(f"{'prompt':>6} {'t':>3} {'c_diff':>10} {'c_quant':>10} {'c_sample':>10}")
        for s in rep["selected"]:
            print(f"{s['prompt_id']:>6} {s['timestep']:>3} "
                  f"{s['c_diff_norm']:>10.4f} {s['c_quant_norm']:>10.4f} {s['c_sample']:>10.4f}")
    elif kind == "vdtq-calibration-report":
        cfg = rep["config"]
        print(f"W{cfg['bits_w']}A{cfg['bits_a']} selection={cfg['selection_mode']} "
              f"distill={cfg['distill_mode']} seed={rep['seed']}")
        for blk in rep["per_block"]:
            print(f"block {blk['block']}: loss {blk['initial_loss']:.6g} -> "
                  f"{blk['final_loss']:.6g}, baked {blk['baked_train_loss']:.6g}, "
                  f"eval {blk['eval_loss']:.6g}")
        for sp in rep["sparsity"]:
            print(f"block {sp['block']}: top-{int(sp['top_frac'] * 100)}% tokens hold "
                  f"{sp['mass_share_mean']:.3f} of attention mass")
    elif kind == "vdtq-eval-report":
        q = rep["quant"]
        print(f"W{q['bits_w']}A{q['bits_a']}: mean MSE {rep['mean_mse']:.6g}, "
              f"mean cosine {rep['mean_cosine']:.8f} over {len(rep['per_sample'])} samples")
    else:
        print(json.dumps(rep, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vdtq",
                                     description="toy video-DiT quantization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=False):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory/file override")
        if manifest:
            p.add_argument("--manifest", required=True)

    p_gen = sub.add_parser("gen", help="generate the toy model and trajectory fixtures")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_sel = sub.add_parser("select", help="score and select calibration samples")
    common(p_sel, manifest=True)
    p_sel.add_argument("--mode", choices=["sds", "random", "atop", "atfp", "rtfp"])
    p_sel.add_argument("--k", type=int)
    p_sel.add_argument("--norm", choices=["spectral", "frobenius"])
    p_sel.set_defaults(func=cmd_select)

    p_cal = sub.add_parser("calibrate", help="block-wise calibration + GPTQ bake")
    common(p_cal, manifest=True)
    p_cal.add_argument("--selection", required=True)
    p_cal.add_argument("--distill", choices=["std", "uniform"])
    p_cal.add_argument("--epochs", type=int)
    p_cal.add_argument("--bits-w", dest="bits_w", type=int)
    p_cal.add_argument("--bits-a", dest="bits_a", type=int)
    p_cal.set_defaults(func=cmd_calibrate)

    p_eval = sub.add_parser("eval", help="compare FP and quantized model outputs")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--quant", required=True, help="quantized checkpoint directory")
    p_eval.add_argument("--model", help="FP model directory (default: from manifest)")
    p_eval.add_argument("--out", help="eval report path")
    p_eval.set_defaults(func=cmd_eval)

    p_rep = sub.add_parser("report", help="pretty-print a vdtq report")
    p_rep.add_argument("report")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VdtqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
