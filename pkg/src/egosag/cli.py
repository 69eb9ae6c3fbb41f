"""Command line: ``egosag {train,eval,predict,synth-data}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import data as synth
from .config import load_config, save_config
from .encoders import FEATURE_MAGIC, ClipFeatures, load_clip_features
from .engine import (Sample, class_accuracy, config_from_checkpoint, evaluate, load_model, load_samples,
                     predict_sample, set_determinism, train)
from .errors import ConfigError, ConfigHashMismatchError, DataError, EgoSAGError, MissingFileError
from .model import prepare_scene
from .pointcloud import load_scene, write_ply

log = logging.getLogger("egosag")

RED = np.array([1.0, 0.0, 0.0])


def _common(p):
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--output", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="egosag", description="affordance grounding on point clouds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--preset", help="named run preset, e.g. tiny")
    p.add_argument("--manifest", help="training manifest (overrides data.manifest)")
    p.add_argument("--val-manifest", help="validation manifest (overrides data.val_manifest)")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("predict", help="predict masks for one scene and clip")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene PLY (sidecar optional)")
    p.add_argument("--clip", required=True, help="clip block or clip feature file")
    p.add_argument("--tau", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--export-ply", action="store_true", help="also write the scene with predicted points in red")

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--preset", default="tiny", choices=sorted(synth.SYNTH_PRESETS))
    return parser


def _run_config(args, preset=None):
    overrides = {}
    if args.seed is not None:
        overrides.setdefault("optim", {})["seed"] = args.seed
    if args.deterministic:
        overrides.setdefault("optim", {})["deterministic"] = True
    if getattr(args, "steps", None) is not None:
        overrides.setdefault("optim", {})["steps"] = args.steps
    if getattr(args, "manifest", None) and args.command == "train":
        overrides.setdefault("data", {})["manifest"] = args.manifest
    if getattr(args, "val_manifest", None):
        overrides.setdefault("data", {})["val_manifest"] = args.val_manifest
    if args.output:
        overrides["output"] = args.output
    return load_config(args.config, preset, overrides)


def _checkpoint_config(args):
    """Config embedded in the checkpoint; an explicit --config must describe the same model."""
    cfg = config_from_checkpoint(args.checkpoint)
    if args.config:
        explicit = load_config(args.config)
        if explicit.model_hash() != cfg.model_hash():
            raise ConfigHashMismatchError(
                f"{args.config} describes model {explicit.model_hash()}, checkpoint holds {cfg.model_hash()}")
        cfg.loss = explicit.loss
    if args.seed is not None:
        cfg.optim.seed = args.seed
    cfg.optim.deterministic = cfg.optim.deterministic or args.deterministic
    if getattr(args, "tau", None) is not None:
        cfg.loss.tau = args.tau
    if getattr(args, "top_k", None) is not None:
        cfg.loss.top_k = args.top_k
    return cfg


def _emit_report(report, out_dir, catalog=None):
    (out_dir / "metrics.json").write_text(report.to_json())
    print(json.dumps(report.to_dict(), sort_keys=True))
    print(report.table(catalog))


def cmd_train(args):
    cfg = _run_config(args, args.preset)
    if not cfg.data.manifest:
        raise ConfigError("no training manifest given", "data.manifest")
    set_determinism(cfg.optim.seed, cfg.optim.deterministic)
    train_m = synth.load_manifest(cfg.data.manifest)
    cache = {}
    train_s = load_samples(train_m, cfg, cache)
    val_s = load_samples(synth.load_manifest(cfg.data.val_manifest), cfg, cache) if cfg.data.val_manifest else None
    res = train(cfg, train_s, val_s, cfg.output)
    out = res["output"]
    eval_s = val_s or train_s
    report, preds = evaluate(res["model"], eval_s, cfg.loss.tau, cfg.loss.top_k or None)
    summary = {"first_total": res["history"][0]["total"] if res["history"] else None,
               "final_total": res["history"][-1]["total"] if res["history"] else None,
               "best_step": res["best_step"], "split": "val" if val_s else "train",
               "class_accuracy": class_accuracy(preds, eval_s)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _emit_report(report, out, train_m.affordance_catalog)
    return 0


def cmd_eval(args):
    cfg = _checkpoint_config(args)
    set_determinism(cfg.optim.seed, cfg.optim.deterministic)
    out = Path(args.output or Path(args.checkpoint).parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.yaml")
    model, _ = load_model(args.checkpoint, cfg)
    manifest = synth.load_manifest(args.manifest)
    samples = load_samples(manifest, cfg)
    report, preds = evaluate(model, samples, cfg.loss.tau, cfg.loss.top_k or None)
    dump = [p.to_json(s.pair_id) for p, s in zip(preds, samples)]
    (out / "predictions.json").write_text(json.dumps(dump))
    _emit_report(report, out, manifest.affordance_catalog)
    return 0


def _read_clip(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "clip file")
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == FEATURE_MAGIC:
        return load_clip_features(path)
    clip, _ = synth.load_clip_block(path)
    return clip


def cmd_predict(args):
    cfg = _checkpoint_config(args)
    set_determinism(cfg.optim.seed, cfg.optim.deterministic)
    out = Path(args.output or Path(args.checkpoint).parent / "predict")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.yaml")
    model, _ = load_model(args.checkpoint, cfg)
    scene = load_scene(args.scene, require_sidecar=False)
    clip = _read_clip(args.clip)
    if isinstance(clip, ClipFeatures) and clip.width != cfg.model.width:
        raise DataError(f"clip features have width {clip.width}, model expects {cfg.model.width}")
    geom = prepare_scene(scene, cfg.model)
    sample = Sample(scene.scene_id, geom, clip, -1, [], np.zeros((geom.superpoints.M, 0)))
    pred = predict_sample(model, sample, cfg.loss.tau, cfg.loss.top_k or None)
    record = pred.to_json(scene.scene_id)
    (out / "predictions.json").write_text(json.dumps(record, indent=1))
    if args.export_ply:
        colors = scene.colors.copy()
        for m in pred.point_masks:
            colors[m] = RED
        write_ply(out / f"{scene.scene_id}_pred.ply", scene.coords, colors)
    print(json.dumps({"scene": scene.scene_id, "affordance_id": record["affordance_id"],
                      "n_masks": len(record["predictions"]),
                      "scores": [p["score"] for p in record["predictions"]]}))
    return 0


def cmd_synth_data(args):
    extra = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "--config")
        extra = yaml.safe_load(path.read_text()) or {}
        if not isinstance(extra, dict):
            raise ConfigError("expected a mapping", "<root>")
    if args.seed is not None:
        extra["rng_seed"] = args.seed
    fields = set(asdict(synth.SynthConfig()))
    for key in extra:
        if key not in fields:
            raise ConfigError("unknown config key", key)
    if "regions_per_scene" in extra:
        extra["regions_per_scene"] = tuple(extra["regions_per_scene"])
    try:
        cfg = synth.synth_preset(args.preset, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), "synth") from e
    out = Path(args.output or f"data/{args.preset}")
    train_m, val_m = synth.generate_dataset(cfg, out)
    problems = synth.validate_dataset(train_m) + synth.validate_dataset(val_m)
    if problems:
        raise DataError("generated dataset failed validation: " + "; ".join(problems[:5]))
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(
        {**asdict(cfg), "regions_per_scene": list(cfg.regions_per_scene), "preset": args.preset}, sort_keys=False))
    print(json.dumps({"output": str(out), "scenes": cfg.n_scenes, "clips": cfg.n_clips,
                      "train_pairs": len(train_m.pairs), "val_pairs": len(val_m.pairs)}))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "synth-data": cmd_synth_data}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EgoSAGError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.code


if __name__ == "__main__":
    sys.exit(main())
