"""Training, evaluation and prediction loops."""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .data import DatasetManifest, load_clip_block, load_manifest
from .encoders import load_clip_features
from .errors import ConfigHashMismatchError, NumericalAbort
from .losses import layer_losses, total_loss
from .metrics import FinalPrediction, GroundTruth, MetricsReport, evaluate_dataset, filter_predictions
from .model import EgoSAG, SceneGeometry, prepare_scene
from .pointcloud import PointCloudScene, load_scene

log = logging.getLogger(__name__)


@dataclass
class Sample:
    pair_id: str
    geometry: SceneGeometry
    clip: object  # raw block (np.ndarray) or ClipFeatures
    affordance_id: int
    gt_masks: list
    gt_sp: np.ndarray
    regions: list = field(default_factory=list)  # indices into the scene's gt regions
    variants: list = field(default_factory=list, repr=False)  # (geometry, gt_sp) of rigid copies


def set_determinism(seed, deterministic):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def load_samples(manifest: DatasetManifest, cfg: RunConfig, geometry_cache=None):
    cache = {} if geometry_cache is None else geometry_cache
    samples = []
    for p in manifest.pairs:
        if p.scene_id not in cache:
            cache[p.scene_id] = prepare_scene(load_scene(manifest.scene_path(p.scene_id)), cfg.model)
        geom = cache[p.scene_id]
        if manifest.clip_format == "features":
            clip = load_clip_features(manifest.clip_path(p.clip_id))
            affordance = clip.affordance_id
        else:
            clip, meta = load_clip_block(manifest.clip_path(p.clip_id))
            affordance = int(meta["affordance_id"])
        masks, gt_sp = geom.gt_for(p.gt_region_indices)
        samples.append(Sample(f"{p.clip_id}@{p.scene_id}", geom, clip, affordance, masks, gt_sp,
                              list(p.gt_region_indices)))
    return samples


def rigid_copy(scene: PointCloudScene, k: int) -> PointCloudScene:
    """Rotate by ``k % 4`` quarter turns about the vertical axis through the centroid; mirror x when k >= 4."""
    c = scene.coords.mean(axis=0)
    x, y = (scene.coords[:, 0] - c[0]), (scene.coords[:, 1] - c[1])
    for _ in range(k % 4):
        x, y = -y, x
    if k >= 4:
        x = -x
    coords = np.stack([x + c[0], y + c[1], scene.coords[:, 2]], axis=1)
    return PointCloudScene(coords, scene.colors, scene.gt_masks, scene.gt_affordance_ids, f"{scene.scene_id}~{k}")


def add_rigid_variants(samples, cfg: RunConfig):
    """Attach ``cfg.data.augment`` precomputed rigid copies (geometry and pooled gt) to every sample."""
    n = cfg.data.augment
    by_scene = {}
    for s in samples:
        key = id(s.geometry)
        if key not in by_scene:
            by_scene[key] = [prepare_scene(rigid_copy(s.geometry.scene, k), cfg.model) for k in range(1, n + 1)]
        s.variants = [(g, g.gt_for(s.regions)[1]) for g in by_scene[key]]
    return samples


def sample_loss(model, sample: Sample, cfg: RunConfig):
    preds = model(sample.geometry, sample.clip)
    if not cfg.loss.deep_supervision:
        preds = preds[-1:]
    per_layer = [layer_losses(p, sample.affordance_id, sample.gt_sp, np.stack(sample.gt_masks, 1)
                              if sample.gt_masks else np.zeros((sample.geometry.scene.n_points, 0)),
                              sample.geometry.superpoints, cfg.loss.zeta, cfg.loss.dice_variant,
                              cfg.loss.iou_threshold)
                 for p in preds]
    return total_loss(per_layer, cfg.loss.lambdas), preds


def make_optimizer(model, cfg: RunConfig):
    o = cfg.optim
    if o.algorithm == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
    if o.algorithm == "adam":
        return torch.optim.Adam(model.parameters(), lr=o.lr)
    return torch.optim.SGD(model.parameters(), lr=o.lr, momentum=0.9)


@torch.no_grad()
def predict_sample(model, sample: Sample, tau=0.5, top_k=None) -> FinalPrediction:
    model.eval()
    preds = model(sample.geometry, sample.clip)
    return filter_predictions(preds[-1], sample.geometry.superpoints, tau, top_k)


def evaluate(model, samples, tau=0.5, top_k=None):
    preds = [predict_sample(model, s, tau, top_k) for s in samples]
    gts = [GroundTruth(s.gt_masks, [s.affordance_id] * len(s.gt_masks)) for s in samples]
    return evaluate_dataset(preds, gts), preds


def class_accuracy(preds, samples):
    if not samples:
        return 0.0
    return float(np.mean([p.affordance_id == s.affordance_id for p, s in zip(preds, samples)]))


def build_model(cfg: RunConfig):
    torch.manual_seed(cfg.optim.seed)
    return EgoSAG(cfg.model)


def train(cfg: RunConfig, train_samples=None, val_samples=None, output=None, log_steps=True):
    """Run ``cfg.optim.steps`` optimizer steps; returns a summary dict.

    Each step accumulates gradients over ``cfg.optim.batch`` samples. Samples
    are visited in a per-epoch shuffled order drawn from ``cfg.optim.seed``.
    """
    set_determinism(cfg.optim.seed, cfg.optim.deterministic)
    if train_samples is None:
        train_samples = load_samples(load_manifest(cfg.data.manifest), cfg)
    if val_samples is None and cfg.data.val_manifest:
        val_samples = load_samples(load_manifest(cfg.data.val_manifest), cfg)
    out = Path(output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.yaml")

    if cfg.data.augment and not all(s.variants for s in train_samples):
        add_rigid_variants(train_samples, cfg)
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    sched = None
    if cfg.optim.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.optim.steps, 1))
    order_rng = np.random.default_rng(cfg.optim.seed)
    queue = []
    history = []
    best_map, best_step = -1.0, None
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as log_file:
        for step in range(1, cfg.optim.steps + 1):
            model.train()
            opt.zero_grad()
            batch_ids, parts = [], []
            for _ in range(cfg.optim.batch):
                if not queue:
                    queue = list(order_rng.permutation(len(train_samples)))
                s = train_samples[int(queue.pop(0))]
                if s.variants:
                    v = int(order_rng.integers(len(s.variants) + 1))
                    if v:
                        s = replace(s, geometry=s.variants[v - 1][0], gt_sp=s.variants[v - 1][1])
                loss, _ = sample_loss(model, s, cfg)
                batch_ids.append(s.pair_id)
                if not math.isfinite(loss.total):
                    dump = out / f"nan_step{step}.json"
                    dump.write_text(json.dumps({"step": step, "batch_ids": batch_ids,
                                                "loss": loss.as_dict()}))
                    raise NumericalAbort(f"non-finite loss at step {step}; see {dump}", batch_ids)
                (loss.total_tensor / cfg.optim.batch).backward()
                parts.append(loss.as_dict())
            if cfg.optim.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            record = {"step": step, "batch_ids": batch_ids,
                      **{k: float(np.mean([p[k] for p in parts])) for k in parts[0]}}
            history.append(record)
            if log_steps and step % cfg.optim.log_every == 0:
                log_file.write(json.dumps(record) + "\n")
            if val_samples and cfg.optim.eval_every and step % cfg.optim.eval_every == 0:
                report, _ = evaluate(model, val_samples, cfg.loss.tau, cfg.loss.top_k or None)
                log.info("step %d val mAP %.2f AP25 %.2f", step, report.mAP, report.AP25)
                if report.mAP > best_map:
                    best_map, best_step = report.mAP, step
                    _save(out / "best.ckpt", model, opt, cfg, {"step": step, "val": report.to_dict()})
    _save(out / "last.ckpt", model, opt, cfg, {"step": cfg.optim.steps})
    if best_step is None:
        _save(out / "best.ckpt", model, opt, cfg, {"step": cfg.optim.steps})
    return {"model": model, "history": history, "best_step": best_step, "output": out}


def _save(path, model, opt, cfg, extra):
    save_checkpoint(path, model.state_dict(), opt.state_dict(), cfg.to_dict(), cfg.model_hash(), extra)


def load_model(path, cfg: RunConfig, strict_hash=True):
    ck = load_checkpoint(path, cfg.model_hash() if strict_hash else None)
    model = EgoSAG(cfg.model)
    model.load_state_dict(ck["model"])
    model.eval()
    return model, ck


def config_from_checkpoint(path):
    from .config import _build  # noqa: PLC0415

    ck = load_checkpoint(path)
    cfg = _build(RunConfig, ck["config"], "")
    if cfg.model_hash() != ck["config_hash"]:
        raise ConfigHashMismatchError(f"{path}: embedded config does not match its hash")
    return cfg


def report_lines(report: MetricsReport, catalog=None):
    return report.table(catalog)
