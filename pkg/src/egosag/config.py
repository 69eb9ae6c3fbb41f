"""Run configuration: nested dataclasses, file loading, env overrides and presets.

Environment overrides use the ``EGOSAG_`` prefix with ``__`` between levels,
e.g. ``EGOSAG_MODEL__WIDTH=64`` or ``EGOSAG_LOSS__LAMBDAS=[1,0,0,0]``. Values
are parsed as YAML scalars/lists.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class ModelConfig:
    width: int = 512
    queries: int = 50
    layers: int = 6
    heads: int = 8
    n_classes: int = 17
    unet_widths: tuple = (32, 64, 128, 256, 512)
    in_channels: int = 6
    voxel_size: float = 0.05
    target_m: int = 512
    sp_color_weight: float = 1.0
    isa_enabled: bool = True
    isa_heads: int = 4
    isa_max_centroids: int = 64
    isa_k: int = 16
    isa_reducer: str = "max"
    isa_gate_bias: float = -4.0
    decoder: str = "bqd"  # "bqd" | "cross_fusion"
    encoder_mode: str = "toy"  # "toy" | "precomputed"
    frames: int = 16
    video_hidden: tuple = (16, 32, 64)
    video_strides: tuple = ((2, 4, 4), (2, 4, 4), (1, 2, 2))
    query_seed: int = 0


@dataclass
class LossConfig:
    lambdas: tuple = (1.0, 0.5, 0.5, 0.5)
    zeta: tuple = (2.0, 5.0)
    dice_variant: str = "literal"
    tau: float = 0.5
    top_k: int = 0  # keep at most this many masks per prediction; 0 keeps all
    iou_threshold: float = 0.5
    deep_supervision: bool = True


@dataclass
class OptimConfig:
    algorithm: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.01
    steps: int = 300
    batch: int = 1
    seed: int = 0
    deterministic: bool = False
    grad_clip: float = 0.0
    schedule: str = "constant"  # "constant" | "cosine"
    eval_every: int = 100
    log_every: int = 1


@dataclass
class DataConfig:
    manifest: str = ""
    val_manifest: str = ""
    augment: int = 0  # precomputed rigid copies per training scene (quarter turns, then mirrored); at most 7


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: str = "runs/egosag"

    def to_dict(self):
        return _jsonable(dataclasses.asdict(self))

    def model_hash(self):
        """Hash of everything that determines parameter shapes and forward semantics."""
        blob = json.dumps(_jsonable(dataclasses.asdict(self.model)), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _tupleize(v):
    return tuple(_tupleize(x) for x in v) if isinstance(v, (list, tuple)) else v


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path or "<root>")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key_path = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError("unknown config key", key_path)
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING \
            else fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, key_path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"expected a list, got {value!r}", key_path)
            kwargs[key] = _tupleize(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"expected a boolean, got {value!r}", key_path)
            kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"expected a number, got {value!r}", key_path)
            kwargs[key] = type(default)(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _merge(base, update):
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def env_overrides(environ=None, prefix="EGOSAG_"):
    environ = os.environ if environ is None else environ
    tree = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(prefix):
            continue
        keys = name[len(prefix):].lower().split("__")
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return tree


RUN_PRESETS = {
    # desk-scale model trained on the "tiny" synthetic preset
    "tiny": {
        # rgb-only point features and rigid copies keep the U-Net from memorising the six training rooms
        "model": {"width": 64, "queries": 12, "layers": 3, "heads": 4, "n_classes": 4, "in_channels": 3,
                  "unet_widths": [16, 24, 32, 48, 64], "target_m": 128, "isa_heads": 4,
                  "isa_max_centroids": 32, "video_hidden": [16, 32, 64],
                  "video_strides": [[2, 2, 2], [2, 2, 2], [1, 2, 2]]},
        "loss": {"top_k": 1},
        "optim": {"lr": 1e-3, "batch": 4, "steps": 300, "eval_every": 100},
        "data": {"augment": 7},
    },
}


def load_config(path=None, preset=None, overrides=None, environ=None) -> RunConfig:
    """Defaults <- preset <- file <- explicit overrides <- environment."""
    tree = {}
    if preset:
        if preset not in RUN_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        tree = _merge(tree, RUN_PRESETS[preset])
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "--config")
        loaded = yaml.safe_load(path.read_text()) or {}
        tree = _merge(tree, loaded)
    if overrides:
        tree = _merge(tree, overrides)
    tree = _merge(tree, env_overrides(environ))
    cfg = _build(RunConfig, tree, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    m = cfg.model
    if len(m.unet_widths) != 5:
        raise ConfigError("exactly five U-Net widths are required", "model.unet_widths")
    if m.width % m.heads:
        raise ConfigError("heads must divide width", "model.heads")
    if any(w % m.isa_heads for w in m.unet_widths):
        raise ConfigError("isa_heads must divide every U-Net width", "model.isa_heads")
    if m.decoder not in ("bqd", "cross_fusion"):
        raise ConfigError(f"unknown decoder {m.decoder!r}", "model.decoder")
    if m.encoder_mode not in ("toy", "precomputed"):
        raise ConfigError(f"unknown encoder mode {m.encoder_mode!r}", "model.encoder_mode")
    if m.isa_reducer not in ("max", "mean"):
        raise ConfigError(f"unknown reducer {m.isa_reducer!r}", "model.isa_reducer")
    if len(cfg.loss.lambdas) != 4 or any(x < 0 for x in cfg.loss.lambdas):
        raise ConfigError("four non-negative loss weights required", "loss.lambdas")
    if len(cfg.loss.zeta) != 2:
        raise ConfigError("two matching weights required", "loss.zeta")
    if cfg.loss.dice_variant not in ("literal", "standard"):
        raise ConfigError(f"unknown dice variant {cfg.loss.dice_variant!r}", "loss.dice_variant")
    if cfg.optim.algorithm not in ("adamw", "adam", "sgd"):
        raise ConfigError(f"unknown optimizer {cfg.optim.algorithm!r}", "optim.algorithm")
    if cfg.optim.schedule not in ("constant", "cosine"):
        raise ConfigError(f"unknown schedule {cfg.optim.schedule!r}", "optim.schedule")
    if cfg.loss.top_k < 0:
        raise ConfigError("top_k must be >= 0", "loss.top_k")
    if not 0 <= cfg.data.augment <= 7:
        raise ConfigError("augment must be in [0, 7]", "data.augment")
    if cfg.optim.steps < 0 or cfg.optim.batch < 1:
        raise ConfigError("steps must be >= 0 and batch >= 1", "optim")
    return cfg


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
