"""Synthetic paired scene/clip data, manifests, and raw clip blocks.

Scenes are procedural rooms: a floor and two walls plus furniture. Each
affordance class owns a primitive kind (box top, box front, cylinder side)
and a color, and its labeled region is that part of the object. Clips show a
patch of the class color drifting in a class-specific direction over a noisy
gray background. Every scene and clip draws from its own seed stream, so the
whole dataset is a pure function of the config.
"""
from __future__ import annotations

import colorsys
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MissingFileError, ParameterError, VersionMismatchError
from .pointcloud import PointCloudScene, load_scene, save_scene

AFFORDANCE_CATALOG = (
    "sit", "open", "grasp", "lie", "push", "pull", "wash", "pour", "place",
    "switch", "cut", "wipe", "hang", "press", "lift", "throw_in", "take",
)

CLIP_MAGIC = b"EGSC"
CLIP_VERSION = 1
MANIFEST_VERSION = 1


@dataclass
class SynthConfig:
    n_scenes: int = 32
    n_clips: int = 64
    points_per_scene: int = 4096
    affordance_classes: int = 17
    regions_per_scene: tuple = (1, 4)
    coord_noise: float = 0.005
    color_noise: float = 0.02
    clip_noise: float = 0.05
    clip_frames: int = 16
    clip_size: int = 32
    val_scenes: int = 4
    rng_seed: int = 0

    def validate(self):
        lo, hi = self.regions_per_scene
        if min(self.n_scenes, self.n_clips, self.points_per_scene, self.affordance_classes,
               self.clip_frames, self.clip_size) < 1:
            raise ParameterError("synthetic counts must be positive")
        if not 1 <= lo <= hi:
            raise ParameterError(f"bad regions_per_scene {self.regions_per_scene}")
        if self.affordance_classes > len(AFFORDANCE_CATALOG):
            raise ParameterError(f"at most {len(AFFORDANCE_CATALOG)} affordance classes")
        if not 0 <= self.val_scenes < self.n_scenes:
            raise ParameterError("val_scenes must leave at least one training scene")
        if self.clip_size < 8:
            raise ParameterError("clip_size must be at least 8 pixels")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "regions_per_scene" in d:
            d["regions_per_scene"] = tuple(d["regions_per_scene"])
        return cls(**d).validate()


SYNTH_PRESETS = {
    "tiny": dict(n_scenes=8, n_clips=16, points_per_scene=2048, affordance_classes=4,
                 regions_per_scene=(2, 3), val_scenes=2, rng_seed=7),
    "small": dict(n_scenes=24, n_clips=48, points_per_scene=3072, affordance_classes=8,
                  regions_per_scene=(2, 4), val_scenes=4, rng_seed=7),
    "vsad-like": dict(n_scenes=64, n_clips=256, points_per_scene=8192, affordance_classes=17,
                      regions_per_scene=(1, 4), val_scenes=12, rng_seed=0),
}


def synth_preset(name, **overrides) -> SynthConfig:
    if name not in SYNTH_PRESETS:
        raise ParameterError(f"unknown synthetic preset {name!r}; choose from {sorted(SYNTH_PRESETS)}")
    return SynthConfig(**{**SYNTH_PRESETS[name], **overrides}).validate()


def _stream(cfg, kind, index):
    return np.random.default_rng([cfg.rng_seed, kind, index])


def class_color(affordance_id, n_classes):
    """Distinct, saturated color per class on the uint8 grid."""
    hue = (affordance_id / max(n_classes, 1) + 0.03) % 1.0
    rgb = colorsys.hsv_to_rgb(hue, 0.9, 0.95 - 0.25 * (affordance_id % 2))
    return np.rint(np.array(rgb) * 255.0) / 255.0


def class_direction(affordance_id, n_classes):
    angle = 2.0 * np.pi * affordance_id / max(n_classes, 1)
    return np.array([np.sin(angle), np.cos(angle)])


PRIMITIVE_KINDS = ("box_top", "box_front", "cylinder_side")

_NEUTRALS = (np.array([0.55, 0.40, 0.25]), np.array([0.45, 0.45, 0.47]), np.array([0.70, 0.68, 0.62]))


# --- surface samplers ---------------------------------------------------------------

def _sample_rect(rng, n, origin, u, v):
    a, b = rng.random((2, n))
    return origin + a[:, None] * u + b[:, None] * v


def _box_faces(center, size):
    cx, cy = center
    sx, sy, sz = size
    x0, y0 = cx - sx / 2, cy - sy / 2
    o = np.array([x0, y0, 0.0])
    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    return {
        "top": (o + ez, ex, ey),
        "front": (o, ex, ez),  # faces -y
        "back": (o + ey, ex, ez),
        "left": (o, ey, ez),
        "right": (o + ex, ey, ez),
    }


def _sample_faces(rng, n, faces):
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    counts = rng.multinomial(n, areas / areas.sum()) if n > 0 else np.zeros(len(faces), int)
    parts = [_sample_rect(rng, c, o, u, v) for c, (o, u, v) in zip(counts, faces) if c > 0]
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def _sample_cylinder(rng, n, center, radius, z0, height, cap=False):
    theta = rng.random(n) * 2 * np.pi
    if cap:
        r = radius * np.sqrt(rng.random(n))
        z = np.full(n, z0 + height)
    else:
        r = np.full(n, radius)
        z = z0 + rng.random(n) * height
    return np.stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta), z], axis=1)


def _object_points(rng, kind, center, n_region, n_rest):
    """(region_points, other_points) for one affordance-bearing object."""
    if kind == "cylinder_side":
        radius = rng.uniform(0.12, 0.2)
        base_h = rng.uniform(0.3, 0.5)
        height = rng.uniform(0.35, 0.6)
        stand = _box_faces(center, (2.4 * radius, 2.4 * radius, base_h))
        rest = _sample_faces(rng, n_rest - n_rest // 4, list(stand.values()))
        cap = _sample_cylinder(rng, n_rest // 4, center, radius, base_h, height, cap=True)
        region = _sample_cylinder(rng, n_region, center, radius, base_h, height)
        return region, np.concatenate([rest, cap])
    size = (rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9), rng.uniform(0.4, 0.9))
    faces = _box_faces(center, size)
    key = "top" if kind == "box_top" else "front"
    region = _sample_faces(rng, n_region, [faces[key]])
    rest = _sample_faces(rng, n_rest, [f for k, f in faces.items() if k != key])
    return region, rest


def _place_objects(rng, n, room):
    """Non-overlapping floor slots on a jittered grid."""
    cols = int(np.ceil(np.sqrt(n + 1)))
    cell = (room - 0.4) / cols
    slots = rng.permutation(cols * cols)[:n]
    jitter = (rng.random((n, 2)) - 0.5) * 0.2 * cell
    return [0.2 + (np.array([s % cols, s // cols]) + 0.5) * cell + j for s, j in zip(slots, jitter)]


def _scene_classes(cfg, index, rng):
    lo, hi = cfg.regions_per_scene
    n = int(rng.integers(lo, hi + 1))
    a = cfg.affordance_classes
    base = [index % a, (index + 1) % a]
    classes = list(dict.fromkeys(base))[:n]
    others = [c for c in rng.permutation(a) if c not in classes]
    while len(classes) < n:
        classes.append(int(others.pop(0)) if others else int(rng.integers(a)))
    return [int(c) for c in classes]


def generate_scene(cfg: SynthConfig, index: int = 0, rng=None) -> PointCloudScene:
    rng = rng if rng is not None else _stream(cfg, 0, index)
    classes = _scene_classes(cfg, index, rng)
    n_distractors = int(rng.integers(1, 3))
    room = float(rng.uniform(3.0, 4.0))
    wall_h = 1.5
    n_total = cfg.points_per_scene
    n_bg = int(0.35 * n_total)
    n_objects = len(classes) + n_distractors
    per_obj = (n_total - n_bg) // n_objects
    n_bg = n_total - per_obj * n_objects

    bg_faces = [
        (np.zeros(3), np.array([room, 0, 0.0]), np.array([0, room, 0.0])),
        (np.zeros(3), np.array([room, 0, 0.0]), np.array([0, 0, wall_h])),
        (np.zeros(3), np.array([0, room, 0.0]), np.array([0, 0, wall_h])),
    ]
    coords = [_sample_faces(rng, n_bg, bg_faces)]
    colors = [np.tile(np.array([0.80, 0.78, 0.74]), (n_bg, 1))]
    labels = [np.full(n_bg, -1)]

    centers = _place_objects(rng, n_objects, room)
    for slot, center in enumerate(centers):
        if slot < len(classes):
            cls = classes[slot]
            kind = PRIMITIVE_KINDS[cls % len(PRIMITIVE_KINDS)]
            n_region = per_obj // 2
            region, rest = _object_points(rng, kind, center, n_region, per_obj - n_region)
            coords += [region, rest]
            colors += [np.tile(class_color(cls, cfg.affordance_classes), (len(region), 1)),
                       np.tile(_NEUTRALS[slot % 3], (len(rest), 1))]
            labels += [np.full(len(region), slot), np.full(len(rest), -1)]
        else:
            size = (rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8), rng.uniform(0.3, 1.2))
            pts = _sample_faces(rng, per_obj, list(_box_faces(center, size).values()))
            coords.append(pts)
            colors.append(np.tile(_NEUTRALS[(slot + 1) % 3], (len(pts), 1)))
            labels.append(np.full(len(pts), -1))

    coords = np.concatenate(coords)
    coords = coords + rng.normal(0.0, cfg.coord_noise, coords.shape)
    coords = coords.astype(np.float32).astype(np.float64)
    colors = np.concatenate(colors) + rng.normal(0.0, cfg.color_noise, (len(coords), 3))
    colors = np.rint(np.clip(colors, 0.0, 1.0) * 255.0) / 255.0
    labels = np.concatenate(labels)
    masks = [labels == slot for slot in range(len(classes))]
    return PointCloudScene(coords, colors, masks, classes, f"scene_{index:04d}").validate()


def generate_clip(affordance_id: int, cfg: SynthConfig, rng=None) -> np.ndarray:
    """T x H x W x 3 float block in [0, 1]."""
    if not 0 <= affordance_id < cfg.affordance_classes:
        raise ParameterError(f"affordance id {affordance_id} outside [0, {cfg.affordance_classes})")
    rng = rng if rng is not None else np.random.default_rng()
    t, s = cfg.clip_frames, cfg.clip_size
    patch = max(2, s // 4)
    start = rng.random(2) * (s - patch)
    step = class_direction(affordance_id, cfg.affordance_classes) * (0.5 * s / max(t, 1))
    clip = np.full((t, s, s, 3), 0.5)
    if cfg.clip_noise > 0:
        clip = clip + rng.normal(0.0, cfg.clip_noise, clip.shape)
    color = class_color(affordance_id, cfg.affordance_classes)
    for f in range(t):
        y, x = np.mod(start + f * step, s - patch).astype(int)
        clip[f, y:y + patch, x:x + patch] = color
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


# --- clip block files ---------------------------------------------------------------

def save_clip_block(path, clip, clip_id, affordance_id):
    path = Path(path)
    clip = np.asarray(clip, dtype="<f4")
    t, h, w, _ = clip.shape
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC + struct.pack("<IIII", CLIP_VERSION, t, h, w))
        f.write(np.ascontiguousarray(clip).tobytes())
    path.with_suffix(".json").write_text(json.dumps({"clip_id": clip_id, "affordance_id": int(affordance_id)}))


def load_clip_block(path):
    """Returns ``(clip, meta)`` with ``clip`` a float32 T x H x W x 3 array."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "clip file")
    data = path.read_bytes()
    if data[:4] != CLIP_MAGIC:
        raise VersionMismatchError(f"{path}: bad magic {data[:4]!r}")
    version, t, h, w = struct.unpack("<IIII", data[4:20])
    if version != CLIP_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    clip = np.frombuffer(data, dtype="<f4", count=t * h * w * 3, offset=20).reshape(t, h, w, 3).copy()
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise MissingFileError(meta_path, "clip sidecar")
    return clip, json.loads(meta_path.read_text())


# --- manifests ----------------------------------------------------------------------

@dataclass
class Pair:
    clip_id: str
    scene_id: str
    gt_region_indices: list


@dataclass
class DatasetManifest:
    pairs: list
    affordance_catalog: dict
    split: str = "train"
    scenes: dict = field(default_factory=dict)  # scene_id -> relative PLY path
    clips: dict = field(default_factory=dict)  # clip_id -> relative clip path
    clip_format: str = "block"  # "block" (EGSC) or "features" (EGSF)
    root: Path | None = None

    def scene_path(self, scene_id):
        return Path(self.root or ".") / self.scenes[scene_id]

    def clip_path(self, clip_id):
        return Path(self.root or ".") / self.clips[clip_id]

    def to_json(self):
        return json.dumps({
            "format": "egosag-manifest",
            "version": MANIFEST_VERSION,
            "split": self.split,
            "clip_format": self.clip_format,
            "affordance_catalog": {str(k): v for k, v in sorted(self.affordance_catalog.items())},
            "scenes": dict(sorted(self.scenes.items())),
            "clips": dict(sorted(self.clips.items())),
            "pairs": [asdict(p) for p in self.pairs],
        }, indent=1, sort_keys=True)


def save_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(manifest.to_json())


def load_manifest(path, check_files=True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "manifest")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    if raw.get("format") != "egosag-manifest" or raw.get("version") != MANIFEST_VERSION:
        raise VersionMismatchError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
    if raw["split"] not in ("train", "val"):
        raise DataError(f"{path}: split must be train or val, got {raw['split']!r}")
    m = DatasetManifest(
        pairs=[Pair(p["clip_id"], p["scene_id"], list(p["gt_region_indices"])) for p in raw["pairs"]],
        affordance_catalog={int(k): v for k, v in raw["affordance_catalog"].items()},
        split=raw["split"],
        scenes=dict(raw["scenes"]),
        clips=dict(raw["clips"]),
        clip_format=raw.get("clip_format", "block"),
        root=path.parent,
    )
    for p in m.pairs:
        if p.scene_id not in m.scenes:
            raise DataError(f"{path}: pair references unknown scene {p.scene_id!r}")
        if p.clip_id not in m.clips:
            raise DataError(f"{path}: pair references unknown clip {p.clip_id!r}")
    if check_files:
        for sid in m.scenes:
            ply = m.scene_path(sid)
            for f in (ply, ply.with_suffix(".json")):
                if not f.exists():
                    raise MissingFileError(f, "scene file")
        for cid in m.clips:
            clip = m.clip_path(cid)
            for f in (clip, clip.with_suffix(".json")):
                if not f.exists():
                    raise MissingFileError(f, "clip file")
    return m


# --- full dataset -------------------------------------------------------------------

def plan_pairs(cfg: SynthConfig, scenes):
    """Clip k pairs with scene k mod n_scenes and takes that scene's classes in turn."""
    plan = []
    for k in range(cfg.n_clips):
        s = k % cfg.n_scenes
        classes = scenes[s].gt_affordance_ids
        cls = classes[(k // cfg.n_scenes) % len(classes)]
        regions = [j for j, a in enumerate(classes) if a == cls]
        plan.append((k, s, cls, regions))
    return plan


def generate_dataset(cfg: SynthConfig, out_dir):
    """Write scenes, clips and train/val manifests; returns the two manifests."""
    cfg.validate()
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    scenes = [generate_scene(cfg, i) for i in range(cfg.n_scenes)]
    scene_paths = {}
    for sc in scenes:
        rel = f"scenes/{sc.scene_id}.ply"
        save_scene(sc, out / rel)
        scene_paths[sc.scene_id] = rel
    catalog = {i: AFFORDANCE_CATALOG[i] for i in range(cfg.affordance_classes)}
    val_scene_ids = {scenes[i].scene_id for i in range(cfg.n_scenes - cfg.val_scenes, cfg.n_scenes)}
    splits = {"train": DatasetManifest([], catalog, "train"), "val": DatasetManifest([], catalog, "val")}
    for k, s, cls, regions in plan_pairs(cfg, scenes):
        clip_id = f"clip_{k:04d}"
        rel = f"clips/{clip_id}.egsc"
        save_clip_block(out / rel, generate_clip(cls, cfg, _stream(cfg, 1, k)), clip_id, cls)
        sid = scenes[s].scene_id
        m = splits["val" if sid in val_scene_ids else "train"]
        m.pairs.append(Pair(clip_id, sid, regions))
        m.scenes[sid] = scene_paths[sid]
        m.clips[clip_id] = rel
    (out / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    for name, m in splits.items():
        save_manifest(m, out / f"manifest_{name}.json")
        m.root = out
    return splits["train"], splits["val"]


def validate_dataset(manifest: DatasetManifest):
    """Validity scan: every referenced gt region exists, is non-empty and matches the clip class."""
    problems = []
    for p in manifest.pairs:
        scene = load_scene(manifest.scene_path(p.scene_id))
        _, meta = load_clip_block(manifest.clip_path(p.clip_id)) if manifest.clip_format == "block" \
            else (None, json.loads(manifest.clip_path(p.clip_id).with_suffix(".json").read_text()))
        if not p.gt_region_indices:
            problems.append(f"{p.clip_id}: no gt regions")
        for j in p.gt_region_indices:
            if not 0 <= j < len(scene.gt_masks):
                problems.append(f"{p.clip_id}: region {j} missing in {p.scene_id}")
            elif scene.gt_affordance_ids[j] != meta["affordance_id"]:
                problems.append(f"{p.clip_id}: region {j} class mismatch")
    return problems


def histogram_features(clip, bins=8):
    """Per-channel pixel histograms, concatenated and normalized."""
    h = [np.histogram(clip[..., c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)]
    h = np.concatenate(h).astype(np.float64)
    return h / h.sum()
