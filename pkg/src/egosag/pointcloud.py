"""Point cloud containers and geometry primitives.

Row convention: every per-point or per-site array is ``(count, channels)``.
Functions that touch features accept numpy arrays or torch tensors and return
the same kind, so they can sit inside an autograd graph.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .errors import DomainError, MissingFileError, ParameterError


@dataclass
class PointCloudScene:
    coords: np.ndarray  # (N, 3) meters
    colors: np.ndarray  # (N, 3) in [0, 1]
    gt_masks: list = field(default_factory=list)  # list of (N,) bool
    gt_affordance_ids: list = field(default_factory=list)
    scene_id: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.gt_masks = [np.asarray(m, dtype=bool) for m in self.gt_masks]
        self.gt_affordance_ids = [int(a) for a in self.gt_affordance_ids]

    @property
    def n_points(self):
        return self.coords.shape[0]

    def validate(self):
        n = self.n_points
        if n < 1:
            raise DomainError(f"scene {self.scene_id!r} has no points")
        if not np.all(np.isfinite(self.coords)):
            raise DomainError(f"scene {self.scene_id!r} has non-finite coordinates")
        if self.colors.shape[0] != n:
            raise DomainError("colors and coords disagree on point count")
        if len(self.gt_masks) != len(self.gt_affordance_ids):
            raise DomainError("gt_masks and gt_affordance_ids differ in length")
        for j, m in enumerate(self.gt_masks):
            if m.shape != (n,):
                raise DomainError(f"gt mask {j} has shape {m.shape}, expected ({n},)")
            if not m.any():
                raise DomainError(f"gt mask {j} is empty")
        return self


@dataclass
class SuperpointPartition:
    assignment: np.ndarray  # (N,) int in [0, M)
    M: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        self.M = int(self.M)

    @property
    def n_points(self):
        return self.assignment.shape[0]

    def counts(self):
        return np.bincount(self.assignment, minlength=self.M)

    def validate(self):
        a = self.assignment
        if a.ndim != 1 or a.size == 0:
            raise DomainError("assignment must be a non-empty vector")
        if a.min() < 0 or a.max() >= self.M:
            raise DomainError("assignment index outside [0, M)")
        if np.any(self.counts() == 0):
            raise DomainError("partition is not surjective")
        return self


@dataclass
class VoxelGrid:
    voxel_size: float
    active_sites: np.ndarray  # (S, 3) int64 voxel coordinates
    site_features: np.ndarray  # (S, F)
    point_to_site: np.ndarray  # (N,) int64
    site_counts: np.ndarray  # (S,) points per site

    @property
    def n_sites(self):
        return self.active_sites.shape[0]


def _check_finite(*arrays):
    for a in arrays:
        if isinstance(a, torch.Tensor):
            ok = bool(torch.isfinite(a).all())
        else:
            ok = bool(np.all(np.isfinite(a)))
        if not ok:
            raise DomainError("non-finite input")


def voxelize(scene: PointCloudScene, voxel_size: float, include_coords=True) -> VoxelGrid:
    """Quantize a scene onto a sparse grid.

    Site features are the mean color of the contained points, followed by the
    mean coordinates when ``include_coords`` is set.
    """
    if not voxel_size > 0:
        raise ParameterError(f"voxel_size must be positive, got {voxel_size}")
    if scene.n_points == 0:
        raise DomainError("cannot voxelize an empty scene")
    cells = np.floor(scene.coords / voxel_size).astype(np.int64)
    sites, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    feats = scene.colors if not include_coords else np.concatenate([scene.colors, scene.coords], 1)
    sums = np.zeros((sites.shape[0], feats.shape[1]))
    np.add.at(sums, inverse, feats)
    return VoxelGrid(
        voxel_size=float(voxel_size),
        active_sites=sites,
        site_features=sums / counts[:, None],
        point_to_site=inverse.astype(np.int64),
        site_counts=counts,
    )


def farthest_point_sample(coords, n_c: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling; ties go to the lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= n_c <= n:
        raise ParameterError(f"n_c must lie in [1, {n}], got {n_c}")
    if not 0 <= seed_index < n:
        raise ParameterError(f"seed_index {seed_index} out of range")
    chosen = np.empty(n_c, dtype=np.int64)
    chosen[0] = seed_index
    min_d = np.sum((coords - coords[seed_index]) ** 2, axis=1)
    min_d[seed_index] = -1.0
    for t in range(1, n_c):
        nxt = int(np.argmax(min_d))
        chosen[t] = nxt
        d = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[chosen[: t + 1]] = -1.0
    return chosen


def ball_query_knn(coords, centroid_indices, k: int, r: float) -> np.ndarray:
    """Up to ``k`` nearest points within radius ``r`` of each centroid.

    Rows are sorted by (distance, index); short rows are padded with the
    centroid's own index.
    """
    coords = np.asarray(coords, dtype=np.float64)
    centroid_indices = np.asarray(centroid_indices, dtype=np.int64).reshape(-1)
    if centroid_indices.size == 0:
        raise ParameterError("empty centroid list")
    if k < 1 or not r > 0:
        raise ParameterError(f"need k >= 1 and r > 0, got k={k}, r={r}")
    n = coords.shape[0]
    out = np.empty((centroid_indices.size, k), dtype=np.int64)
    idx = np.arange(n)
    r2 = r * r
    for row, c in enumerate(centroid_indices):
        d2 = np.sum((coords - coords[c]) ** 2, axis=1)
        inside = idx[d2 <= r2]
        order = np.lexsort((inside, d2[inside]))[:k]
        picked = inside[order]
        out[row, : picked.size] = picked
        out[row, picked.size :] = c
    return out


def interpolation_weights(src_coords, dst_coords, k_interp: int = 3, eps: float = 1e-8):
    """Neighbor indices and normalized inverse-distance weights, each (n_dst, k)."""
    src = np.asarray(src_coords, dtype=np.float64)
    dst = np.asarray(dst_coords, dtype=np.float64)
    if src.shape[0] == 0:
        raise ParameterError("no source points")
    if not eps > 0:
        raise ParameterError("eps must be positive")
    _check_finite(src, dst)
    k = min(k_interp, src.shape[0])
    d2 = np.sum((dst[:, None, :] - src[None, :, :]) ** 2, axis=2)
    # stable sort keeps the lower source index first on ties
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, nbr, axis=1))
    w = 1.0 / (dist + eps)
    return nbr, w / w.sum(axis=1, keepdims=True)


def apply_interpolation(src_features, nbr, weights):
    if isinstance(src_features, torch.Tensor):
        nbr_t = torch.as_tensor(nbr, device=src_features.device)
        w_t = torch.as_tensor(weights, dtype=src_features.dtype, device=src_features.device)
        return (src_features[nbr_t] * w_t[..., None]).sum(dim=1)
    return (np.asarray(src_features)[nbr] * weights[..., None]).sum(axis=1)


def propagate_features(src_coords, src_features, dst_coords, k_interp: int = 3, eps: float = 1e-8):
    """Inverse-distance interpolation of source features onto destination points."""
    _check_finite(src_features)
    nbr, w = interpolation_weights(src_coords, dst_coords, k_interp, eps)
    return apply_interpolation(src_features, nbr, w)


def build_superpoints(scene: PointCloudScene, target_m: int = 512, color_weight: float = 1.0,
                      knn: int = 8) -> SuperpointPartition:
    """Deterministic over-segmentation into at most ``target_m`` superpoints.

    Seeds come from a uniform grid in the joint (xyz, weighted rgb) space whose
    cell size is the smallest one yielding at most ``target_m`` occupied cells.
    Every point then joins the seed with the shortest path along a k-NN graph
    in the same space, so superpoints stay contiguous and tend not to cross
    color boundaries.
    """
    n = scene.n_points
    if target_m < 1:
        raise ParameterError(f"target_m must be >= 1, got {target_m}")
    if target_m > n:
        raise ParameterError(f"target_m={target_m} exceeds point count {n}")
    if target_m == n:
        return SuperpointPartition(np.arange(n), n)
    if target_m == 1:
        return SuperpointPartition(np.zeros(n, dtype=np.int64), 1)

    feats = np.concatenate([scene.coords, color_weight * scene.colors], axis=1)
    feats = feats - feats.min(axis=0)

    def cells_for(size):
        return np.unique(np.floor(feats / size).astype(np.int64), axis=0, return_inverse=True)

    lo, hi = 1e-9, float(feats.max()) * 2.0 + 1.0
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if cells_for(mid)[0].shape[0] <= target_m:
            hi = mid
        else:
            lo = mid
    cells, inverse = cells_for(hi)
    inverse = inverse.reshape(-1)

    n_cells = cells.shape[0]
    sums = np.zeros((n_cells, feats.shape[1]))
    np.add.at(sums, inverse, feats)
    centers = sums / np.bincount(inverse, minlength=n_cells)[:, None]
    dist_to_center = np.sum((feats - centers[inverse]) ** 2, axis=1)
    order = np.lexsort((np.arange(n), dist_to_center, inverse))
    first = np.ones(n, dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    seeds = np.sort(order[first])

    kk = min(knn, n - 1)
    tree = cKDTree(feats)
    dist, nbr = tree.query(feats, k=kk + 1)
    rows = np.repeat(np.arange(n), kk)
    graph = coo_matrix((dist[:, 1:].ravel() + 1e-9, (rows, nbr[:, 1:].ravel())), shape=(n, n)).tocsr()
    geo, _, sources = dijkstra(graph, directed=False, indices=seeds, min_only=True,
                               return_predecessors=True)
    unreached = ~np.isfinite(geo)
    if unreached.any():
        _, nearest = cKDTree(feats[seeds]).query(feats[unreached])
        sources[unreached] = seeds[nearest]
    _, assignment = np.unique(sources, return_inverse=True)
    assignment = assignment.reshape(-1)
    return SuperpointPartition(assignment, int(assignment.max()) + 1)


def superpoint_pool(point_features, sp: SuperpointPartition, reducer: str = "mean"):
    """Aggregate ``(N, C)`` point features into ``(M, C)`` superpoint features."""
    if point_features.shape[0] != sp.n_points:
        raise ParameterError(
            f"feature rows ({point_features.shape[0]}) do not match partition size ({sp.n_points})")
    if reducer not in ("mean", "max"):
        raise ParameterError(f"unknown reducer {reducer!r}")
    if isinstance(point_features, torch.Tensor):
        idx = torch.as_tensor(sp.assignment, device=point_features.device)
        out = point_features.new_zeros((sp.M, point_features.shape[1]))
        if reducer == "max":
            index = idx[:, None].expand_as(point_features)
            return out.scatter_reduce(0, index, point_features, reduce="amax", include_self=False)
        out = out.index_add(0, idx, point_features)
        counts = torch.as_tensor(sp.counts(), dtype=point_features.dtype, device=point_features.device)
        return out / counts[:, None]
    feats = np.asarray(point_features)
    if reducer == "max":
        out = np.full((sp.M, feats.shape[1]), -np.inf)
        np.maximum.at(out, sp.assignment, feats)
        return out
    out = np.zeros((sp.M, feats.shape[1]))
    np.add.at(out, sp.assignment, feats)
    return out / sp.counts()[:, None]


def expand_mask(sp_mask, sp: SuperpointPartition):
    """Broadcast superpoint values (``(M,)`` or ``(M, Q)``) to points."""
    if sp_mask.shape[0] != sp.M:
        raise ParameterError(f"mask has {sp_mask.shape[0]} rows, partition has {sp.M}")
    if isinstance(sp_mask, torch.Tensor):
        return sp_mask[torch.as_tensor(sp.assignment, device=sp_mask.device)]
    return np.asarray(sp_mask)[sp.assignment]


def pool_gt_masks(masks, sp: SuperpointPartition) -> np.ndarray:
    """Majority vote of binary point masks per superpoint, returned as ``(M, J)`` floats."""
    if len(masks) == 0:
        return np.zeros((sp.M, 0))
    pts = np.stack([np.asarray(m, dtype=np.float64) for m in masks], axis=1)
    frac = superpoint_pool(pts, sp)
    return (frac > 0.5).astype(np.float64)


# --- PLY + sidecar JSON -------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def write_ply(path, coords, colors):
    coords = np.asarray(coords)
    verts = np.empty(coords.shape[0], dtype=_PLY_DTYPE)
    verts["x"], verts["y"], verts["z"] = (coords[:, i].astype(np.float32) for i in range(3))
    rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
    verts["red"], verts["green"], verts["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {coords.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())


def read_ply(path):
    """Read the binary little-endian xyz/rgb layout written by :func:`write_ply`."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(path, "scene file")
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise DomainError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DomainError(f"{path}: only binary_little_endian PLY is supported")
    props = [ln.split()[-1] for ln in header if ln.startswith("property")]
    if props != list(_PLY_DTYPE.names):
        raise DomainError(f"{path}: unexpected vertex properties {props}")
    n = int(next(ln.split()[-1] for ln in header if ln.startswith("element vertex")))
    verts = np.frombuffer(data, dtype=_PLY_DTYPE, count=n, offset=end + len(b"end_header\n"))
    coords = np.stack([verts["x"], verts["y"], verts["z"]], axis=1).astype(np.float64)
    colors = np.stack([verts["red"], verts["green"], verts["blue"]], axis=1) / 255.0
    return coords, colors


def save_scene(scene: PointCloudScene, ply_path, json_path=None):
    ply_path = Path(ply_path)
    json_path = Path(json_path) if json_path else ply_path.with_suffix(".json")
    write_ply(ply_path, scene.coords, scene.colors)
    sidecar = {
        "scene_id": scene.scene_id,
        "regions": [
            {"affordance_id": int(a), "point_indices": np.flatnonzero(m).tolist()}
            for m, a in zip(scene.gt_masks, scene.gt_affordance_ids)
        ],
    }
    json_path.write_text(json.dumps(sidecar))
    return ply_path, json_path


def load_scene(ply_path, json_path=None, require_sidecar=True) -> PointCloudScene:
    """Read a PLY and its region sidecar; without a sidecar (when allowed) the scene has no regions."""
    ply_path = Path(ply_path)
    json_path = Path(json_path) if json_path else ply_path.with_suffix(".json")
    coords, colors = read_ply(ply_path)
    if json_path.exists():
        meta = json.loads(json_path.read_text())
    elif require_sidecar:
        raise MissingFileError(json_path, "scene sidecar")
    else:
        meta = {}
    n = coords.shape[0]
    masks, ids = [], []
    for region in meta.get("regions", []):
        m = np.zeros(n, dtype=bool)
        m[np.asarray(region["point_indices"], dtype=np.int64)] = True
        masks.append(m)
        ids.append(int(region["affordance_id"]))
    return PointCloudScene(coords, colors, masks, ids, meta.get("scene_id", ply_path.stem)).validate()
