"""Sparse voxel convolutions on hash-mapped active sites.

Site hierarchies are plain numpy index tables computed once per scene; the
torch modules only gather, multiply and scatter, so geometry never needs to
be rebuilt inside the training loop.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DomainError
from .pointcloud import VoxelGrid

KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


@dataclass
class SparseLevel:
    coords: np.ndarray  # (S, 3) integer site coordinates at this stride
    stride: int
    centers: np.ndarray  # (S, 3) mean coordinate of the points inside each site
    counts: np.ndarray  # (S,) contained points
    neighbors: np.ndarray  # (S, 27) site index per kernel offset, -1 if inactive
    parent: np.ndarray | None = None  # (S,) index into the next coarser level
    child_offset: np.ndarray | None = None  # (S,) position code in [0, 8) inside the parent

    @property
    def n_sites(self):
        return self.coords.shape[0]


def _keys(coords, lo, span):
    c = coords - lo
    return (c[:, 0] * span + c[:, 1]) * span + c[:, 2]


def neighbor_table(coords: np.ndarray) -> np.ndarray:
    """Submanifold 3x3x3 neighbor lookup via sorted integer keys."""
    lo = coords.min(axis=0) - 1
    span = int((coords.max(axis=0) - lo).max()) + 2
    keys = _keys(coords, lo, span)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    out = np.full((coords.shape[0], len(KERNEL_OFFSETS)), -1, dtype=np.int64)
    for j, off in enumerate(KERNEL_OFFSETS):
        q = _keys(coords + off, lo, span)
        pos = np.clip(np.searchsorted(sorted_keys, q), 0, len(keys) - 1)
        hit = sorted_keys[pos] == q
        out[hit, j] = order[pos[hit]]
    return out


def build_hierarchy(grid: VoxelGrid, point_coords: np.ndarray, n_levels: int = 5) -> list[SparseLevel]:
    """Active-site pyramid with stride-2 coarsening between consecutive levels."""
    if grid.n_sites == 0:
        raise DomainError("level 1 has zero active sites")
    centers = np.zeros((grid.n_sites, 3))
    np.add.at(centers, grid.point_to_site, point_coords)
    counts = grid.site_counts.astype(np.float64)
    levels = [SparseLevel(grid.active_sites, 1, centers / counts[:, None], counts,
                          neighbor_table(grid.active_sites))]
    for lvl in range(1, n_levels):
        fine = levels[-1]
        coarse_cells = np.floor_divide(fine.coords, 2)
        coarse, parent = np.unique(coarse_cells, axis=0, return_inverse=True)
        parent = parent.reshape(-1)
        if coarse.shape[0] == 0:
            raise DomainError(f"level {lvl + 1} has zero active sites")
        rel = fine.coords - 2 * coarse[parent]
        fine.parent = parent
        fine.child_offset = rel[:, 0] * 4 + rel[:, 1] * 2 + rel[:, 2]
        c_counts = np.bincount(parent, weights=fine.counts, minlength=coarse.shape[0])
        c_centers = np.zeros((coarse.shape[0], 3))
        np.add.at(c_centers, parent, fine.centers * fine.counts[:, None])
        levels.append(SparseLevel(coarse, fine.stride * 2, c_centers / c_counts[:, None], c_counts,
                                  neighbor_table(coarse)))
    return levels


def _uniform_(weight, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


class SubmanifoldConv(nn.Module):
    """3x3x3 convolution whose output sites equal its input sites."""

    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.weight = nn.Parameter(torch.empty(27 * cin, cout))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        _uniform_(self.weight, 27 * cin)

    def forward(self, x, neighbors):
        nbr = torch.as_tensor(neighbors, device=x.device)
        padded = torch.cat([x, x.new_zeros(1, x.shape[1])], 0)
        nbr = torch.where(nbr < 0, torch.full_like(nbr, x.shape[0]), nbr)
        y = padded[nbr].reshape(x.shape[0], -1) @ self.weight
        return y if self.bias is None else y + self.bias


class StridedConv(nn.Module):
    """Kernel-2 stride-2 sparse convolution onto the parent sites."""

    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.cout = cout
        self.weight = nn.Parameter(torch.empty(cin, 8 * cout))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        _uniform_(self.weight, 8 * cin)

    def forward(self, x, parent, child_offset, n_parent):
        parent = torch.as_tensor(parent, device=x.device)
        off = torch.as_tensor(child_offset, device=x.device)
        per_child = (x @ self.weight).view(x.shape[0], 8, self.cout)
        contrib = per_child[torch.arange(x.shape[0], device=x.device), off]
        y = x.new_zeros(n_parent, self.cout).index_add(0, parent, contrib)
        return y if self.bias is None else y + self.bias


class TransposedConv(nn.Module):
    """Inverse of :class:`StridedConv`: each child reads its parent through its offset's kernel."""

    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.cout = cout
        self.weight = nn.Parameter(torch.empty(cin, 8 * cout))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None
        _uniform_(self.weight, cin)

    def forward(self, x_coarse, parent, child_offset):
        parent = torch.as_tensor(parent, device=x_coarse.device)
        off = torch.as_tensor(child_offset, device=x_coarse.device)
        per_parent = (x_coarse @ self.weight).view(x_coarse.shape[0], 8, self.cout)
        y = per_parent[parent, off]
        return y if self.bias is None else y + self.bias


class SiteNorm(nn.Module):
    """Per-site LayerNorm over channels; batch independent."""

    def __init__(self, c, enabled=True):
        super().__init__()
        self.norm = nn.LayerNorm(c) if enabled else nn.Identity()

    def forward(self, x):
        return self.norm(x)
