"""Interaction-guided spatial significance allocation.

One layer per U-Net decoder level: sample-and-group the level's sites into
sub-regions, let each sub-region attend to the clip's intention vector,
interpolate the result back onto every site, and add it through a sigmoid
gate on top of the untouched decoder features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DomainError, ParameterError
from .layers import MLP, MultiHeadAttention
from .pointcloud import (apply_interpolation, ball_query_knn, farthest_point_sample,
                         interpolation_weights)


@dataclass
class ISALayerConfig:
    n_c: int
    k: int
    r: float
    heads: int
    level_width: int

    def validate(self):
        if self.n_c < 1 or self.k < 1 or not self.r > 0:
            raise ParameterError(f"invalid ISA config {self}")
        if self.level_width % self.heads:
            raise ParameterError(f"{self.heads} heads do not divide width {self.level_width}")
        return self


def default_isa_config(level: int, n_sites: int, voxel_size: float, width: int, heads: int,
                       max_centroids: int = 64, k: int = 16) -> ISALayerConfig:
    """Defaults for decoder level ``level`` (1 = coarsest, 5 = full resolution)."""
    return ISALayerConfig(
        n_c=min(n_sites, max_centroids),
        k=k,
        r=2.0 * voxel_size * 2 ** (5 - level),
        heads=heads,
        level_width=width,
    ).validate()


@dataclass
class ISAGeometry:
    """Coordinate-only index tables for one level, reusable across forward passes."""

    centroids: np.ndarray  # (n_c,)
    groups: np.ndarray  # (n_c, k)
    interp_nbr: np.ndarray  # (N_i, k_interp)
    interp_w: np.ndarray  # (N_i, k_interp)


def isa_geometry(coords, cfg: ISALayerConfig, k_interp=3, eps=1e-8) -> ISAGeometry:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[0] < cfg.n_c:
        raise ParameterError(f"level has {coords.shape[0]} sites, fewer than n_c={cfg.n_c}")
    centroids = farthest_point_sample(coords, cfg.n_c, 0)
    groups = ball_query_knn(coords, centroids, cfg.k, cfg.r)
    nbr, w = interpolation_weights(coords[centroids], coords, k_interp, eps)
    return ISAGeometry(centroids, groups, nbr, w)


def group_subregions(features, coords, cfg: ISALayerConfig, mlp: nn.Module, reducer="max",
                     geometry: ISAGeometry | None = None):
    """FPS centroids -> ball-query neighborhoods -> reduce over k -> shared MLP.

    ``features`` is ``(N_i, C_i)``; the result is ``(n_c, C_i)`` in FPS order.
    """
    if features.shape[0] < cfg.n_c:
        raise ParameterError(f"level has {features.shape[0]} sites, fewer than n_c={cfg.n_c}")
    geometry = geometry or isa_geometry(coords, cfg)
    grouped = features[torch.as_tensor(geometry.groups, device=features.device)]  # (n_c, k, C)
    if reducer == "max":
        pooled = grouped.max(dim=1).values
    elif reducer == "mean":
        pooled = grouped.mean(dim=1)
    else:
        raise ParameterError(f"unknown reducer {reducer!r}")
    return mlp(pooled)


class IntentCrossAttention(nn.Module):
    """Sub-region features attend to the single intention token."""

    def __init__(self, width, intent_dim, heads):
        super().__init__()
        self.mha = MultiHeadAttention(width, intent_dim, width, heads)

    def forward(self, groups, intent):
        return self.mha(groups, intent.reshape(1, -1))


def intent_cross_attention(groups, intent, attention: IntentCrossAttention):
    return attention(groups, intent)


class ResidualGate(nn.Module):
    """gate(x) = sigmoid(W_g x + b_g) * (W_f x + b_f), with b_g starting closed."""

    def __init__(self, width, gate_bias=-4.0):
        super().__init__()
        self.gate = nn.Linear(width, width)
        self.transform = nn.Linear(width, width)
        nn.init.constant_(self.gate.bias, gate_bias)

    def forward(self, x):
        return torch.sigmoid(self.gate(x)) * self.transform(x)


class ISALayer(nn.Module):
    def __init__(self, cfg: ISALayerConfig, intent_dim: int, reducer="max", gate_bias=-4.0):
        super().__init__()
        self.cfg = cfg.validate()
        self.reducer = reducer
        w = cfg.level_width
        self.group_mlp = MLP(w, w, w)
        self.attention = IntentCrossAttention(w, intent_dim, cfg.heads)
        self.gate = ResidualGate(w, gate_bias)

    def joint_features(self, features, coords, intent, geometry=None):
        geometry = geometry or isa_geometry(coords, self.cfg)
        groups = group_subregions(features, coords, self.cfg, self.group_mlp, self.reducer, geometry)
        return self.attention(groups, intent), geometry

    def forward(self, features, coords, intent, geometry: ISAGeometry | None = None):
        joint, geometry = self.joint_features(features, coords, intent, geometry)
        propagated = apply_interpolation(joint, geometry.interp_nbr, geometry.interp_w)
        if propagated.shape != features.shape:
            raise DomainError(f"propagated shape {tuple(propagated.shape)} != {tuple(features.shape)}")
        return features + self.gate(propagated)
