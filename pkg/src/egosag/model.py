"""Full grounding model: clip encoder, intention, ISA-refined U-Net, superpoints, decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .bqd import BilateralQueryDecoder, CrossFusionDecoder, LayerPrediction
from .config import ModelConfig
from .encoders import ClipFeatures, IntentionExtractor, SceneUNet, ToyVideoEncoder
from .isa import ISAGeometry, ISALayer, default_isa_config, isa_geometry
from .pointcloud import (PointCloudScene, SuperpointPartition, build_superpoints, pool_gt_masks,
                         superpoint_pool, voxelize)
from .sparse import SparseLevel, build_hierarchy


@dataclass
class SceneGeometry:
    """Everything about a scene that depends only on coordinates and colors."""

    scene: PointCloudScene
    site_features: np.ndarray  # (S, in_channels)
    point_to_site: np.ndarray
    levels: list[SparseLevel]
    isa: list[ISAGeometry]  # decoder order, coarsest first
    superpoints: SuperpointPartition

    def gt_for(self, region_indices):
        masks = [self.scene.gt_masks[j] for j in region_indices]
        return masks, pool_gt_masks(masks, self.superpoints)


def isa_configs(cfg: ModelConfig, levels):
    """One ISA config per decoder level, coarsest first."""
    out = []
    for step, lvl in enumerate((4, 3, 2, 1, 0)):
        out.append(default_isa_config(step + 1, levels[lvl].n_sites, cfg.voxel_size,
                                      cfg.unet_widths[lvl], cfg.isa_heads,
                                      cfg.isa_max_centroids, cfg.isa_k))
    return out


def prepare_scene(scene: PointCloudScene, cfg: ModelConfig) -> SceneGeometry:
    scene.validate()
    grid = voxelize(scene, cfg.voxel_size, include_coords=True)
    feats = grid.site_features.copy()
    feats[:, 3:] -= scene.coords.mean(axis=0)
    levels = build_hierarchy(grid, scene.coords, 5)
    geoms = [isa_geometry(levels[lvl].centers, c)
             for lvl, c in zip((4, 3, 2, 1, 0), isa_configs(cfg, levels))]
    sp = build_superpoints(scene, min(cfg.target_m, scene.n_points), cfg.sp_color_weight)
    return SceneGeometry(scene, feats[:, : cfg.in_channels], grid.point_to_site, levels, geoms, sp)


class EgoSAG(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.width
        if cfg.encoder_mode == "toy":
            self.video_encoder = ToyVideoEncoder(c, cfg.video_hidden, cfg.video_strides, cfg.frames)
        else:
            self.video_encoder = None
        self.intention = IntentionExtractor(c)
        # ISA layer shapes depend only on widths; centroid counts come from per-scene geometry
        isa_layers = None
        if cfg.isa_enabled:
            isa_layers = []
            for step, lvl in enumerate((4, 3, 2, 1, 0)):
                layer_cfg = default_isa_config(step + 1, cfg.isa_max_centroids, cfg.voxel_size,
                                               cfg.unet_widths[lvl], cfg.isa_heads,
                                               cfg.isa_max_centroids, cfg.isa_k)
                isa_layers.append(ISALayer(layer_cfg, c, cfg.isa_reducer, cfg.isa_gate_bias))
        self.scene_encoder = SceneUNet(cfg.in_channels, cfg.unet_widths, c, isa_layers)
        decoder_cls = BilateralQueryDecoder if cfg.decoder == "bqd" else CrossFusionDecoder
        self.decoder = decoder_cls(c, cfg.queries, cfg.layers, cfg.heads, cfg.n_classes, cfg.query_seed)

    def encode_clip(self, clip, affordance_id=-1, clip_id="") -> ClipFeatures:
        if isinstance(clip, ClipFeatures):
            return clip
        if self.video_encoder is None:
            raise ValueError("precomputed encoder mode expects ClipFeatures input")
        return ClipFeatures(self.video_encoder(clip), affordance_id, clip_id)

    def forward(self, geometry: SceneGeometry, clip) -> list[LayerPrediction]:
        feats = self.encode_clip(clip)
        intent = self.intention(feats)
        dtype = next(self.parameters()).dtype
        site = torch.as_tensor(geometry.site_features, dtype=dtype)
        scene_feats = self.scene_encoder(site, geometry.levels, geometry.point_to_site, intent,
                                         geometry.isa, use_isa=self.cfg.isa_enabled)
        sp_feats = superpoint_pool(scene_feats.per_point, geometry.superpoints)
        return self.decoder(sp_feats, feats.tokens, feats.pooled)
