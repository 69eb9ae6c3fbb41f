"""Bilateral query decoder.

Learnable queries read the scene (affordance features) and the clip tokens
through two cross-attention branches that share the query projection; the
refined branch queries are merged into the next layer's queries. Every
layer emits a prediction so all of them can be supervised.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError
from .layers import MLP, FeedForwardBlock, MultiHeadAttention, SelfAttentionBlock, scaled_dot_attention


@dataclass
class LayerPrediction:
    class_logits: torch.Tensor  # (A,)
    sp_masks: torch.Tensor  # (M, Q) probabilities
    scores: torch.Tensor  # (Q,) in [-1, 1]
    q_s: torch.Tensor  # (Q, C)
    q_v: torch.Tensor | None  # (Q, C); None for single-branch decoders
    mask_logits: torch.Tensor | None = None
    degenerate_scores: torch.Tensor | None = None  # (Q,) bool, zero-norm cosine


@dataclass
class BranchFeatures:
    affordance: torch.Tensor  # (M, C)
    mask: torch.Tensor  # (M, C)


def init_queries(n_queries: int, width: int, rng_seed: int = 0, std: float = 0.02) -> torch.Tensor:
    """Zero-mean normal query matrix of shape ``(Q, C)``, reproducible per seed."""
    if n_queries < 1:
        raise ParameterError(f"need at least one query, got {n_queries}")
    gen = torch.Generator().manual_seed(int(rng_seed))
    return torch.randn(n_queries, width, generator=gen) * std


class BranchProjector(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.affordance_projector = MLP(width, width, width)
        self.mask_projector = MLP(width, width, width)

    def forward(self, sp_features) -> BranchFeatures:
        return BranchFeatures(self.affordance_projector(sp_features), self.mask_projector(sp_features))


def project_branch_features(projector: BranchProjector, sp_features) -> BranchFeatures:
    return projector(sp_features)


class CrossAttention(MultiHeadAttention):
    """Plain multi-head cross-attention; kept as its own name for the decoder API."""

    def __init__(self, width, heads, kv_dim=None):
        super().__init__(width, kv_dim or width, width, heads)


def cross_attention(queries, kv, attention: CrossAttention):
    if kv.shape[0] == 0:
        raise ParameterError("cross-attention over zero key/value tokens")
    return attention(queries, kv)


class _Branch(nn.Module):
    """Cross-attention (shared query projection supplied by the caller), self-attention, FFN."""

    def __init__(self, width, heads, ffn_hidden):
        super().__init__()
        self.heads = heads
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, width)
        self.kv_norm = nn.LayerNorm(width)
        self.self_attn = SelfAttentionBlock(width, heads)
        self.ffn = FeedForwardBlock(width, ffn_hidden)

    def cross(self, queries, q, kv):
        kv = self.kv_norm(kv)
        return queries + self.out_proj(scaled_dot_attention(q, self.k_proj(kv), self.v_proj(kv), self.heads))

    def forward(self, queries, q, kv):
        return self.ffn(self.self_attn(self.cross(queries, q, kv)))


class BQDLayer(nn.Module):
    def __init__(self, width, heads, ffn_hidden=None):
        super().__init__()
        if width % heads:
            raise ParameterError(f"{heads} heads do not divide width {width}")
        ffn_hidden = ffn_hidden or 2 * width
        self.q_norm = nn.LayerNorm(width)
        self.residual_gain = nn.Parameter(torch.tensor(0.1))
        self.q_proj = nn.Linear(width, width)
        self.geometry = _Branch(width, heads, ffn_hidden)
        self.interaction = _Branch(width, heads, ffn_hidden)
        self.merge_mlp = MLP(2 * width, width, width)

    def forward(self, queries, branch: BranchFeatures, clip_tokens):
        # residual stream starts from the normalized queries (scaled by a learned
        # gain) so small initial queries keep their identity without swamping
        # the attention outputs
        x = self.q_norm(queries)
        q = self.q_proj(x)
        x = self.residual_gain * x
        q_s = self.geometry(x, q, branch.affordance)
        q_v = self.interaction(x, q, clip_tokens)
        return self.merge_mlp(torch.cat([q_s, q_v], dim=1)), q_s, q_v


def bqd_layer(layer: BQDLayer, queries, branch: BranchFeatures, clip_tokens):
    return layer(queries, branch, clip_tokens)


def cosine_scores(q_s, pooled, eps=1e-12):
    """Cosine of every query row with ``pooled``; zero-norm pairs score 0 and are flagged."""
    qn = q_s.norm(dim=1)
    pn = pooled.norm()
    denom = qn * pn
    degenerate = denom <= eps
    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    scores = (q_s @ pooled) / safe
    return torch.where(degenerate, torch.zeros_like(scores), scores), degenerate


class PredictionHead(nn.Module):
    def __init__(self, width, n_classes):
        super().__init__()
        self.classifier = nn.Linear(width, n_classes)

    def forward(self, next_queries, q_s, mask_features, clip_pooled, q_v=None) -> LayerPrediction:
        logits = mask_features @ q_s.T  # (M, Q)
        scores, degenerate = cosine_scores(q_s, clip_pooled)
        return LayerPrediction(
            class_logits=self.classifier(next_queries.mean(dim=0)),
            sp_masks=torch.sigmoid(logits),
            scores=scores,
            q_s=q_s,
            q_v=q_v,
            mask_logits=logits,
            degenerate_scores=degenerate,
        )


def predict_head(head: PredictionHead, next_queries, q_s, mask_features, clip_pooled):
    return head(next_queries, q_s, mask_features, clip_pooled)


class BilateralQueryDecoder(nn.Module):
    def __init__(self, width=512, n_queries=50, n_layers=6, heads=8, n_classes=17, query_seed=0):
        super().__init__()
        self.queries = nn.Parameter(init_queries(n_queries, width, query_seed))
        self.projector = BranchProjector(width)
        self.layers = nn.ModuleList(BQDLayer(width, heads) for _ in range(n_layers))
        self.head = PredictionHead(width, n_classes)

    def forward(self, sp_features, clip_tokens, clip_pooled) -> list[LayerPrediction]:
        branch = self.projector(sp_features)
        q = self.queries
        preds = []
        for layer in self.layers:
            q, q_s, q_v = layer(q, branch, clip_tokens)
            preds.append(self.head(q, q_s, branch.mask, clip_pooled, q_v))
        return preds


class CrossFusionDecoder(nn.Module):
    """Ablation baseline without the bilateral decoder.

    One cross-attention layer fuses clip tokens into the superpoint features
    before decoding; queries then only see the fused scene, and an MLP on the
    queries predicts the quality scores.
    """

    def __init__(self, width=512, n_queries=50, n_layers=6, heads=8, n_classes=17, query_seed=0):
        super().__init__()
        self.queries = nn.Parameter(init_queries(n_queries, width, query_seed))
        self.fusion_norm = nn.LayerNorm(width)
        self.fusion = CrossAttention(width, heads)
        self.projector = BranchProjector(width)
        self.blocks = nn.ModuleList(
            nn.ModuleList([nn.LayerNorm(width), CrossAttention(width, heads),
                           SelfAttentionBlock(width, heads), FeedForwardBlock(width, 2 * width)])
            for _ in range(n_layers))
        self.score_mlp = MLP(width, width, 1)
        self.classifier = nn.Linear(width, n_classes)

    def forward(self, sp_features, clip_tokens, clip_pooled) -> list[LayerPrediction]:
        fused = sp_features + self.fusion(self.fusion_norm(sp_features), clip_tokens)
        branch = self.projector(fused)
        q = self.queries
        preds = []
        for norm, cross, self_attn, ffn in self.blocks:
            q = ffn(self_attn(q + cross(norm(q), branch.affordance)))
            logits = branch.mask @ q.T
            preds.append(LayerPrediction(
                class_logits=self.classifier(q.mean(dim=0)),
                sp_masks=torch.sigmoid(logits),
                scores=torch.tanh(self.score_mlp(q)).squeeze(1),
                q_s=q,
                q_v=None,
                mask_logits=logits,
            ))
        return preds
