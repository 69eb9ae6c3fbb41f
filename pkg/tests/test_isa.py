import math

import numpy as np
import pytest
import torch
from gradcheck_util import check_parameter_gradients

from egosag.errors import ParameterError
from egosag.isa import (IntentCrossAttention, ISALayer, ISALayerConfig, default_isa_config, group_subregions,
                        intent_cross_attention, isa_geometry)
from egosag.layers import MLP
from egosag.pointcloud import ball_query_knn, farthest_point_sample, propagate_features


def level(n=32, c=8, seed=0):
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 3))
    feats = torch.tensor(rng.normal(size=(n, c)), dtype=torch.float64)
    return coords, feats


def test_default_config():
    cfg = default_isa_config(level=2, n_sites=500, voxel_size=0.05, width=64, heads=4)
    assert (cfg.n_c, cfg.k) == (64, 16)
    assert cfg.r == pytest.approx(2 * 0.05 * 2 ** 3)
    assert default_isa_config(5, 10, 0.05, 8, 2).n_c == 10
    with pytest.raises(ParameterError):
        ISALayerConfig(4, 2, 0.5, heads=3, level_width=8).validate()


def test_group_k1_is_permuted_perceptron():
    coords, feats = level(12)
    torch.manual_seed(0)
    mlp = MLP(8, 8, 8).double()
    cfg = ISALayerConfig(12, 1, 0.3, 2, 8)
    out = group_subregions(feats, coords, cfg, mlp)
    order = farthest_point_sample(coords, 12, 0)
    assert torch.allclose(out, mlp(feats[torch.as_tensor(order)]), atol=1e-12)


def test_group_constant_field():
    coords, _ = level(20)
    feats = torch.ones(20, 8, dtype=torch.float64) * 0.3
    mlp = MLP(8, 8, 8).double()
    out = group_subregions(feats, coords, ISALayerConfig(6, 4, 0.4, 2, 8), mlp)
    assert torch.allclose(out, out[:1].expand_as(out))


def test_group_step_by_step_oracle():
    coords, feats = level(32, seed=1)
    mlp = MLP(8, 8, 8).double()
    cfg = ISALayerConfig(8, 5, 0.35, 2, 8)
    got = group_subregions(feats, coords, cfg, mlp)
    cents = farthest_point_sample(coords, 8, 0)
    rows = []
    for c in cents:
        d = np.linalg.norm(coords - coords[c], axis=1)
        near = [i for _, i in sorted((d[i], i) for i in range(32) if d[i] <= 0.35)][:5]
        near += [c] * (5 - len(near))
        rows.append(torch.stack([feats[i] for i in near]).max(0).values)
    assert torch.allclose(got, mlp(torch.stack(rows)), atol=1e-12)


def test_single_token_attention_is_query_independent():
    torch.manual_seed(2)
    att = IntentCrossAttention(16, 12, 4)
    groups = torch.randn(9, 16) * 5
    intent = torch.randn(12)
    out = intent_cross_attention(groups, intent, att)
    assert torch.max(torch.abs(out - out[:1])).item() <= 1e-6
    m = att.mha
    expected = m.out_proj(m.v_proj(intent))
    assert torch.allclose(out[0], expected, atol=1e-6)
    other = intent_cross_attention(torch.randn(9, 16), intent, att)
    assert torch.allclose(out, other, atol=1e-6)


def test_closed_gate_is_identity():
    coords, feats = level(24, seed=3)
    layer = ISALayer(ISALayerConfig(6, 4, 0.4, 2, 8), 8, gate_bias=-1e4).double()
    out = layer(feats, coords, torch.randn(8, dtype=torch.float64))
    assert torch.allclose(out, feats, atol=1e-12)


def test_zero_intent_zero_projections():
    coords, feats = level(24, seed=4)
    layer = ISALayer(ISALayerConfig(6, 4, 0.4, 2, 8), 8).double()
    m = layer.attention.mha
    with torch.no_grad():
        m.v_proj.weight.zero_()
        m.v_proj.bias.zero_()
        m.out_proj.weight.zero_()
    out = layer(feats, coords, torch.zeros(8, dtype=torch.float64))
    const = m.out_proj.bias.detach().expand(24, 8)
    assert torch.allclose(out, feats + layer.gate(const), atol=1e-12)


def test_layer_composition_oracle():
    coords, feats = level(16, seed=5)
    cfg = ISALayerConfig(5, 4, 0.5, 2, 8)
    layer = ISALayer(cfg, 6).double()
    intent = torch.randn(6, dtype=torch.float64)
    got = layer(feats, coords, intent)
    grouped = group_subregions(feats, coords, cfg, layer.group_mlp)
    m = layer.attention.mha
    q = m.q_proj(grouped).view(5, 2, 4).transpose(0, 1)
    k = m.k_proj(intent).view(1, 2, 4).transpose(0, 1)
    v = m.v_proj(intent).view(1, 2, 4).transpose(0, 1)
    att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(4), -1) @ v
    joint = m.out_proj(att.transpose(0, 1).reshape(5, 8))
    cents = farthest_point_sample(coords, 5, 0)
    prop = propagate_features(coords[cents], joint, coords, 3, 1e-8)
    gate = torch.sigmoid(layer.gate.gate(prop)) * layer.gate.transform(prop)
    assert torch.allclose(got, feats + gate, atol=1e-12)
    assert got.shape == feats.shape


def test_residual_dominance_at_init():
    for seed in range(5):
        coords, feats = level(64, 16, seed)
        torch.manual_seed(seed)
        layer = ISALayer(ISALayerConfig(16, 8, 0.3, 4, 16), 16).double()
        out = layer(feats, coords, torch.randn(16, dtype=torch.float64))
        ratio = torch.linalg.norm(out - feats) / torch.linalg.norm(feats)
        assert ratio.item() < 0.05


def test_precomputed_geometry_matches():
    coords, feats = level(30, seed=6)
    cfg = ISALayerConfig(7, 5, 0.4, 2, 8)
    layer = ISALayer(cfg, 8).double()
    intent = torch.randn(8, dtype=torch.float64)
    geo = isa_geometry(coords, cfg)
    assert np.array_equal(geo.groups, ball_query_knn(coords, geo.centroids, 5, 0.4))
    assert torch.equal(layer(feats, coords, intent), layer(feats, coords, intent, geo))


def test_isa_layer_gradients():
    coords, feats = level(16, 4, seed=7)
    torch.manual_seed(8)
    layer = ISALayer(ISALayerConfig(4, 3, 0.5, 2, 4), 4, gate_bias=0.0).double()
    intent = torch.randn(4, dtype=torch.float64)
    probe = torch.randn(16, 4, dtype=torch.float64)
    check_parameter_gradients(layer, lambda: (layer(feats, coords, intent) * probe).sum(), 64, seed=9)
