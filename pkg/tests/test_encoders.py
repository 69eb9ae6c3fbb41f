import numpy as np
import pytest
import torch

from gradcheck_util import check_parameter_gradients

from egosag.encoders import (ClipFeatures, IntentionExtractor, SceneUNet, ToyVideoEncoder, encode_clip,
                             extract_intention, load_clip_features, resample_frames, save_clip_features)
from egosag.errors import DomainError, MissingFileError, VersionMismatchError
from egosag.isa import ISALayer, default_isa_config
from egosag.pointcloud import PointCloudScene, voxelize
from egosag.sparse import build_hierarchy


def test_zero_clip_gives_equal_tokens():
    torch.manual_seed(0)
    enc = ToyVideoEncoder(32, strides=((2, 2, 2), (2, 2, 2), (1, 2, 2)))
    feats = encode_clip(enc, np.zeros((16, 32, 32, 3), np.float32))
    assert torch.allclose(feats.tokens, feats.tokens[:1].expand_as(feats.tokens), atol=1e-6)


def test_default_strides_token_count():
    enc = ToyVideoEncoder(16)
    assert enc.token_grid(16, 224, 224) == (4, 7, 7)
    with torch.no_grad():
        feats = encode_clip(enc, torch.rand(16, 224, 224, 3))
    assert feats.tokens.shape == (196, 16)


def test_pooled_is_token_mean():
    torch.manual_seed(1)
    enc = ToyVideoEncoder(24, strides=((2, 2, 2), (2, 2, 2), (1, 2, 2)))
    with torch.no_grad():
        f = encode_clip(enc, torch.rand(9, 32, 32, 3), 3, "c")
    assert torch.allclose(f.pooled, f.tokens.mean(0), atol=1e-6)
    assert f.width == 24 and f.affordance_id == 3


def test_resample_frames_and_errors():
    clip = np.arange(5)[:, None, None, None] * np.ones((5, 2, 2, 3))
    out = resample_frames(clip, 16)
    assert out.shape[0] == 16 and out[0, 0, 0, 0] == 0 and out[-1, 0, 0, 0] == 4
    enc = ToyVideoEncoder(8)
    with pytest.raises(DomainError):
        enc(np.zeros((0, 8, 8, 3)))
    with pytest.raises(DomainError):
        ClipFeatures(torch.zeros(0, 4))


def test_intention_identity_and_permutation():
    torch.manual_seed(2)
    tokens = torch.randn(7, 6)
    ext = IntentionExtractor(6).identity_init()
    clip = ClipFeatures(tokens)
    assert torch.allclose(extract_intention(ext, clip), tokens.mean(0), atol=1e-6)
    ext = IntentionExtractor(6)
    perm = ClipFeatures(tokens[torch.randperm(7)])
    assert torch.allclose(extract_intention(ext, clip), extract_intention(ext, perm), atol=1e-6)
    w, b = ext.proj.weight.detach(), ext.proj.bias.detach()
    manual = torch.stack([w @ t + b for t in tokens]).mean(0)
    assert torch.allclose(extract_intention(ext, clip), manual, atol=1e-6)


def test_clip_feature_file_round_trip(tmp_path):
    tokens = torch.randn(12, 5)
    save_clip_features(tmp_path / "c.egsf", tokens, "clip_x", 4)
    back = load_clip_features(tmp_path / "c.egsf")
    assert torch.equal(back.tokens, tokens.float())
    assert back.affordance_id == 4 and back.clip_id == "clip_x"
    with pytest.raises(MissingFileError):
        load_clip_features(tmp_path / "missing.egsf")
    (tmp_path / "bad.egsf").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(VersionMismatchError):
        load_clip_features(tmp_path / "bad.egsf")


# scene U-Net

WIDTHS = (4, 4, 8, 8, 8)


def _grid(n=48, seed=0, voxel=0.1):
    rng = np.random.default_rng(seed)
    s = PointCloudScene(rng.random((n, 3)), rng.random((n, 3)))
    g = voxelize(s, voxel)
    return s, g, build_hierarchy(g, s.coords, 5)


def _isa_stack(levels, widths, intent_dim, voxel=0.1):
    layers = []
    for step, lvl in enumerate((4, 3, 2, 1, 0)):
        cfg = default_isa_config(step + 1, levels[lvl].n_sites, voxel, widths[lvl], 2, 8, 4)
        layers.append(ISALayer(cfg, intent_dim))
    return layers


def test_single_voxel_scene():
    s = PointCloudScene(np.full((3, 3), 0.01), np.ones((3, 3)) * 0.2)
    g = voxelize(s, 1.0)
    levels = build_hierarchy(g, s.coords, 5)
    assert [lv.n_sites for lv in levels] == [1] * 5
    torch.manual_seed(0)
    unet = SceneUNet(6, WIDTHS, 16, _isa_stack(levels, WIDTHS, 16))
    out = unet(torch.tensor(g.site_features, dtype=torch.float32), levels, g.point_to_site, torch.randn(16))
    assert out.per_point.shape == (3, 16)


def test_disabled_isa_equals_plain_unet():
    s, g, levels = _grid()
    torch.manual_seed(3)
    with_isa = SceneUNet(6, WIDTHS, 8, _isa_stack(levels, WIDTHS, 8))
    plain = SceneUNet(6, WIDTHS, 8)
    plain.load_state_dict({k: v for k, v in with_isa.state_dict().items() if not k.startswith("isa.")})
    x = torch.tensor(g.site_features, dtype=torch.float32)
    a = with_isa(x, levels, g.point_to_site, torch.randn(8), use_isa=False).per_point
    b = plain(x, levels, g.point_to_site).per_point
    assert torch.equal(a, b)
    assert a.shape == (s.n_points, 8)


def test_linear_unet_is_homogeneous():
    _, g, levels = _grid(seed=4)
    torch.manual_seed(5)
    unet = SceneUNet(6, WIDTHS, 8, linear=True).double()
    x = torch.tensor(g.site_features)
    a = unet(x, levels, g.point_to_site).per_point
    b = unet(2 * x, levels, g.point_to_site).per_point
    assert torch.allclose(b, 2 * a, rtol=1e-10, atol=1e-12)


def test_unet_deterministic():
    _, g, levels = _grid(seed=6)
    torch.manual_seed(7)
    unet = SceneUNet(6, WIDTHS, 8, _isa_stack(levels, WIDTHS, 8))
    x = torch.tensor(g.site_features, dtype=torch.float32)
    intent = torch.randn(8)
    a = unet(x, levels, g.point_to_site, intent).per_point
    b = unet(x, levels, g.point_to_site, intent).per_point
    assert torch.equal(a, b)


def test_unet_gradients_match_finite_differences():
    _, g, levels = _grid(n=40, seed=8, voxel=0.15)
    torch.manual_seed(9)
    unet = SceneUNet(6, WIDTHS, 4, _isa_stack(levels, WIDTHS, 4, voxel=0.15)).double()
    x = torch.tensor(g.site_features)
    intent = torch.randn(4, dtype=torch.float64)
    probe = torch.randn(len(g.point_to_site), 4, dtype=torch.float64)

    def loss():
        return (unet(x, levels, g.point_to_site, intent).per_point * probe).sum()

    check_parameter_gradients(unet, loss, n_probe=64, seed=10)


def test_empty_level_rejected():
    _, g, levels = _grid(seed=11)
    unet = SceneUNet(6, WIDTHS, 4)
    levels[2].coords = levels[2].coords[:0]
    with pytest.raises(DomainError):
        unet(torch.tensor(g.site_features, dtype=torch.float32), levels, g.point_to_site)
