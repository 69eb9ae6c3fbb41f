import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from egosag.errors import DomainError, MissingFileError, ParameterError
from egosag.pointcloud import (PointCloudScene, SuperpointPartition, ball_query_knn, build_superpoints,
                               expand_mask, farthest_point_sample, load_scene, pool_gt_masks,
                               propagate_features, read_ply, save_scene, superpoint_pool, voxelize,
                               write_ply)


def scene_from(coords, colors=None, masks=(), ids=()):
    coords = np.asarray(coords, dtype=float)
    if colors is None:
        colors = np.full(coords.shape, 0.5)
    return PointCloudScene(coords, colors, list(masks), list(ids), "t")


def test_scene_validation():
    with pytest.raises(DomainError):
        scene_from(np.zeros((0, 3))).validate()
    with pytest.raises(DomainError):
        scene_from([[0, 0, np.nan]]).validate()
    with pytest.raises(DomainError):
        scene_from([[0, 0, 0], [1, 1, 1]], masks=[[False, False]], ids=[0]).validate()
    with pytest.raises(DomainError):
        scene_from([[0, 0, 0]], masks=[[True]], ids=[]).validate()


# voxelize

def test_voxelize_two_points():
    s = scene_from([[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]])
    assert voxelize(s, 1.0).n_sites == 1
    g = voxelize(s, 0.5)
    assert g.n_sites == 2
    assert sorted(map(tuple, g.active_sites)) == [(0, 0, 0), (1, 1, 1)]


def test_voxelize_random_floor_oracle():
    rng = np.random.default_rng(0)
    s = scene_from(rng.uniform(-2, 2, (1000, 3)), rng.random((1000, 3)))
    g = voxelize(s, 0.37)
    for i in range(s.n_points):
        expected = tuple(int(np.floor(c / 0.37)) for c in s.coords[i])
        assert tuple(g.active_sites[g.point_to_site[i]]) == expected
    assert g.site_counts.sum() == 1000 and np.all(g.site_counts >= 1)


def test_voxelize_devoxelize_gives_colocated_mean():
    rng = np.random.default_rng(1)
    s = scene_from(rng.uniform(0, 1, (300, 3)), rng.random((300, 3)))
    g = voxelize(s, 0.25)
    back = g.site_features[g.point_to_site]
    for i in range(0, 300, 17):
        same = g.point_to_site == g.point_to_site[i]
        np.testing.assert_allclose(back[i, :3], s.colors[same].mean(0), atol=1e-12)
        np.testing.assert_allclose(back[i, 3:], s.coords[same].mean(0), atol=1e-12)


def test_voxelize_bad_size():
    with pytest.raises(ParameterError):
        voxelize(scene_from([[0, 0, 0]]), 0.0)


# farthest point sampling

def test_fps_examples():
    line = np.array([[0.0, 0, 0], [10, 0, 0], [1, 0, 0]])
    assert set(farthest_point_sample(line, 2, 0)) == {0, 1}
    rng = np.random.default_rng(2)
    pts = rng.random((20, 3))
    assert farthest_point_sample(pts, 1, 7).tolist() == [7]
    assert sorted(farthest_point_sample(pts, 20, 0)) == list(range(20))
    with pytest.raises(ParameterError):
        farthest_point_sample(pts, 21)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 200), st.integers(0, 2**31 - 1))
def test_fps_greedy_optimality(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3))
    n_c = min(n, 12)
    chosen = farthest_point_sample(pts, n_c, 0)
    for t in range(1, n_c):
        prev = chosen[:t]
        best = max(np.min(np.linalg.norm(pts[prev] - pts[i], axis=1))
                   for i in range(n) if i not in set(prev.tolist()))
        got = np.min(np.linalg.norm(pts[prev] - pts[chosen[t]], axis=1))
        assert got == pytest.approx(best, abs=1e-12)


# ball query

def test_ball_query_examples():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0]])
    assert set(ball_query_knn(pts, [0], 2, 2.0)[0]) == {0, 1}
    assert ball_query_knn(pts, [2], 3, 2.0)[0].tolist() == [2, 2, 2]
    assert ball_query_knn(pts, [0, 1, 2], 1, 10.0)[:, 0].tolist() == [0, 1, 2]


def test_ball_query_brute_force():
    rng = np.random.default_rng(3)
    pts = rng.random((40, 3))
    cents = [0, 5, 9]
    got = ball_query_knn(pts, cents, 6, 0.3)
    for row, c in zip(got, cents):
        d = np.linalg.norm(pts - pts[c], axis=1)
        inside = sorted((d[i], i) for i in range(40) if d[i] <= 0.3)[:6]
        expect = [i for _, i in inside] + [c] * (6 - len(inside))
        assert row.tolist() == expect


# feature propagation

def test_propagate_coincident_and_midpoint():
    src = np.array([[0.0, 0, 0], [2, 0, 0], [9, 9, 9]])
    feats = np.array([[1.0, 2.0], [3.0, 6.0], [100.0, 100.0]])
    out = propagate_features(src, feats, src[:1], k_interp=3)
    np.testing.assert_allclose(out[0], feats[0], rtol=1e-5)
    mid = propagate_features(src[:2], feats[:2], np.array([[1.0, 0, 0]]), k_interp=2)
    np.testing.assert_allclose(mid[0], (feats[0] + feats[1]) / 2, rtol=1e-12)


def test_propagate_identity_k1():
    rng = np.random.default_rng(4)
    src = rng.random((30, 3))
    f = rng.normal(size=(30, 4))
    np.testing.assert_allclose(propagate_features(src, f, src, k_interp=1), f, rtol=1e-5)


def test_propagate_brute_force_oracle():
    rng = np.random.default_rng(5)
    src, dst = rng.random((10, 3)), rng.random((5, 3))
    f = rng.normal(size=(10, 3))
    got = propagate_features(src, f, dst, 3, 1e-8)
    for i in range(5):
        # the nearest triple minimizes the summed distance among all 3-subsets
        d = np.linalg.norm(src - dst[i], axis=1)
        best = min(itertools.combinations(range(10), 3), key=lambda c: sum(d[list(c)]))
        w = np.array([1.0 / (d[j] + 1e-8) for j in best])
        expect = (w[:, None] * f[list(best)]).sum(0) / w.sum()
        np.testing.assert_allclose(got[i], expect, rtol=1e-10)


def test_propagate_rejects_nan():
    with pytest.raises(DomainError):
        propagate_features(np.zeros((2, 3)), np.array([[np.nan], [1.0]]), np.zeros((1, 3)))


# superpoints

def _cloud(n=120, seed=6):
    rng = np.random.default_rng(seed)
    return scene_from(rng.random((n, 3)), rng.random((n, 3)))


def test_superpoints_extremes():
    s = _cloud()
    fine = build_superpoints(s, s.n_points)
    assert fine.M == s.n_points and sorted(fine.assignment) == list(range(s.n_points))
    coarse = build_superpoints(s, 1)
    assert coarse.M == 1 and np.all(coarse.assignment == 0)
    with pytest.raises(ParameterError):
        build_superpoints(s, 0)


def test_superpoints_separate_clusters():
    rng = np.random.default_rng(7)
    a = rng.normal(0, 0.05, (60, 3))
    b = rng.normal(0, 0.05, (60, 3)) + 10.0
    s = scene_from(np.concatenate([a, b]))
    sp = build_superpoints(s, 2)
    for m in range(sp.M):
        members = np.flatnonzero(sp.assignment == m)
        assert np.all(members < 60) or np.all(members >= 60)


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 150), st.integers(1, 40), st.integers(0, 1000))
def test_superpoints_total_surjective(n, target, seed):
    target = min(target, n)
    sp = build_superpoints(_cloud(n, seed), target)
    sp.validate()
    assert sp.n_points == n and 1 <= sp.M <= target


def test_pool_examples():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(10, 3))
    one = superpoint_pool(f, SuperpointPartition(np.zeros(10), 1))
    np.testing.assert_allclose(one[0], f.mean(0))
    np.testing.assert_allclose(superpoint_pool(f, SuperpointPartition(np.arange(10), 10)), f)
    assign = rng.integers(0, 4, 10)
    assign[:4] = np.arange(4)
    sp = SuperpointPartition(assign, 4)
    got = superpoint_pool(torch.tensor(f), sp).numpy()
    for m in range(4):
        np.testing.assert_allclose(got[m], f[assign == m].mean(0), rtol=1e-12)
    np.testing.assert_allclose(superpoint_pool(f, sp, "max")[2], f[assign == 2].max(0))


def test_expand_examples():
    sp = SuperpointPartition(np.array([0, 1, 1, 0, 1]), 2)
    np.testing.assert_allclose(expand_mask(np.array([0.9, 0.1]), sp), [0.9, 0.1, 0.1, 0.9, 0.1])
    np.testing.assert_array_equal(expand_mask(np.ones(2), sp), np.ones(5))
    ident = SuperpointPartition(np.arange(4), 4)
    np.testing.assert_array_equal(expand_mask(np.arange(4.0), ident), np.arange(4.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, st.integers(1, 40), elements=st.integers(0, 5)))
def test_pool_then_expand_is_identity_on_constants(assign):
    _, assign = np.unique(assign, return_inverse=True)
    sp = SuperpointPartition(assign.reshape(-1), int(assign.max()) + 1)
    values = np.arange(sp.M, dtype=float) * 1.5 - 2
    per_point = values[sp.assignment][:, None]
    np.testing.assert_allclose(expand_mask(superpoint_pool(per_point, sp)[:, 0], sp), per_point[:, 0])


def test_pool_gt_majority():
    sp = SuperpointPartition(np.array([0, 0, 0, 1, 1]), 2)
    out = pool_gt_masks([np.array([1, 1, 0, 1, 0], bool)], sp)
    np.testing.assert_array_equal(out[:, 0], [1.0, 0.0])


# files

def test_ply_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    coords = rng.normal(size=(50, 3)).astype(np.float32).astype(np.float64)
    colors = rng.integers(0, 256, (50, 3)) / 255.0
    masks = [rng.random(50) < 0.3, rng.random(50) < 0.3]
    masks = [m | (np.arange(50) == i) for i, m in enumerate(masks)]
    s = PointCloudScene(coords, colors, masks, [2, 5], "room").validate()
    save_scene(s, tmp_path / "room.ply")
    back = load_scene(tmp_path / "room.ply")
    np.testing.assert_array_equal(back.coords, s.coords)
    np.testing.assert_array_equal(back.colors, s.colors)
    assert back.gt_affordance_ids == [2, 5] and back.scene_id == "room"
    for a, b in zip(back.gt_masks, masks):
        np.testing.assert_array_equal(a, b)


def test_ply_errors(tmp_path):
    with pytest.raises(MissingFileError):
        read_ply(tmp_path / "nope.ply")
    write_ply(tmp_path / "bare.ply", np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(MissingFileError):
        load_scene(tmp_path / "bare.ply")
    assert load_scene(tmp_path / "bare.ply", require_sidecar=False).gt_masks == []
    (tmp_path / "bad.ply").write_bytes(b"not a ply")
    with pytest.raises(DomainError):
        read_ply(tmp_path / "bad.ply")
