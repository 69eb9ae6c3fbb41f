import numpy as np
import pytest
from scipy.spatial.distance import pdist

from egosag.config import load_config
from egosag.data import generate_dataset, synth_preset
from egosag.engine import add_rigid_variants, evaluate, load_samples, rigid_copy, train
from egosag.errors import ConfigError
from egosag.pointcloud import PointCloudScene


def test_rigid_copy_is_an_isometry():
    rng = np.random.default_rng(0)
    scene = PointCloudScene(rng.random((30, 3)), rng.random((30, 3)), [rng.random(30) < 0.3], [1], "s")
    assert np.allclose(rigid_copy(scene, 0).coords, scene.coords)
    for k in range(1, 8):
        c = rigid_copy(scene, k)
        assert np.allclose(pdist(c.coords), pdist(scene.coords))
        assert np.allclose(c.coords.mean(0), scene.coords.mean(0))
        assert np.array_equal(c.coords[:, 2], scene.coords[:, 2])
        assert c.gt_masks[0] is scene.gt_masks[0] and np.array_equal(c.colors, scene.colors)
    # four quarter turns come back to the start
    x = rigid_copy(rigid_copy(rigid_copy(rigid_copy(scene, 1), 1), 1), 1)
    assert np.allclose(x.coords, scene.coords)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    return generate_dataset(synth_preset("tiny"), tmp_path_factory.mktemp("engine"))


def test_variants_keep_the_labeled_points(tiny):
    cfg = load_config(preset="tiny", overrides={"data": {"augment": 2}})
    samples = add_rigid_variants(load_samples(tiny[0], cfg)[:2], cfg)
    for s in samples:
        assert len(s.variants) == 2
        for geom, gt_sp in s.variants:
            assert geom.scene.n_points == s.geometry.scene.n_points
            assert gt_sp.shape == (geom.superpoints.M, len(s.regions))
            assert gt_sp.any(axis=0).all()
    with pytest.raises(ConfigError):
        load_config(overrides={"data": {"augment": 8}})


def test_short_runs_repeat_exactly(tiny, tmp_path):
    cfg = load_config(preset="tiny", overrides={"optim": {"steps": 2, "batch": 2, "deterministic": True},
                                                "data": {"augment": 1}})
    train_s = load_samples(tiny[0], cfg)
    a = train(cfg, train_s, None, tmp_path / "a")
    b = train(cfg, load_samples(tiny[0], cfg), None, tmp_path / "b")
    assert [r["total"] for r in a["history"]] == [r["total"] for r in b["history"]]
    assert [len(r["batch_ids"]) for r in a["history"]] == [2, 2]
    assert (tmp_path / "a/last.ckpt").read_bytes() == (tmp_path / "b/last.ckpt").read_bytes()
    r1, _ = evaluate(a["model"], train_s[:3])
    r2, _ = evaluate(b["model"], train_s[:3])
    assert r1 == r2
