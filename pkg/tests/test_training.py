import logging

import numpy as np
import pytest

from lprnet import autodiff as ad
from lprnet.cloud import PointCloud
from lprnet.errors import ConfigError, DatasetError, NumericalFault
from lprnet.network import NetworkConfig
from lprnet.training import (
    TrainConfig,
    augment_random_rotation,
    load_checkpoint,
    load_training_checkpoint,
    procedural_dataset,
    save_checkpoint,
    train,
)

NET = NetworkConfig.desk_scale(embed_dim=16, hidden_dim=12, heads=2, encoder_depth=1,
                               decoder_depth=1, patch_size=8, num_patches=16)


@pytest.fixture(scope="module")
def clouds():
    return procedural_dataset(4, n_points=256, seed=3)


def test_augment_isometry_and_vertical_axis():
    pts = np.random.default_rng(0).standard_normal((100, 3))
    out = augment_random_rotation(pts, seed=1).points
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.allclose(d0, d1, atol=1e-12)
    assert np.allclose(out[:, 2], pts[:, 2], atol=1e-12)
    full = augment_random_rotation(pts, seed=1, full_so3=True).points
    assert not np.allclose(full[:, 2], pts[:, 2])
    assert np.allclose(np.linalg.norm(full, axis=1), np.linalg.norm(pts, axis=1), atol=1e-12)


def test_augment_zero_angle_is_identity(monkeypatch):
    import lprnet.training as training

    class ZeroAngle:
        def uniform(self, lo, hi):
            return 0.0

    pc = PointCloud(np.random.default_rng(0).standard_normal((10, 3)))
    monkeypatch.setattr(training.np.random, "default_rng", lambda seed: ZeroAngle())
    assert np.array_equal(augment_random_rotation(pc, seed=3).points, pc.points)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0)


def test_small_clouds_are_skipped(clouds, caplog):
    tiny = np.zeros((5, 3))
    with caplog.at_level(logging.WARNING):
        result = train(TrainConfig(epochs=1, batch_size=2), NET, [tiny] + clouds[:2])
    assert "skipping cloud 0" in caplog.text
    assert len(result.step_losses) == 1


def test_all_clouds_too_small():
    with pytest.raises(DatasetError):
        train(TrainConfig(epochs=1), NET, [np.zeros((5, 3))])


def test_same_seed_is_bit_identical(clouds):
    a = train(TrainConfig(epochs=2, batch_size=2, seed=7), NET, clouds)
    b = train(TrainConfig(epochs=2, batch_size=2, seed=7), NET, clouds)
    assert a.step_losses == b.step_losses
    for k, v in a.model.state_dict().items():
        assert np.array_equal(v, b.model.state_dict()[k])
    c = train(TrainConfig(epochs=2, batch_size=2, seed=8), NET, clouds)
    assert c.step_losses != a.step_losses


def test_loss_history_and_step_callback(clouds):
    seen = []
    result = train(TrainConfig(epochs=3, batch_size=2), NET, clouds, on_step=seen.append)
    assert len(result.loss_history) == 3 and len(seen) == 6
    assert seen[0]["lr"] == 1e-3 and seen[-1]["lr"] < seen[0]["lr"]
    assert all(np.isfinite(x) for x in result.step_losses)


def test_checkpoint_roundtrip_gives_identical_features(clouds, tmp_path):
    result = train(TrainConfig(epochs=1, batch_size=4), NET, clouds)
    path = tmp_path / "m.lprn"
    save_checkpoint(result.model, path)
    loaded = load_checkpoint(path)
    pts = clouds[0].points
    assert np.array_equal(loaded.global_feature(pts), result.model.global_feature(pts))
    assert load_checkpoint(path, dtype=np.float64).dtype is np.float64


def test_resume_matches_uninterrupted_run(clouds, tmp_path):
    tcfg = TrainConfig(epochs=4, batch_size=2, seed=5)
    full = train(tcfg, NET, clouds)
    path = tmp_path / "half.lprn"
    train(tcfg, NET, clouds, checkpoint_path=path, stop_after_epoch=2)
    rec, saved_cfg = load_training_checkpoint(path)
    assert saved_cfg == tcfg
    resumed = train(tcfg, NET, clouds, resume=rec)
    assert resumed.loss_history == full.loss_history
    for k, v in full.model.state_dict().items():
        assert np.array_equal(v, resumed.model.state_dict()[k])


def test_numerical_fault_reports_epoch_and_batch(clouds, monkeypatch):
    import lprnet.training as training

    def poisoned(pred, target):
        return ad._make(np.asarray(np.nan), (pred,), lambda g: (None,), "chamfer_l2")

    monkeypatch.setattr(training, "chamfer_l2", poisoned)
    with pytest.raises(NumericalFault) as err:
        train(TrainConfig(epochs=1), NET, clouds)
    assert err.value.op == "chamfer_l2" and "epoch 0 batch 0" in str(err.value)


def test_procedural_dataset_is_deterministic():
    a = procedural_dataset(3, n_points=128, seed=1)
    b = procedural_dataset(3, n_points=128, seed=1)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a, b))
    assert len({x.source_label for x in a}) == 3
