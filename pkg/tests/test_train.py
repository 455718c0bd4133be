import numpy as np
import pytest

from drm3d.config import TrainConfig
from drm3d.errors import ConfigError, DivergenceError, UsageError
from drm3d.grid import NormStats
from drm3d.model import DrmModel
from drm3d.train import HISTORY_COLUMNS, WindowBatcher, check_compatible, train

from conftest import tiny_config


def make_model(ds, seed=0, **model_kw):
    cfg = tiny_config(model=model_kw) if model_kw else tiny_config()
    return DrmModel(cfg.model, ds.grid, ds.norm, seed=seed)


def test_history_is_deterministic(tiny_dataset):
    tcfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3, seed=3)
    runs = [train(make_model(tiny_dataset), tiny_dataset, tcfg) for _ in range(2)]
    strip = [[{k: r[k] for k in HISTORY_COLUMNS if k != "wall_seconds"} for r in h] for h in runs]
    assert strip[0] == strip[1]
    assert [r["epoch"] for r in runs[0]] == [1, 2]


def test_batcher_aligns_teacher_and_targets(tiny_dataset):
    m = make_model(tiny_dataset)
    windows = tiny_dataset.train_windows(4, 2)
    tokens, teacher, target = WindowBatcher(m, windows).batch(np.array([0, 3]))
    w = windows[3]
    seq = w.sequence
    np.testing.assert_allclose(teacher[1, 0], m.maps_to_patches(seq.maps[w.start + 3].astype(float)))
    np.testing.assert_allclose(target[1, 1], m.maps_to_patches(seq.maps[w.start + 5].astype(float)))
    assert tokens.values.shape[0] == 2


def test_checkpoint_written_and_resume_errors(tmp_path, tiny_dataset):
    tcfg = TrainConfig(epochs=2, batch_size=8, lr=1e-3, checkpoint_every=1)
    train(make_model(tiny_dataset), tiny_dataset, tcfg, out_dir=tmp_path)
    assert (tmp_path / "checkpoint/checkpoint.json").exists()
    with pytest.raises(ConfigError):
        train(make_model(tiny_dataset), tiny_dataset, tcfg, out_dir=tmp_path / "empty", resume=True)
    with pytest.raises(ConfigError):
        train(make_model(tiny_dataset, d_model=16), tiny_dataset, tcfg, out_dir=tmp_path, resume=True)


def test_divergence_is_reported(tiny_dataset):
    with pytest.raises(DivergenceError) as exc:
        train(make_model(tiny_dataset), tiny_dataset, TrainConfig(epochs=3, lr=1e6, grad_clip=0.0))
    assert exc.value.epoch == 1


def test_incompatible_dataset(tiny_dataset):
    m = make_model(tiny_dataset)
    m.norm = NormStats(-1.0, 0.0)
    with pytest.raises(ConfigError, match="norm"):
        check_compatible(m, tiny_dataset)


def test_no_windows(tiny_dataset):
    with pytest.raises(UsageError):
        train(make_model(tiny_dataset), tiny_dataset, TrainConfig(epochs=1), windows=[])


def test_loss_decreases_on_two_windows(tiny_dataset):
    m = make_model(tiny_dataset)
    windows = tiny_dataset.train_windows(4, 2)[:2]
    hist = train(m, tiny_dataset, TrainConfig(epochs=30, batch_size=2, lr=3e-3, scheduled_sampling=0.0),
                 windows=windows)
    assert hist[-1]["L_total"] < 0.5 * hist[0]["L_total"]
