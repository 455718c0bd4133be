import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from drm3d.errors import ShapeError, UsageError
from drm3d.metrics import (CSV_COLUMNS, evaluate_predictions, linear_extrapolation_baseline, persistence_baseline,
                           rmse, temporal_gradient_error, write_report)


def test_rmse_examples():
    t = np.random.default_rng(0).normal(-70, 5, (3, 4, 4, 2))
    assert rmse(t, t)[0] == 0.0
    assert abs(rmse(t + 2.0, t)[0] - 2.0) <= 1e-12
    assert abs(rmse(np.array([[0.0, 2.0]]), np.zeros((1, 2)))[0] - math.sqrt(2)) <= 1e-12


def test_rmse_shape_error():
    with pytest.raises(ShapeError):
        rmse(np.zeros((2, 3)), np.zeros((2, 4)))


def test_tge_examples():
    t = np.random.default_rng(1).normal(-70, 5, (5, 3, 3, 3))
    assert temporal_gradient_error(t, t)[0] == 0.0
    assert temporal_gradient_error(t + 3.7, t)[0] <= 1e-12
    _, pairs = temporal_gradient_error(t + np.arange(5)[:, None, None, None], t)
    assert len(pairs) == 4
    np.testing.assert_allclose(pairs, 1.0, atol=1e-12)
    with pytest.raises(UsageError):
        temporal_gradient_error(t[:1], t[:1])


def test_mask_excludes_voxels():
    p = np.array([[[1.0, 100.0]]])
    t = np.zeros((1, 1, 2))
    assert rmse(p, t, mask=np.array([[True, False]]))[0] == 1.0


finite = st.floats(-150, 0, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 2, 2, 2), elements=finite), arrays(float, (3, 2, 2, 2), elements=finite),
       st.floats(-50, 50))
def test_rmse_symmetry_translation_and_step_pooling(a, b, c):
    agg, per_step = rmse(a, b)
    assert rmse(b, a)[0] == pytest.approx(agg, abs=1e-12)
    assert rmse(a + c, b + c)[0] == pytest.approx(agg, abs=1e-9)
    assert math.sqrt(np.mean(per_step ** 2)) == pytest.approx(agg, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 2, 2, 2), elements=finite), arrays(float, (4, 2, 2, 2), elements=finite),
       arrays(float, (2, 2, 2), elements=finite))
def test_tge_invariant_to_constant_map(a, b, c):
    assert temporal_gradient_error(a + c, b + c)[0] == pytest.approx(temporal_gradient_error(a, b)[0], abs=1e-9)


def test_baselines():
    const = np.full((4, 2, 2, 2), -60.0)
    assert rmse(persistence_baseline(const, 3), const[:3])[0] == 0.0
    ramp = -80.0 + np.arange(8)[:, None, None, None] * np.ones((8, 2, 2, 2))
    pred = linear_extrapolation_baseline(ramp[:5], 3, clamp=(-100, -40))
    assert rmse(pred, ramp[5:])[0] == 0.0
    assert linear_extrapolation_baseline(ramp[:5], 40, clamp=(-100, -50))[-1].max() == -50.0
    with pytest.raises(UsageError):
        persistence_baseline(np.zeros((0, 2)), 1)
    with pytest.raises(UsageError):
        linear_extrapolation_baseline(ramp[:1], 2)


def test_persistence_error_grows_with_horizon_on_sinusoid():
    t = np.arange(30)
    series = (-60 + 5 * np.sin(2 * np.pi * t / 24))[:, None, None, None] * np.ones((30, 2, 2, 2))
    _, per_step = rmse(persistence_baseline(series[:12], 5), series[12:17])
    assert per_step[0] > 0 and np.all(np.diff(per_step) > 0)


def make_report(nw=3, k=5):
    rng = np.random.default_rng(2)
    truths = rng.normal(-70, 4, (nw, k, 3, 3, 2))
    hist = rng.normal(-70, 4, (nw, 6, 3, 3, 2))
    preds = truths + rng.normal(0, 1, truths.shape)
    return evaluate_predictions(preds, truths, hist, [f"w{i}" for i in range(nw)], clamp=(-100, -40)), preds, truths, hist


def test_report_rows_and_consistency():
    rep, preds, truths, hist = make_report()
    assert len(rep.rows) == 3 * 5 + 5 + 1
    assert rep.rmse_db == pytest.approx(rmse(preds.reshape(-1, 3, 3, 2), truths.reshape(-1, 3, 3, 2))[0], abs=1e-12)
    assert len(rep.tge_per_pair) == 4
    pers = np.stack([persistence_baseline(h, 5) for h in hist])
    assert rep.baselines["persistence"]["rmse_db"] == pytest.approx(
        rmse(pers.reshape(-1, 3, 3, 2), truths.reshape(-1, 3, 3, 2))[0], abs=1e-12)
    again, *_ = make_report()
    assert again.rows == rep.rows


def test_empty_evaluation_is_an_error():
    with pytest.raises(UsageError):
        evaluate_predictions(np.zeros((0, 2, 1)), np.zeros((0, 2, 1)), np.zeros((0, 2, 1)), [])


def test_write_report(tmp_path):
    rep, *_ = make_report()
    csv_path, json_path = write_report(rep, tmp_path)
    with open(csv_path) as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == CSV_COLUMNS
        assert len(list(reader)) == len(rep.rows)
    summary = json.loads(json_path.read_text())
    assert summary["rmse_db"] == rep.rmse_db
    assert "privileged" in summary["baseline_note"]
