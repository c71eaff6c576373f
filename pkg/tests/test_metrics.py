import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nddepth.metrics import COLUMNS, MetricReport, cap_mask, evaluate
from oracles import close, metrics_reference


def test_four_pixel_hand_values():
    gt = np.array([[1.0, 2.0], [4.0, 8.0]])
    pred = np.array([[1.0, 2.2], [5.0, 8.0]])
    r = evaluate(pred, gt)
    assert r.abs_rel == pytest.approx((0.1 + 0.25) / 4, abs=1e-15)
    assert r.sq_rel == pytest.approx((0.04 / 2 + 1 / 4) / 4, abs=1e-15)
    assert r.rmse == pytest.approx(math.sqrt(1.04 / 4), abs=1e-15)
    # ratio 1.25 is not below the first threshold
    assert (r.delta1, r.delta2, r.delta3) == (0.75, 1.0, 1.0)
    assert r.n_valid == 4


def test_identity_report():
    gt = np.random.default_rng(0).uniform(0.5, 50, size=(7, 9))
    r = evaluate(gt, gt)
    for k in ("abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog_eval", "irmse"):
        assert getattr(r, k) == 0.0
    assert (r.delta1, r.delta2, r.delta3) == (1.0, 1.0, 1.0)


def test_exact_threshold_boundaries():
    # 1.5625 = 1.25^2 exactly, so it fails delta2 but passes delta3
    gt = np.array([4.0, 16.0])
    pred = np.array([6.25, 16.0])
    r = evaluate(pred, gt)
    assert (r.delta1, r.delta2, r.delta3) == (0.5, 0.5, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_reference(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.1, 80, size=(6, 5))
    gt[rng.random(gt.shape) < 0.2] = 0.0
    gt[0, 0] = 5.0
    pred = gt * np.exp(rng.normal(0, 0.3, size=gt.shape)) + (gt == 0)
    ref = metrics_reference(pred, gt)
    got = evaluate(pred, gt).as_dict()
    for k in COLUMNS:
        assert close(got[k], ref[k], 1e-12), k


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_scale_covariance(c):
    rng = np.random.default_rng(7)
    gt = rng.uniform(1, 10, size=(5, 5))
    pred = gt * rng.uniform(0.8, 1.2, size=gt.shape)
    a, b = evaluate(pred, gt), evaluate(c * pred, c * gt)
    for k in ("abs_rel", "rmse_log", "log10", "delta1", "silog_eval"):
        assert getattr(b, k) == pytest.approx(getattr(a, k), rel=1e-9, abs=1e-12)
    assert b.rmse == pytest.approx(c * a.rmse, rel=1e-9)


def test_cap_mask():
    gt = np.array([0.0, -1.0, np.nan, 0.5, 10.0, 80.0, 81.0])
    assert cap_mask(gt, (0.5, 80.0)).tolist() == [False] * 4 + [True, True, False]


def test_capped_matches_reference():
    rng = np.random.default_rng(3)
    gt = rng.uniform(0, 100, size=(8, 8))
    pred = rng.uniform(1, 100, size=(8, 8))
    got = evaluate(pred, gt, cap=(1e-3, 80)).as_dict()
    ref = metrics_reference(pred, gt, (1e-3, 80))
    for k in COLUMNS:
        assert close(got[k], ref[k], 1e-12)


def test_benchmark_sq_rel():
    gt, pred = np.array([2.0]), np.array([3.0])
    assert evaluate(pred, gt, benchmark_style=True).sq_rel == pytest.approx(25.0)
    assert evaluate(pred, gt).sq_rel == pytest.approx(0.5)


@pytest.mark.parametrize("pred,gt,cap", [
    (np.ones(3), np.ones(4), (0, np.inf)),
    (np.ones(3), np.zeros(3), (0, np.inf)),
    (np.ones(3), np.full(3, 100.0), (0, 80)),
    (np.zeros(3), np.ones(3), (0, np.inf)),
    (np.ones(3), np.ones(3), (5, 1)),
])
def test_errors(pred, gt, cap):
    with pytest.raises(ValueError):
        evaluate(pred, gt, cap)


def test_text_and_csv():
    r = evaluate(np.array([2.0, 4.0]), np.array([2.0, 5.0]))
    lines = r.to_text().splitlines()
    assert lines[0].startswith("abs_rel=") and lines[-1] == "n_valid=2"
    assert MetricReport.csv_header().split(",") == list(COLUMNS)
    row = r.to_csv_row().split(",")
    assert float(row[0]) == r.abs_rel and row[-1] == "2"
