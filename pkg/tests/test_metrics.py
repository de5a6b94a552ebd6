"""Metric implementations against loop-based counting oracles."""

import numpy as np
import pytest

from avu.errors import ShapeError
from avu.metrics import (CIOU_THRESHOLDS, MetricReport, binarize_logits,
                         ciou_at, ciou_auc, f_beta, iou, mean_iou, micro_f1,
                         parsing_f1, segment_accuracy)

import oracles


def test_identical_masks():
    m = np.ones((8, 8), dtype=np.uint8)
    assert iou(m, m) == 1.0
    assert f_beta(m, m) == 1.0


def test_disjoint_masks():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[:4] = 1
    b[4:] = 1
    assert iou(a, b) == 0.0


def test_halves_worked_example():
    # left half vs top half of a 64x64 grid: 1024 shared, 3072 total
    pred = np.zeros((64, 64), dtype=np.uint8)
    truth = np.zeros((64, 64), dtype=np.uint8)
    pred[:, :32] = 1
    truth[:32, :] = 1
    assert iou(pred, truth) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_empty_vs_empty_is_perfect():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert iou(z, z) == 1.0
    assert f_beta(z, z) == 1.0


def test_random_masks_match_pixel_counting_oracle():
    rng = np.random.default_rng(0)
    for trial in range(100):
        h = int(rng.integers(1, 65))
        w = int(rng.integers(1, 65))
        density = rng.random()
        a = (rng.random((h, w)) < density).astype(np.uint8)
        b = (rng.random((h, w)) < rng.random()).astype(np.uint8)
        assert iou(a, b) == pytest.approx(oracles.oracle_iou(a, b), abs=1e-12)
        assert f_beta(a, b) == pytest.approx(oracles.oracle_f_beta(a, b),
                                             abs=1e-12)


def test_microf1_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, k = int(rng.integers(1, 20)), int(rng.integers(1, 8))
        p = rng.integers(0, 2, size=(n, k))
        t = rng.integers(0, 2, size=(n, k))
        assert micro_f1(p, t) == pytest.approx(
            oracles.oracle_multilabel_f1(p, t), abs=1e-12)


def test_ciou_and_auc_match_oracle():
    rng = np.random.default_rng(2)
    ious = rng.random(50).tolist()
    curve = oracles.oracle_ciou_curve(ious, CIOU_THRESHOLDS)
    for tau, want in zip(CIOU_THRESHOLDS, curve):
        assert ciou_at(ious, tau) == pytest.approx(want, abs=1e-12)
    want_auc = oracles.oracle_trapezoid(list(CIOU_THRESHOLDS), curve)
    assert ciou_auc(ious) == pytest.approx(want_auc, abs=1e-12)


def test_ciou_extremes():
    assert ciou_at([1.0, 1.0], 0.5) == 1.0
    assert ciou_at([0.0, 0.0], 0.5) == 0.0
    assert ciou_auc([1.0] * 5) == pytest.approx(1.0, abs=1e-12)


def test_segment_accuracy():
    assert segment_accuracy([1, 2, 3], [1, 2, 4]) == pytest.approx(2 / 3)
    with pytest.raises(ShapeError):
        segment_accuracy([], [])


def test_parsing_f1_streams():
    t = np.zeros((5, 3), dtype=int)
    t[0, 0] = t[1, 0] = 1
    pa = t.copy()
    pv = np.zeros_like(t)
    out = parsing_f1(pa, pv, t, t)
    assert out["audio"] == 1.0
    assert out["visual"] == 0.0
    assert out["audio_visual"] == 0.0
    assert out["average"] == pytest.approx(1 / 3)


def test_parsing_f1_matches_oracle_per_stream():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ta = rng.integers(0, 2, size=(10, 6))
        tv = rng.integers(0, 2, size=(10, 6))
        pa = rng.integers(0, 2, size=(10, 6))
        pv = rng.integers(0, 2, size=(10, 6))
        out = parsing_f1(pa, pv, ta, tv)
        assert out["audio"] == pytest.approx(
            oracles.oracle_multilabel_f1(pa, ta), abs=1e-12)
        assert out["visual"] == pytest.approx(
            oracles.oracle_multilabel_f1(pv, tv), abs=1e-12)
        assert out["audio_visual"] == pytest.approx(
            oracles.oracle_multilabel_f1(pa & pv, ta & tv), abs=1e-12)


def test_binarize_logits_is_half_probability():
    x = np.array([-0.1, 0.0, 0.1, 100.0, -100.0])
    np.testing.assert_array_equal(binarize_logits(x),
                                  [False, True, True, True, False])


def test_nonbinary_mask_rejected():
    with pytest.raises(ShapeError):
        iou(np.array([[2, 0]]), np.array([[1, 0]]))


def test_report_bounds_and_format():
    r = MetricReport()
    r.set("a/acc", 0.75)
    r.set("b/f1", 1.0)
    with pytest.raises(ShapeError):
        r.set("bad", 1.5)
    text = r.format()
    assert text.splitlines()[0] == "a/acc\t0.750000"
    assert r.as_dict() == {"a/acc": 0.75, "b/f1": 1.0}


def test_mean_iou():
    a = np.ones((4, 4), dtype=np.uint8)
    z = np.zeros((4, 4), dtype=np.uint8)
    assert mean_iou([(a, a), (a, z)]) == pytest.approx(0.5)
