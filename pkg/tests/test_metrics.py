import math

import numpy as np
import pytest

from hybridnet.losses import DataError
from hybridnet.metrics import DepthAccumulator, confusion_accumulate, depth_metrics, seg_metrics
from oracles import depth_metrics_loop, random_metric_case, seg_metrics_loop

DEPTH_FIELDS = ("delta1", "delta2", "delta3", "ard", "srd", "rmse_linear", "rmse_log", "sie")


def test_perfect_depth():
    gt = np.random.default_rng(0).uniform(1, 9, (5, 6))
    r = depth_metrics(gt, gt)
    assert (r.delta1, r.delta2, r.delta3) == (1.0, 1.0, 1.0)
    assert r.ard == r.srd == r.rmse_linear == r.rmse_log == r.sie == 0.0


def test_constant_factor_two_example():
    r = depth_metrics(np.full((3, 3), 8.0), np.full((3, 3), 4.0))
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 0.0, 0.0)
    assert (r.ard, r.srd, r.rmse_linear) == (1.0, 4.0, 4.0)
    assert r.rmse_log == pytest.approx(math.log(2), abs=1e-15)
    assert r.sie == pytest.approx(0.0, abs=1e-15)


def test_within_first_threshold():
    gt = np.random.default_rng(1).uniform(0.1, 50, 100)
    assert depth_metrics(1.2 * gt, gt).delta1 == 1.0


def test_depth_errors():
    with pytest.raises(DataError):
        depth_metrics([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(DataError):
        depth_metrics([1.0, -2.0], [1.0, 2.0])
    with pytest.raises(DataError):
        depth_metrics([1.0], [1.0], valid=[False])


def test_invalid_gt_pixels_are_excluded():
    r = depth_metrics([2.0, 1e9, 2.0], [2.0, 0.0, 2.0])
    assert r.ard == 0.0


def test_confusion_examples():
    np.testing.assert_array_equal(confusion_accumulate([0, 1, 2], [0, 1, 2], 3), np.eye(3, dtype=int))
    np.testing.assert_array_equal(confusion_accumulate([1, 0], [255, 0], 2), [[1, 0], [0, 0]])
    np.testing.assert_array_equal(confusion_accumulate([0, 1, 1, 1], [0, 0, 1, 1], 2), [[1, 1], [0, 2]])
    with pytest.raises(DataError):
        confusion_accumulate([0, 3], [0, 1], 3)
    with pytest.raises(DataError):
        confusion_accumulate([0, 1], [0, 5], 3)


def test_seg_examples():
    r = seg_metrics(np.eye(4, dtype=int) * 7)
    assert r.global_acc == r.class_acc == r.mean_iou == 1.0
    r = seg_metrics([[1, 1], [0, 2]])
    assert r.global_acc == 0.75 and r.class_acc == 0.75
    assert r.mean_iou == pytest.approx(7 / 12, abs=1e-15)
    with pytest.raises(DataError):
        seg_metrics(np.zeros((2, 2), int))


def test_empty_class_is_excluded():
    two = seg_metrics([[1, 1], [0, 2]])
    three = seg_metrics([[1, 1, 0], [0, 2, 0], [0, 0, 0]])
    assert (three.class_acc, three.mean_iou) == (two.class_acc, two.mean_iou)
    assert three.per_class_iou[2] is None


def test_predicted_only_class_counts_in_iou_not_accuracy():
    r = seg_metrics([[1, 1], [0, 0]])
    assert r.class_acc == 0.5
    assert r.mean_iou == pytest.approx((0.5 + 0.0) / 2)


def _close(a, b, rel=1e-12):
    return a == b or abs(a - b) <= rel * max(abs(a), abs(b))


@pytest.mark.parametrize("seed", range(100))
def test_oracle_equivalence(seed):
    pred, gt, pl, gl, k = random_metric_case(seed)
    valid = gt > 0
    got = depth_metrics(pred, gt)
    want = depth_metrics_loop(pred[valid], gt[valid])
    for f in DEPTH_FIELDS:
        assert _close(getattr(got, f), want[f]), (f, getattr(got, f), want[f])
    seg = seg_metrics(confusion_accumulate(pl, gl, k))
    want = seg_metrics_loop(pl, gl, k, 255)
    for f in ("global_acc", "class_acc", "mean_iou"):
        assert _close(getattr(seg, f), want[f]), f


@pytest.mark.parametrize("seed", range(100))
def test_sie_scale_invariance_and_monotone_deltas(seed):
    pred, gt, *_ = random_metric_case(seed)
    base = depth_metrics(pred, gt)
    assert base.delta1 <= base.delta2 <= base.delta3
    assert base.sie >= 0.0
    for c in (0.1, 2.0, 10.0):
        assert abs(depth_metrics(c * pred, gt).sie - base.sie) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_delta_symmetry(seed):
    pred, gt, *_ = random_metric_case(seed)
    valid = gt > 0
    a, b = depth_metrics(pred[valid], gt[valid]), depth_metrics(gt[valid], pred[valid])
    assert (a.delta1, a.delta2, a.delta3) == (b.delta1, b.delta2, b.delta3)


def test_accumulation_consistency():
    cases = [random_metric_case(s) for s in range(5)]
    acc = DepthAccumulator()
    preds, gts = [], []
    for pred, gt, *_ in cases:
        acc.add(pred, gt)
        preds.append(pred[gt > 0])
        gts.append(gt[gt > 0])
    pooled = depth_metrics(np.concatenate(preds), np.concatenate(gts))
    assert acc.report() == pooled
    k = 4
    rng = np.random.default_rng(9)
    maps = [(rng.integers(0, k, (6, 7)), rng.integers(0, k, (6, 7))) for _ in range(4)]
    summed = sum(confusion_accumulate(p, g, k) for p, g in maps)
    whole = confusion_accumulate(np.concatenate([p for p, _ in maps]), np.concatenate([g for _, g in maps]), k)
    np.testing.assert_array_equal(summed, whole)
    assert seg_metrics(summed) == seg_metrics(whole)
    assert summed.sum() == 4 * 6 * 7
