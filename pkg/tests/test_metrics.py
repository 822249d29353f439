import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtbit.metrics import (
    Confusion,
    binarize,
    confusion,
    crmse,
    error_sums,
    f1,
    histogram,
    histogram_csv,
    iou,
    report,
    rmse,
)


def brute_force(pred_mask, gt_mask, pred3d, gt3d):
    """Per-pixel loop oracle, independent of the vectorised code."""
    tp = fp = fn = tn = 0
    sse = 0.0
    sse_c = 0.0
    n_c = 0
    for p, g, a, b in zip(pred_mask.ravel().tolist(), gt_mask.ravel().tolist(), pred3d.ravel().tolist(),
                          gt3d.ravel().tolist()):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
        sse += (a - b) ** 2
        if b != 0:
            sse_c += (a - b) ** 2
            n_c += 1
    n = pred_mask.size
    iou_v = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    f1_v = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return (tp, fp, fn, tn), iou_v, f1_v, math.sqrt(sse / n), (math.sqrt(sse_c / n_c) if n_c else None)


def test_oracle_equivalence_on_random_maps():
    rng = np.random.default_rng(20240601)
    for _ in range(100):
        gm = (rng.random((32, 32)) < rng.uniform(0, 0.3)).astype(np.uint8)
        pm = (rng.random((32, 32)) < rng.uniform(0, 0.3)).astype(np.uint8)
        g3 = np.where(gm == 1, rng.uniform(-30, 35, (32, 32)), 0.0)
        p3 = rng.normal(0, 5, (32, 32))
        counts, iou_o, f1_o, rmse_o, crmse_o = brute_force(pm, gm, p3, g3)
        c = confusion(pm, gm)
        assert (c.tp, c.fp, c.fn, c.tn) == counts
        assert abs(iou(c) - iou_o) <= 1e-12
        assert abs(f1(c) - f1_o) <= 1e-12
        assert abs(rmse(p3, g3) - rmse_o) <= 1e-12
        if crmse_o is None:
            assert crmse(p3, g3) is None
        else:
            assert abs(crmse(p3, g3) - crmse_o) <= 1e-12


def test_hand_derived_regression_case():
    gt, pred = np.array([0.0, 2.0, -3.0]), np.array([1.0, 1.0, 0.0])
    assert rmse(pred, gt) == pytest.approx(math.sqrt(11 / 3), abs=1e-12)
    assert crmse(pred, gt) == pytest.approx(math.sqrt(5), abs=1e-12)
    assert rmse(gt, gt) == 0.0 and crmse(gt, gt) == 0.0
    z = np.zeros(3)
    assert crmse(pred, z) is None
    assert rmse(pred, z) == pytest.approx(math.sqrt(2 / 3))


def test_binarize_ties_go_to_no_change():
    m = np.array([[0.5, 0.1, 0.9], [0.5, 0.9, 0.1]]).reshape(2, 1, 3)
    np.testing.assert_array_equal(binarize(m), [[0, 1, 0]])


def test_confusion_examples():
    gt = np.zeros(100, np.uint8)
    gt[:5] = 1
    assert confusion(gt, gt) == Confusion(5, 0, 0, 95)
    assert confusion(np.zeros(100, np.uint8), gt).fn == 5
    assert confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == Confusion(1, 1, 1, 1)
    with pytest.raises(ValueError):
        confusion(np.zeros(3), np.zeros(4))


def test_iou_f1_examples():
    c = Confusion(tp=2, fp=1, fn=1, tn=0)
    assert iou(c) == 0.5 and f1(c) == pytest.approx(2 / 3, abs=1e-15)
    assert iou(Confusion(3, 0, 0, 7)) == f1(Confusion(3, 0, 0, 7)) == 1.0
    assert iou(Confusion(0, 4, 0, 1)) == f1(Confusion(0, 4, 0, 1)) == 0.0
    assert iou(Confusion()) == f1(Confusion()) == 1.0


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
def test_iou_never_exceeds_f1(tp, fp, fn):
    c = Confusion(tp, fp, fn, 0)
    assert iou(c) <= f1(c) + 1e-15
    assert 0 <= iou(c) <= 1 and 0 <= f1(c) <= 1


def test_histogram_examples():
    edges, counts, zeros = histogram([0.0, 0.0, 2.4])
    assert zeros == 2
    k = int(np.searchsorted(edges, 2.0))
    assert edges[k] == 2.0 and counts[k] == 1 and counts.sum() == 1
    edges, counts, zeros = histogram([])
    assert zeros == 0 and counts.sum() == 0 and len(edges) == 66
    with pytest.raises(ValueError):
        histogram([np.inf])


@given(st.lists(st.floats(-50, 50, allow_nan=False), max_size=200))
def test_histogram_partitions_pixels(values):
    _, counts, zeros = histogram(values)
    assert counts.sum() + zeros == len(values)


def test_histogram_csv_layout():
    text = histogram_csv(np.array([0.0, 0.0, 2.4]), np.array([0.0, 1.5, 2.2]))
    lines = text.strip().split("\n")
    assert lines[0] == "bin_left,bin_right,count_gt,count_pred"
    assert lines[1] == "0.0,0.0,2,1"
    assert "2.0,3.0,1,1" in lines
    assert len(lines) == 2 + 65


def test_micro_average_and_order_invariance():
    rng = np.random.default_rng(0)
    rows = []
    for i in range(5):
        gm = (rng.random((8, 8)) < 0.2).astype(np.uint8)
        pm = (rng.random((8, 8)) < 0.2).astype(np.uint8)
        g3 = np.where(gm == 1, 5.0, 0.0)
        rows.append((f"t{i}", pm, gm, rng.normal(0, 1, (8, 8)), g3))
    a, b = report(rows), report(rows[::-1])
    assert (a.f1, a.iou, a.rmse, a.crmse) == (b.f1, b.iou, b.rmse, b.crmse)
    pooled = confusion(np.stack([r[1] for r in rows]), np.stack([r[2] for r in rows]))
    assert a.confusion == pooled and a.f1 == f1(pooled)
    es = error_sums(np.stack([r[3] for r in rows]), np.stack([r[4] for r in rows]))
    assert a.rmse == pytest.approx(es.rmse, rel=1e-14) and a.crmse == pytest.approx(es.crmse, rel=1e-14)
    assert a.n == 320 and a.n_c == es.n_c


def test_oracle_and_all_zero_predictors():
    rng = np.random.default_rng(1)
    gm = (rng.random((16, 16)) < 0.1).astype(np.uint8)
    g3 = np.where(gm == 1, rng.uniform(1, 30, (16, 16)), 0.0)
    r = report([("a", gm, gm, g3, g3)])
    assert r.f1 == r.iou == 1.0 and r.rmse == 0.0 and r.crmse == 0.0
    z = report([("a", np.zeros_like(gm), gm, np.zeros_like(g3), g3)])
    assert z.f1 == 0.0
    assert z.crmse == pytest.approx(math.sqrt(np.mean(g3[gm == 1] ** 2)), rel=1e-14)
    assert '"f1"' in z.to_json() and "cRMSE" in z.summary()
