import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protuberseg.evalmetrics import (
    composite_dice,
    dice,
    evaluate_set,
    lesion_match,
)
from protuberseg.volume import Mask, write_pvol

from test_volume import flood_fill_labels


def mask(arr):
    return Mask(np.asarray(arr, dtype=np.uint8))


def blob(dims, slices):
    data = np.zeros(dims, dtype=np.uint8)
    data[slices] = 1
    return Mask(data)


# ---------------------------------------------------------------------------
# dice

def test_dice_basics():
    rng = np.random.default_rng(0)
    m = mask((rng.random((5, 5, 5)) < 0.4).astype(np.uint8))
    assert dice(m, m) == 1.0
    empty = mask(np.zeros((5, 5, 5)))
    assert dice(empty, empty) == 1.0
    assert dice(m, empty) == 0.0
    a = blob((6, 6, 6), (slice(0, 1), slice(0, 2), slice(0, 5)))
    b = blob((6, 6, 6), (slice(0, 1), slice(1, 3), slice(0, 5)))
    # |P|=|G|=10, overlap 5 -> 0.5
    assert dice(a, b) == 0.5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = mask((rng.random((5, 5, 5)) < 0.4).astype(np.uint8))
    b = mask((rng.random((5, 5, 5)) < 0.4).astype(np.uint8))
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_dice_dim_mismatch():
    with pytest.raises(ValueError):
        dice(mask(np.zeros((4, 4, 4))), mask(np.zeros((4, 4, 5))))


# ---------------------------------------------------------------------------
# composite dice

def test_composite_dice_perfect():
    rng = np.random.default_rng(1)
    k = mask((rng.random((6, 6, 6)) < 0.3).astype(np.uint8))
    t = mask(((rng.random((6, 6, 6)) < 0.2) & (k.data == 0)).astype(np.uint8))
    out = composite_dice(k, t, k, t)
    assert out == {"kidney_dice": 1.0, "tumor_dice": 1.0, "composite": 1.0}


def test_composite_dice_perfect_union_empty_tumor():
    k = blob((6, 6, 6), (slice(1, 5), slice(1, 5), slice(1, 5)))
    t = blob((6, 6, 6), (slice(2, 4), slice(2, 4), slice(2, 4)))
    gt_kidney = mask(k.data & ~t.data)
    # prediction nails kidney∪tumor but labels all of it kidney
    out = composite_dice(k, mask(np.zeros((6, 6, 6))), gt_kidney, t)
    assert out["kidney_dice"] == 1.0
    assert out["tumor_dice"] == 0.0
    assert out["composite"] == 0.5


def test_composite_dice_reference_identity():
    # reference pairing: mean(0.9737, 0.8509) = 0.9123
    assert (0.9737 + 0.8509) / 2.0 == pytest.approx(0.9123, abs=5e-5)


# ---------------------------------------------------------------------------
# lesion matching

def brute_force_match(pred: Mask, gt: Mask):
    """Exhaustive re-derivation: enumerate components, recompute overlaps."""
    pl, np_ = flood_fill_labels(pred.data, 26)
    gl, ng = flood_fill_labels(gt.data, 26)
    tp = fn = 0
    used = set()
    for li in range(1, ng + 1):
        lesion = gl == li
        comps = sorted(set(pl[lesion].tolist()) - {0})
        used.update(comps)
        union = np.isin(pl, comps) if comps else np.zeros_like(lesion)
        inter = int((union & lesion).sum())
        d = 2.0 * inter / (int(union.sum()) + int(lesion.sum())) \
            if comps else 0.0
        if d > 0.5:
            tp += 1
        else:
            fn += 1
    fp = 0
    for ci in range(1, np_ + 1):
        if ci in used:
            continue
        if int((gt.data[pl == ci]).sum()) == 0:
            fp += 1
    return tp, fn, fp


def test_lesion_match_trivial_cases():
    gt = np.zeros((10, 10, 10), dtype=np.uint8)
    gt[1:3, 1:3, 1:3] = 1
    gt[7:9, 7:9, 7:9] = 1
    m = mask(gt)
    rep = lesion_match(m, m)
    assert (rep.tp, rep.fn, rep.fp) == (2, 0, 0)
    assert rep.sensitivity == 1.0

    empty = mask(np.zeros((10, 10, 10)))
    single = blob((10, 10, 10), (slice(2, 4), slice(2, 4), slice(2, 4)))
    rep = lesion_match(empty, single)
    assert (rep.tp, rep.fn, rep.fp) == (0, 1, 0)


def test_lesion_match_low_dice_overlap_is_neither_tp_nor_fp():
    gt = blob((12, 12, 12), (slice(2, 8), slice(2, 8), slice(2, 8)))
    pred = blob((12, 12, 12), (slice(2, 3), slice(2, 3), slice(2, 3)))
    rep = lesion_match(pred, gt)
    assert (rep.tp, rep.fn, rep.fp) == (0, 1, 0)


def test_lesion_match_counts_nonoverlapping_fp():
    gt = blob((12, 12, 12), (slice(2, 5), slice(2, 5), slice(2, 5)))
    pred = gt.data.copy()
    pred[9:11, 9:11, 9:11] = 1  # far component, zero overlap
    rep = lesion_match(mask(pred), gt)
    assert (rep.tp, rep.fn, rep.fp) == (1, 0, 1)


def test_lesion_match_against_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        pred = mask((rng.random((24, 24, 24)) < 0.04).astype(np.uint8))
        gt = mask((rng.random((24, 24, 24)) < 0.04).astype(np.uint8))
        rep = lesion_match(pred, gt)
        assert (rep.tp, rep.fn, rep.fp) == brute_force_match(pred, gt)


# ---------------------------------------------------------------------------
# set evaluation

def test_evaluate_set(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    lesion = blob((10, 10, 10), (slice(2, 5), slice(2, 5), slice(2, 5)))
    empty = mask(np.zeros((10, 10, 10)))
    # image 0: perfect; image 1: empty prediction on one lesion
    write_pvol(pred_dir / "im0.pvol", lesion)
    write_pvol(gt_dir / "im0.pvol", lesion)
    write_pvol(pred_dir / "im1.pvol", empty)
    write_pvol(gt_dir / "im1.pvol", lesion)
    out = tmp_path / "report.json"
    rep = evaluate_set(pred_dir, gt_dir, out)
    assert rep["sensitivity"] == 0.5
    assert rep["fps_per_image"] == 0.0
    assert rep["mean_tumor_dice"] == pytest.approx(0.5)
    assert out.exists()

    rep1 = evaluate_set(pred_dir, gt_dir)
    single_dir = tmp_path / "single"
    single_dir.mkdir()
    write_pvol(single_dir / "im0.pvol", lesion)
    write_pvol(single_dir / "im1.pvol", lesion)
    perfect = evaluate_set(single_dir, gt_dir)
    assert perfect["sensitivity"] == 1.0


def test_evaluate_set_missing_pair(tmp_path):
    pred_dir = tmp_path / "pred"
    gt_dir = tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    lesion = blob((6, 6, 6), (slice(1, 3), slice(1, 3), slice(1, 3)))
    write_pvol(pred_dir / "a.pvol", lesion)
    write_pvol(gt_dir / "b.pvol", lesion)
    with pytest.raises(ValueError, match="a.pvol"):
        evaluate_set(pred_dir, gt_dir)
