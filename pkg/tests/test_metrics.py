"""Evaluation metrics against independent brute-force implementations,
plus curve invariants and hand-enumerable cases."""

import math

import numpy as np
import pytest

from mmforecast import metrics as M
from mmforecast.core import LogitVolume, SampleSet, SegMap
from mmforecast.losses import softmax

from conftest import random_sample_set, random_seg


# --- brute-force oracles ----------------------------------------------------

def oracle_iou_per_class(preds, gts, table):
    """Set-intersection IoU per class over a list of (pred, gt) pairs."""
    c = table.n_classes
    inter = np.zeros(c)
    union = np.zeros(c)
    for pred, gt in zip(preds, gts):
        for y in range(gt.data.shape[0]):
            for x in range(gt.data.shape[1]):
                g = gt.data[y, x]
                p = pred.data[y, x]
                if g == table.void_id:
                    continue
                if p == g:
                    inter[g] += 1
                    union[g] += 1
                else:
                    union[g] += 1
                    if p != table.void_id:
                        union[p] += 1
    out = np.full(c, np.nan)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


def oracle_pairwise_mse(s):
    probs = softmax(s.stack(), axis=1)
    total, n = 0.0, 0
    for i in range(s.k):
        for j in range(s.k):
            if j <= i:
                continue
            total += np.mean((probs[i] - probs[j]) ** 2)
            n += 1
    return total / n


def test_miou_matches_set_oracle(table):
    rng = np.random.default_rng(0)
    for _ in range(100):
        preds = [random_seg(rng, 4, 5, table) for _ in range(3)]
        gts = [random_seg(rng, 4, 5, table) for _ in range(3)]
        if all(np.all(g.data == table.void_id) for g in gts):
            continue
        cm = M.ConfusionMatrix(table.n_classes)
        for p, g in zip(preds, gts):
            M.accumulate_confusion(p, g, table, cm)
        o = oracle_iou_per_class(preds, gts, table)
        got = M.per_class_iou(cm)
        mask = ~np.isnan(o)
        assert np.array_equal(np.isnan(o), np.isnan(got))
        assert np.allclose(got[mask], o[mask], rtol=1e-12, atol=1e-14)
        assert abs(M.miou(cm) - np.nanmean(o)) < 1e-12


def test_miou_perfect_and_disjoint(table):
    gt = SegMap(np.array([[0, 1], [2, 3]]), table)
    assert M.seg_miou(gt, gt, table) == 1.0
    pred = SegMap(np.array([[1, 0], [3, 2]]), table)
    assert M.seg_miou(pred, gt, table) == 0.0


def test_miou_mo_subset(table):
    gt = SegMap(np.array([[4, 5], [0, 1]]), table)
    pred = SegMap(np.array([[4, 0], [0, 1]]), table)
    cm = M.accumulate_confusion(pred, gt, table)
    # car predicted perfectly, pedestrian missed entirely
    assert M.miou_mo(cm, table.movable_ids) == pytest.approx(0.5)


def test_predicted_void_counts_against(table):
    gt = SegMap(np.array([[0, 0]]), table)
    pred = SegMap(np.array([[0, 6]]), table)  # one void prediction
    cm = M.accumulate_confusion(pred, gt, table)
    assert M.miou(cm) == pytest.approx(0.5)


def test_all_void_gt_raises(table):
    cm = M.ConfusionMatrix(table.n_classes)
    with pytest.raises(ValueError):
        M.miou(cm)


def test_pairwise_mse_matches_oracle(table):
    rng = np.random.default_rng(1)
    s = random_sample_set(rng, 3, 6, 3, 4, table)
    assert abs(M.pairwise_mse(s) - oracle_pairwise_mse(s)) < 1e-12


def test_pairwise_mse_k1_is_zero(table):
    rng = np.random.default_rng(2)
    s = random_sample_set(rng, 1, 6, 2, 2, table)
    assert M.pairwise_mse(s) == 0.0


def test_pairwise_mse_identical_samples_zero(table):
    lv = LogitVolume(np.random.default_rng(3).normal(size=(6, 2, 2)), table)
    s = SampleSet(samples=(lv, lv, lv))
    assert M.pairwise_mse(s) == 0.0


def test_variance_maps_match_bruteforce(table):
    rng = np.random.default_rng(4)
    s = random_sample_set(rng, 4, 6, 3, 3, table)
    stack = s.stack()
    got = M.mean_logit_variance(s)
    for y in range(3):
        for x in range(3):
            per_c = [np.var(stack[:, c, y, x], ddof=1) for c in range(6)]
            assert abs(got[y, x] - np.mean(per_c)) < 1e-12
    gotd = M.discrete_prediction_variance(s)
    cls = np.argmax(stack, axis=1).astype(float)
    for y in range(3):
        for x in range(3):
            assert abs(gotd[y, x] - np.var(cls[:, y, x], ddof=1)) < 1e-12


def test_variance_maps_edge_cases(table):
    lv = LogitVolume(np.random.default_rng(5).normal(size=(6, 2, 2)), table)
    s = SampleSet(samples=(lv, lv))
    assert np.all(M.mean_logit_variance(s) == 0.0)
    assert np.all(M.discrete_prediction_variance(s) == 0.0)
    # two samples differing in one pixel's argmax between classes 0/1:
    a = np.zeros((6, 1, 1))
    b = np.zeros((6, 1, 1))
    a[0] = 1.0
    b[1] = 1.0
    s2 = SampleSet(samples=(LogitVolume(a, table), LogitVolume(b, table)))
    assert M.discrete_prediction_variance(s2)[0, 0] == pytest.approx(0.5)


def test_averaged_prediction(table):
    rng = np.random.default_rng(6)
    s = random_sample_set(rng, 4, 6, 2, 2, table)
    assert np.allclose(M.averaged_prediction(s).data, s.stack().mean(axis=0))


def test_top_fraction_miou(table):
    rng = np.random.default_rng(7)
    s = random_sample_set(rng, 4, 6, 4, 4, table)
    gt = random_seg(rng, 4, 4, table, allow_void=False)
    # fraction 1 equals the mean over all samples
    from mmforecast.core import argmax_decode
    all_scores = [M.seg_miou(argmax_decode(lv), gt, table) for lv in s.samples]
    got = M.top_fraction_miou([s], [gt], 1.0, table)
    assert got == pytest.approx(np.mean(all_scores))
    # fraction 0.25 keeps exactly the best
    got = M.top_fraction_miou([s], [gt], 0.25, table)
    assert got == pytest.approx(max(all_scores))
    # hand case: fraction 0.5 keeps the two best of four
    got = M.top_fraction_miou([s], [gt], 0.5, table)
    assert got == pytest.approx(np.mean(sorted(all_scores)[-2:]))
    with pytest.raises(ValueError):
        M.top_fraction_miou([s], [gt], 0.1, table)


def test_at_least_once_curve_monotone_and_oracle(table):
    rng = np.random.default_rng(8)
    sets = [random_sample_set(rng, 8, 6, 4, 4, table) for _ in range(4)]
    gts = [random_seg(rng, 4, 4, table) for _ in range(4)]
    oracle_preds = [random_seg(rng, 4, 4, table, allow_void=False) for _ in range(4)]
    curve = M.at_least_once_curve(sets, gts, oracle_preds, table)
    assert curve.checkpoints == [1, 2, 4, 8]
    for name, vals in curve.values.items():
        if vals is None:
            continue
        assert all(b >= a - 1e-15 for a, b in zip(vals, vals[1:])), name
        assert all(0.0 <= v <= 1.0 for v in vals)
    # brute-force check of the all_nonvoid value at n=2
    from mmforecast.core import argmax_decode
    hits = tot = 0
    for s, gt in zip(sets, gts):
        p1 = argmax_decode(s.samples[0]).data
        p2 = argmax_decode(s.samples[1]).data
        for y in range(4):
            for x in range(4):
                if gt.data[y, x] == table.void_id:
                    continue
                tot += 1
                if p1[y, x] == gt.data[y, x] or p2[y, x] == gt.data[y, x]:
                    hits += 1
    assert curve.values["all_nonvoid"][1] == pytest.approx(hits / tot)


def test_at_least_once_empty_subset_is_none(table):
    rng = np.random.default_rng(9)
    sets = [random_sample_set(rng, 2, 6, 2, 2, table)]
    gts = [SegMap(np.zeros((2, 2), dtype=np.int64), table)]  # no movables
    ops = [SegMap(np.ones((2, 2), dtype=np.int64), table)]
    curve = M.at_least_once_curve(sets, gts, ops, table)
    assert curve.values["movable_only"] is None
    assert curve.values["all_nonvoid"] is not None


def test_copy_last_baseline_without_model(table):
    rng = np.random.default_rng(10)

    class Clip:
        pass

    clip = Clip()
    clip.last_input_seg = random_seg(rng, 4, 4, table)
    assert M.copy_last_baseline(clip) is clip.last_input_seg


def test_prediction_dump_roundtrip(table, tmp_path):
    rng = np.random.default_rng(11)
    s = random_sample_set(rng, 3, 6, 2, 2, table)
    gt = random_seg(rng, 2, 2, table)
    op = random_seg(rng, 2, 2, table, allow_void=False)
    path = str(tmp_path / "pred.npz")
    M.dump_predictions(path, "clip_x", s, gt, op)
    cid, s2, gt2, op2 = M.load_predictions(path, table)
    assert cid == "clip_x"
    assert np.array_equal(s2.stack(), s.stack())
    assert s2.noise_seeds == s.noise_seeds
    assert np.array_equal(gt2.data, gt.data)
    assert np.array_equal(op2.data, op.data)


def test_default_checkpoints():
    assert M.default_checkpoints(8) == [1, 2, 4, 8]
    assert M.default_checkpoints(5) == [1, 2, 4]
    assert M.default_checkpoints(1) == [1]
