"""Relaxed-metric tests against brute-force nearest-neighbour oracles."""

import numpy as np
import pytest

from lgseg import evaluation
from lgseg.evaluation import (PrCurve, PrPoint, max_f, nearest_sqdist,
                              pr_curve, relaxed_pr, set_curve)
from lgseg.rng import SplitMix64


def brute_sqdist(mask):
    """O(n^2) exact squared distance to the nearest 1-pixel."""
    mask = np.asarray(mask).astype(bool)
    out = np.full(mask.shape, np.inf)
    ones = np.argwhere(mask)
    if ones.size == 0:
        return out
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            d = (ones[:, 0] - r) ** 2 + (ones[:, 1] - c) ** 2
            out[r, c] = d.min()
    return out


def brute_relaxed_pr(pred, gt, rho):
    """Independent relaxed P/R via explicit nearest-neighbour search."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    gt_sq = brute_sqdist(gt)
    pred_sq = brute_sqdist(pred)
    n_pred = pred.sum()
    n_gt = gt.sum()
    precision = 1.0 if n_pred == 0 else (pred & (gt_sq <= rho * rho)).sum() / n_pred
    recall = 1.0 if n_gt == 0 else (gt & (pred_sq <= rho * rho)).sum() / n_gt
    return precision, recall


def random_mask(rng, shape=(32, 32), density=0.1):
    return rng.uniform(0, 1, shape) < density


class TestDistanceTransform:
    def test_matches_brute_force_on_sparse_maps(self):
        rng = SplitMix64(0)
        for i in range(200):
            mask = random_mask(rng, (16, 16), density=0.05 + 0.2 * (i % 4))
            got = nearest_sqdist(mask)
            want = brute_sqdist(mask)
            assert np.array_equal(got, want)

    def test_empty_mask_is_infinite(self):
        assert np.isinf(nearest_sqdist(np.zeros((4, 4)))).all()

    def test_zero_on_positives(self):
        rng = SplitMix64(1)
        mask = random_mask(rng)
        sq = nearest_sqdist(mask)
        assert (sq[mask] == 0).all()


class TestRelaxedPr:
    def test_identical_maps_perfect(self):
        rng = SplitMix64(2)
        mask = random_mask(rng)
        for rho in (0, 1, 3):
            assert relaxed_pr(mask, mask, rho) == (1.0, 1.0)

    def test_distance_three_boundary(self):
        gt = np.zeros((9, 9), dtype=np.uint8)
        pred = np.zeros((9, 9), dtype=np.uint8)
        gt[4, 4] = 1
        pred[4, 7] = 1
        assert relaxed_pr(pred, gt, 3) == (1.0, 1.0)
        assert relaxed_pr(pred, gt, 2) == (0.0, 0.0)

    def test_rho_zero_equals_exact_confusion_matrix(self):
        rng = SplitMix64(3)
        for _ in range(50):
            pred = random_mask(rng, density=0.2)
            gt = random_mask(rng, density=0.2)
            precision, recall = relaxed_pr(pred, gt, 0)
            tp = (pred & gt).sum()
            want_p = 1.0 if pred.sum() == 0 else tp / pred.sum()
            want_r = 1.0 if gt.sum() == 0 else tp / gt.sum()
            assert precision == want_p and recall == want_r

    def test_empty_prediction_vacuous_precision(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2, 2] = 1
        assert relaxed_pr(np.zeros((8, 8)), gt, 3) == (1.0, 0.0)

    def test_empty_gt_vacuous_recall(self):
        pred = np.zeros((8, 8), dtype=np.uint8)
        pred[2, 2] = 1
        assert relaxed_pr(pred, np.zeros((8, 8)), 3) == (0.0, 1.0)

    def test_monotone_in_rho(self):
        rng = SplitMix64(4)
        for _ in range(10):
            pred = random_mask(rng)
            gt = random_mask(rng)
            prev = (0.0, 0.0)
            for rho in (0, 1, 2, 3, 5):
                cur = relaxed_pr(pred, gt, rho)
                assert cur[0] >= prev[0] and cur[1] >= prev[1]
                prev = cur

    def test_symmetry_precision_recall_swap(self):
        rng = SplitMix64(5)
        for _ in range(10):
            a = random_mask(rng)
            b = random_mask(rng)
            assert relaxed_pr(a, b, 2)[0] == relaxed_pr(b, a, 2)[1]

    def test_matches_brute_force_oracle(self):
        rng = SplitMix64(6)
        for _ in range(25):
            pred = random_mask(rng, (24, 24), 0.15)
            gt = random_mask(rng, (24, 24), 0.15)
            for rho in (0, 1, 2, 3):
                assert relaxed_pr(pred, gt, rho) == brute_relaxed_pr(pred, gt, rho)

    def test_extent_mismatch_rejected(self):
        with pytest.raises(ValueError):
            relaxed_pr(np.zeros((4, 4)), np.zeros((5, 5)), 1)

    def test_negative_rho_rejected(self):
        with pytest.raises(ValueError):
            relaxed_pr(np.zeros((4, 4)), np.zeros((4, 4)), -1)


class TestPrCurve:
    def test_constant_prob_step_function(self):
        gt = np.zeros((10, 10), dtype=np.uint8)
        gt[4:6, 4:6] = 1
        prob = np.full((10, 10), 0.7)
        curve = pr_curve(prob, gt, rho=1)
        for p in curve.points:
            if p.threshold <= 0.7:
                # all-ones prediction: every gt pixel is found
                assert p.recall == 1.0
            else:
                assert p.precision == 1.0 and p.recall == 0.0

    def test_prob_equal_gt_perfect_everywhere(self):
        rng = SplitMix64(7)
        gt = random_mask(rng).astype(np.uint8)
        curve = pr_curve(gt.astype(float), gt, rho=1)
        for p in curve.points:
            assert p.precision == 1.0 and p.recall == 1.0 and p.f == 1.0

    def test_every_point_matches_per_threshold_oracle(self):
        rng = SplitMix64(8)
        prob = rng.uniform(0, 1, (32, 32))
        gt = random_mask(rng, (32, 32), 0.15)
        curve = pr_curve(prob, gt, rho=1, thresholds=[0.2, 0.5, 0.8])
        for p in curve.points:
            want = brute_relaxed_pr(prob >= p.threshold, gt, 1)
            assert (p.precision, p.recall) == want

    def test_recall_nonincreasing_in_threshold(self):
        rng = SplitMix64(9)
        prob = rng.uniform(0, 1, (20, 20))
        gt = random_mask(rng, (20, 20))
        curve = pr_curve(prob, gt, rho=2)
        recalls = [p.recall for p in curve.points]
        assert all(a >= b for a, b in zip(recalls, recalls[1:]))

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ValueError):
            pr_curve(np.zeros((4, 4)), np.zeros((4, 4)), 1, thresholds=[0.5, 0.2])

    def test_out_of_range_probs_rejected(self):
        with pytest.raises(ValueError):
            pr_curve(np.full((4, 4), 1.5), np.zeros((4, 4)), 1)


class TestMaxF:
    def test_perfect_curve_takes_lowest_threshold(self):
        rng = SplitMix64(10)
        gt = random_mask(rng).astype(np.uint8)
        curve = pr_curve(gt.astype(float), gt, rho=1)
        t, f = max_f(curve)
        assert f == 1.0 and t == curve.points[0].threshold

    def test_tie_breaks_toward_lower_threshold(self):
        pts = [PrPoint(t, 0, 0, f) for t, f in [(0.1, 0.2), (0.2, 0.9), (0.3, 0.9), (0.4, 0.4)]]
        t, f = max_f(PrCurve(pts, 3))
        assert (t, f) == (0.2, 0.9)

    def test_empty_curve_rejected(self):
        with pytest.raises(ValueError):
            max_f(PrCurve([], 3))

    def test_reference_constants_recorded(self):
        assert evaluation.REFERENCE_MAX_F["buildings_us"] == 0.9423
        assert evaluation.REFERENCE_MAX_F["buildings_europe_dual"] == 0.8420
        assert evaluation.REFERENCE_MAX_F["roads_dual"] == 0.665


class TestSetCurve:
    def test_mean_f_matches_hand_computation(self):
        # three tiny images with known per-image behaviour at two thresholds
        gts, probs = [], []
        rng = SplitMix64(11)
        for _ in range(3):
            gt = random_mask(rng, (12, 12), 0.2).astype(np.uint8)
            probs.append(gt * 0.6 + 0.1)  # gt pixels 0.7, rest 0.1
            gts.append(gt)
        curve = set_curve(probs, gts, rho=1, thresholds=[0.5, 0.9])
        per_image = [pr_curve(p, g, 1, [0.5, 0.9]) for p, g in zip(probs, gts)]
        for i in range(2):
            want_f = np.mean([c.points[i].f for c in per_image])
            assert curve.points[i].f == pytest.approx(want_f, abs=1e-12)

    def test_mean_f_differs_from_pooled_on_unbalanced_sets(self):
        gt1 = np.zeros((12, 12), dtype=np.uint8)
        gt1[2:10, 2:10] = 1
        gt2 = np.zeros((12, 12), dtype=np.uint8)
        gt2[5, 5] = 1
        probs = [gt1 * 0.8, np.full((12, 12), 0.3)]
        mean_curve = set_curve(probs, [gt1, gt2], 0, thresholds=[0.5])
        pooled_curve = set_curve(probs, [gt1, gt2], 0, thresholds=[0.5], aggregate="pooled")
        assert mean_curve.points[0].f != pooled_curve.points[0].f

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            set_curve([], [], 1)


def test_pr_csv_format(tmp_path):
    curve = PrCurve([PrPoint(0.25, 1 / 3, 0.5, 0.4)], 3)
    path = tmp_path / "curve.csv"
    evaluation.write_pr_csv(curve, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "threshold,precision,recall,f"
    assert lines[1] == "0.250000,0.333333,0.500000,0.400000"
