import math

import numpy as np
import pytest

from gerseg import dihedral as dh
from gerseg import evalmetrics as em
from gerseg.errors import ShapeError


def hausdorff_bruteforce(pred, gt):
    """All-pairs double-loop reference, O(n^2) in pure Python."""
    a = [tuple(p) for p in np.argwhere(np.asarray(pred, dtype=bool))]
    b = [tuple(p) for p in np.argwhere(np.asarray(gt, dtype=bool))]
    if not a or not b:
        return None

    def directed(src, dst):
        worst = 0
        for p in src:
            best = min((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 for q in dst)
            worst = max(worst, best)
        return worst

    return float(math.sqrt(max(directed(a, b), directed(b, a))))


def random_mask(rng, size=32, p=0.2):
    return (rng.random((size, size)) < p).astype(np.uint8)


class TestOverlapMetrics:
    def test_perfect_prediction(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        r = em.overlap_metrics(m, m)
        assert r.dice == r.jaccard == r.precision == r.f1 == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[7, 7] = 1
        r = em.overlap_metrics(a, b)
        assert r.dice == 0.0 and r.jaccard == 0.0

    def test_counting_example(self):
        # pred 2 px, gt 2 px, overlap 1 px on a 4x4 grid
        pred = np.zeros((4, 4), dtype=np.uint8)
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred[0, 0] = pred[0, 1] = 1
        gt[0, 1] = gt[0, 2] = 1
        r = em.overlap_metrics(pred, gt)
        assert (r.tp, r.fp, r.tn, r.fn) == (1, 1, 13, 1)
        assert r.dice == 0.5
        assert abs(r.jaccard - 1 / 3) <= 1e-15
        assert r.precision == 0.5
        assert abs(r.specificity - 13 / 14) <= 1e-15  # TN/(TN+FP) with TN = 16 - 3

    def test_empty_mask_conventions(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        full = np.ones((4, 4), dtype=np.uint8)
        both = em.overlap_metrics(empty, empty)
        assert both.dice == 1.0 and both.jaccard == 1.0
        assert both.precision is None
        one = em.overlap_metrics(empty, full)
        assert one.dice == 0.0
        assert one.specificity is None  # gt has no background
        assert em.hausdorff(empty, full) is None
        assert em.hausdorff(empty, empty) is None

    def test_shape_and_value_validation(self):
        with pytest.raises(ShapeError):
            em.overlap_metrics(np.zeros((2, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            em.overlap_metrics(np.full((2, 2), 3), np.zeros((2, 2)))

    def test_dice_jaccard_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = em.overlap_metrics(random_mask(rng), random_mask(rng))
            if r.dice and r.jaccard:
                assert abs(r.dice - 2 * r.jaccard / (1 + r.jaccard)) <= 1e-12

    def test_symmetry_properties(self):
        rng = np.random.default_rng(1)
        a, b = random_mask(rng, p=0.3), random_mask(rng, p=0.1)
        ab, ba = em.overlap_metrics(a, b), em.overlap_metrics(b, a)
        assert ab.dice == ba.dice and ab.jaccard == ba.jaccard
        assert em.hausdorff(a, b) == em.hausdorff(b, a)
        assert ab.precision != ba.precision
        assert ab.specificity != ba.specificity


class TestHausdorff:
    def test_identical_masks_zero(self):
        rng = np.random.default_rng(2)
        m = random_mask(rng)
        assert em.hausdorff(m, m) == 0.0

    def test_three_four_five(self):
        a = np.zeros((8, 8), dtype=np.uint8)
        b = np.zeros((8, 8), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert em.hausdorff(a, b) == 5.0

    def test_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(3)
        for i in range(100):
            a = random_mask(rng, p=rng.uniform(0.02, 0.4))
            b = random_mask(rng, p=rng.uniform(0.02, 0.4))
            got = em.hausdorff(a, b)
            want = hausdorff_bruteforce(a, b)
            assert got == want

    def test_chunked_path(self):
        rng = np.random.default_rng(4)
        a = random_mask(rng, size=64, p=0.5)
        b = random_mask(rng, size=64, p=0.5)
        assert em.hausdorff(a, b) == hausdorff_bruteforce(a, b)


class TestInvariance:
    def test_all_metrics_invariant_under_joint_d4_transform(self):
        rng = np.random.default_rng(5)
        a, b = random_mask(rng), random_mask(rng)
        base = em.evaluate_pair(a, b)
        for g in dh.ELEMENTS:
            ta = dh.act_on_plane(g, a)
            tb = dh.act_on_plane(g, b)
            r = em.evaluate_pair(ta, tb)
            assert r.dice == base.dice
            assert r.jaccard == base.jaccard
            assert r.precision == base.precision
            assert r.specificity == base.specificity
            assert r.hausdorff == base.hausdorff

    def test_ranges(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            r = em.evaluate_pair(random_mask(rng), random_mask(rng))
            for v in (r.dice, r.jaccard, r.precision, r.specificity, r.f1):
                assert v is None or 0.0 <= v <= 1.0
            assert r.hausdorff is None or r.hausdorff >= 0


class TestAggregate:
    def test_single_case_is_itself(self):
        r = em.overlap_metrics(np.eye(4, dtype=np.uint8), np.eye(4, dtype=np.uint8))
        agg = em.dataset_aggregate([r])
        assert agg["n_cases"] == 1
        assert agg["macro"]["dice"] == r.dice
        assert agg["micro"]["dice"] == r.dice

    def test_two_identical_cases_same_mean(self):
        rng = np.random.default_rng(7)
        a, b = random_mask(rng), random_mask(rng)
        r = em.evaluate_pair(a, b)
        agg = em.dataset_aggregate([r, r])
        assert agg["macro"]["dice"] == r.dice
        assert agg["micro"]["dice"] == r.dice

    def test_macro_micro_diverge_on_imbalanced_cases(self):
        big_pred = np.ones((10, 10), dtype=np.uint8)
        big_gt = np.ones((10, 10), dtype=np.uint8)   # 100 px, perfect
        small_pred = np.zeros((10, 10), dtype=np.uint8)
        small_gt = np.zeros((10, 10), dtype=np.uint8)
        small_pred[0, 0] = 1
        small_gt[0, 1] = 1                            # 1 px, complete miss
        reports = [em.overlap_metrics(big_pred, big_gt),
                   em.overlap_metrics(small_pred, small_gt)]
        agg = em.dataset_aggregate(reports)
        assert agg["macro"]["dice"] == 0.5            # mean of 1 and 0
        assert agg["micro"]["dice"] == 200 / 202      # pooled counts
        assert agg["macro"]["dice"] != agg["micro"]["dice"]

    def test_undefined_values_excluded_from_macro(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        full = np.ones((4, 4), dtype=np.uint8)
        reports = [em.overlap_metrics(empty, empty), em.overlap_metrics(full, full)]
        agg = em.dataset_aggregate(reports)
        assert agg["macro"]["precision"] == 1.0  # only the defined case counts
