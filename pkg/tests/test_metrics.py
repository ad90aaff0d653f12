import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semgrid.metrics import (
    ConfusionMatrix,
    EmptyEvalError,
    ShapeError,
    accumulate,
    summarize,
)


def hand_case():
    """2x2 image: truth [a,a,b,b], prediction [a,b,b,b]."""
    cm = ConfusionMatrix.zeros(2)
    accumulate(cm, np.array([[0, 0], [1, 1]]), np.array([[0, 1], [1, 1]]))
    return cm


class TestAccumulate:
    def test_diagonal_when_perfect(self):
        cm = ConfusionMatrix.zeros(3)
        img = np.array([[0, 1], [2, 1]])
        accumulate(cm, img, img)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 1]))
        assert cm.ignored == 0

    def test_all_void_truth(self):
        cm = ConfusionMatrix.zeros(2)
        accumulate(cm, np.full((3, 3), -1), np.zeros((3, 3), int))
        assert cm.total == 0
        assert cm.ignored == 9

    def test_unlabeled_prediction_ignored(self):
        cm = ConfusionMatrix.zeros(2)
        accumulate(cm, np.zeros((2, 2), int), np.full((2, 2), -1))
        assert cm.total == 0
        assert cm.ignored == 4

    def test_hand_counts(self):
        cm = hand_case()
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])

    def test_shape_mismatch(self):
        cm = ConfusionMatrix.zeros(2)
        with pytest.raises(ShapeError):
            accumulate(cm, np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_label_out_of_range(self):
        cm = ConfusionMatrix.zeros(2)
        with pytest.raises(ShapeError):
            accumulate(cm, np.full((1, 1), 5), np.zeros((1, 1), int))

    def test_pixel_order_irrelevant(self):
        rng = np.random.default_rng(0)
        truth = rng.integers(-1, 3, size=100)
        pred = rng.integers(-1, 3, size=100)
        a = accumulate(ConfusionMatrix.zeros(3), truth, pred)
        perm = rng.permutation(100)
        b = accumulate(ConfusionMatrix.zeros(3), truth[perm], pred[perm])
        np.testing.assert_array_equal(a.counts, b.counts)
        assert a.ignored == b.ignored


class TestSummarize:
    def test_perfect_prediction(self):
        cm = ConfusionMatrix.zeros(3)
        img = np.array([[0, 1], [2, 1]])
        accumulate(cm, img, img)
        s = summarize(cm)
        assert s.global_accuracy == 1.0
        assert s.mean_iou == 1.0
        assert s.mean_recall == 1.0
        assert s.fw_iou == 1.0

    def test_hand_metrics(self):
        s = summarize(hand_case())
        assert s.per_class_recall[0] == pytest.approx(0.5)
        assert s.per_class_recall[1] == pytest.approx(1.0)
        assert s.per_class_precision[0] == pytest.approx(1.0)
        assert s.per_class_precision[1] == pytest.approx(2.0 / 3.0)
        assert s.per_class_iou[0] == pytest.approx(0.5)
        assert s.per_class_iou[1] == pytest.approx(2.0 / 3.0)
        assert s.global_accuracy == pytest.approx(0.75)
        assert s.mean_iou == pytest.approx((0.5 + 2 / 3) / 2)
        assert s.fw_iou == pytest.approx(0.5 * 0.5 + 0.5 * 2 / 3)

    def test_half_correct_vs_void(self):
        cm = ConfusionMatrix.zeros(2)
        truth = np.array([0, 0, -1, -1])
        pred = np.array([0, 1, 0, 0])
        accumulate(cm, truth, pred)
        s = summarize(cm)
        assert s.global_accuracy == pytest.approx(0.5)
        assert s.ignored_pixels == 2

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix.zeros(3)
        accumulate(cm, np.array([0, 0, 1]), np.array([0, 1, 1]))
        s = summarize(cm)
        assert np.isnan(s.per_class_iou[2])
        assert not s.present[2]
        # means over the two present classes only
        assert s.mean_recall == pytest.approx((0.5 + 1.0) / 2)

    def test_iou_never_exceeds_recall(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            cm = ConfusionMatrix.zeros(4)
            accumulate(cm, rng.integers(0, 4, 200), rng.integers(0, 4, 200))
            s = summarize(cm)
            ok = s.present
            assert np.all(s.per_class_iou[ok] <= s.per_class_recall[ok] + 1e-12)

    def test_empty_rejected(self):
        with pytest.raises(EmptyEvalError):
            summarize(ConfusionMatrix.zeros(2))


class TestMerge:
    def test_merge_equals_concatenated_stream(self):
        rng = np.random.default_rng(2)
        t1, p1 = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
        t2, p2 = rng.integers(0, 3, 70), rng.integers(0, 3, 70)
        a = accumulate(ConfusionMatrix.zeros(3), t1, p1)
        b = accumulate(ConfusionMatrix.zeros(3), t2, p2)
        merged = a.merge(b)
        joint = accumulate(ConfusionMatrix.zeros(3), np.concatenate([t1, t2]), np.concatenate([p1, p2]))
        np.testing.assert_array_equal(merged.counts, joint.counts)
        s1, s2 = summarize(merged), summarize(joint)
        assert s1.global_accuracy == s2.global_accuracy
        assert s1.mean_iou == s2.mean_iou

    @settings(deadline=None, max_examples=30)
    @given(st.lists(st.integers(min_value=0, max_value=500), min_size=3, max_size=3),
           st.integers(min_value=0, max_value=2**31 - 1))
    def test_merge_associative(self, sizes, seed):
        rng = np.random.default_rng(seed)
        shards = []
        for n in sizes:
            cm = ConfusionMatrix.zeros(3)
            if n:
                accumulate(cm, rng.integers(-1, 3, n), rng.integers(-1, 3, n))
            shards.append(cm)
        a, b, c = shards
        left = a.merge(b).merge(c)
        right = a.merge(b.merge(c))
        np.testing.assert_array_equal(left.counts, right.counts)
        assert left.ignored == right.ignored
