import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stconv.metrics import MetricsRecord, binarize, binarize_and_score, mean_iou, score_masks


def _logits(mask):
    return np.where(np.asarray(mask, bool), 5.0, -5.0)


def test_identical_masks():
    m = np.zeros((1, 1, 2, 3, 3))
    m[0, 0, 1, 1:, 1:] = 1
    r = binarize_and_score(_logits(m), m)
    assert r.iou == 1.0 and r.f1 == 1.0


def test_disjoint_masks():
    a = np.zeros((1, 1, 1, 2, 2))
    b = np.zeros_like(a)
    a[..., 0, 0] = 1
    b[..., 1, 1] = 1
    assert binarize_and_score(_logits(a), b).iou == 0.0


def test_hand_confusion_matrix():
    pred = np.array([1, 1, 1, 0, 0]).reshape(1, 1, 1, 1, 5)
    truth = np.array([1, 0, 0, 1, 0]).reshape(1, 1, 1, 1, 5)
    r = binarize_and_score(_logits(pred), truth)
    assert (r.tp, r.fp, r.fn, r.tn) == (1, 2, 1, 1)
    assert r.iou == pytest.approx(1 / 4)
    assert r.precision == pytest.approx(1 / 3)
    assert r.recall == pytest.approx(1 / 2)


def test_empty_mask_conventions():
    r = score_masks(np.zeros((1, 1, 1, 2, 2)), np.zeros((1, 1, 1, 2, 2)))
    assert (r.precision, r.recall, r.f1, r.iou) == (0.0, 0.0, 0.0, 1.0)


def test_threshold_uses_probability():
    z = np.array([0.0, 0.5, -0.1]).reshape(1, 1, 1, 1, 3)
    np.testing.assert_array_equal(binarize(z, 0.5).ravel(), [True, True, False])
    np.testing.assert_array_equal(binarize(z, 0.6).ravel(), [False, True, False])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_iou_at_most_f1_at_most_one(tp, fp, fn, tn):
    r = MetricsRecord(tp, fp, fn, tn)
    if tp + fp + fn:
        assert r.iou <= r.f1 + 1e-15
    assert 0 <= r.f1 <= 1 and 0 <= r.iou <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_recall_never_grows_with_threshold(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1, 1, 4, 5, 5)) * 2
    truth = rng.random(z.shape) < 0.4
    recalls = [binarize_and_score(z, truth, t).recall for t in np.linspace(0.05, 0.95, 10)]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


def test_records_add_and_mean_iou():
    a, b = MetricsRecord(1, 1, 0, 2), MetricsRecord(3, 0, 1, 0)
    assert a + b == MetricsRecord(4, 1, 1, 2)
    assert mean_iou([a, b]) == pytest.approx((0.5 + 0.75) / 2)
    with pytest.raises(ValueError):
        mean_iou([])
