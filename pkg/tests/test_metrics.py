import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffseg.metrics import MetricReport, dice, evaluate, iou

mask_pairs = st.integers(2, 12).flatmap(
    lambda n: st.tuples(arrays(np.uint8, (n, n), elements=st.integers(0, 1)),
                        arrays(np.uint8, (n, n), elements=st.integers(0, 1))))


def test_identical_nonempty():
    m = np.array([[1, 0], [1, 1]])
    assert dice(m, m) == 1.0
    assert iou(m, m) == 1.0


def test_disjoint_nonempty():
    a = np.array([1, 1, 0, 0])
    b = np.array([0, 0, 1, 1])
    assert dice(a, b) == 0.0
    assert iou(a, b) == 0.0


def test_counting_case():
    # gt has 100 pixels; pred covers half of them plus 50 false positives
    gt = np.zeros(300, dtype=np.uint8)
    gt[:100] = 1
    pred = np.zeros(300, dtype=np.uint8)
    pred[:50] = 1
    pred[100:150] = 1
    assert dice(pred, gt) == pytest.approx(2 * 50 / (100 + 100))
    assert iou(pred, gt) == pytest.approx(50 / 150)


def test_empty_empty_convention():
    z = np.zeros((3, 3))
    assert dice(z, z) == 1.0
    assert iou(z, z) == 1.0
    assert dice(z, z, empty_value=0.0) == 0.0
    assert iou(z, z, empty_value=0.0) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        iou(np.zeros(3), np.zeros(4))


@settings(max_examples=200)
@given(mask_pairs)
def test_dice_iou_identity(pair):
    a, b = pair
    d, j = dice(a, b), iou(a, b)
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert j <= d + 1e-15


@settings(max_examples=100)
@given(mask_pairs)
def test_symmetry(pair):
    a, b = pair
    assert dice(a, b) == dice(b, a)
    assert iou(a, b) == iou(b, a)


def test_evaluate_report(tmp_path):
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[1, 0], [0, 0]])
    rep = evaluate([("s0", a, a), ("s1", a, b)])
    assert rep.count == 2
    assert rep.per_sample[0][1] == 1.0
    assert rep.mean_dice == pytest.approx((1.0 + dice(a, b)) / 2)
    rep.to_json(tmp_path / "r.json")
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.json").exists()
    assert "mean" in (tmp_path / "r.csv").read_text()
