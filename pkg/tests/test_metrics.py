import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import square_mask
from incontext_seg.metrics import (
    MetricError,
    average_precision,
    boundary,
    boundary_f,
    default_radius,
    iou,
    jf_score,
    miou,
)
from incontext_seg.tensor_ops import ShapeError

masks = hnp.arrays(np.bool_, (8, 8))


def test_iou_examples():
    a = square_mask(8, 0, 0, 4)
    assert iou(a, a) == 1.0 and iou(a, square_mask(8, 4, 4, 4)) == 0.0
    half = a.copy()
    half[2:] = False
    assert iou(half, a) == 0.5
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ShapeError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_miou_examples():
    gt = np.zeros((4, 4), dtype=int)
    gt[:2] = 1
    gt[2:] = 2
    assert miou([gt], [gt], [1, 2]) == 1.0
    assert miou([np.zeros_like(gt)], [gt], [1, 2]) == 0.0
    assert miou([np.where(gt == 1, 1, 0)], [gt], [1, 2]) == 0.5
    with pytest.raises(MetricError):
        miou([], [], [1])


def test_miou_order_invariant():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 3, size=(5, 5)) for _ in range(4)]
    gts = [rng.integers(0, 3, size=(5, 5)) for _ in range(4)]
    perm = [3, 1, 0, 2]
    assert miou(preds, gts, [1, 2]) == miou([preds[k] for k in perm], [gts[k] for k in perm], [1, 2])


def test_ap_examples():
    m = square_mask(8, 0, 0, 4)
    other = square_mask(8, 4, 4, 4)
    assert average_precision([[(1, m, 0.9)]], [[(1, m)]]) == 1.0
    assert average_precision([[]], [[(1, m)]]) == 0.0
    fp_first = [[(1, other, 0.9), (1, m, 0.8)]]
    tp_first = [[(1, m, 0.9), (1, other, 0.8)]]
    assert abs(average_precision(fp_first, [[(1, m)]], (0.5,)) - 0.5) < 1e-12
    assert average_precision(tp_first, [[(1, m)]], (0.5,)) == 1.0


@given(st.integers(0, 2**31 - 1))
def test_ap_monotone_score_invariance(seed):
    rng = np.random.default_rng(seed)
    gts = [[(int(rng.integers(1, 3)), rng.random((6, 6)) < 0.5) for _ in range(2)] for _ in range(2)]
    preds = [[(int(rng.integers(1, 3)), rng.random((6, 6)) < 0.5, float(rng.random())) for _ in range(3)] for _ in range(2)]
    rescaled = [[(c, m, 3.0 * s**2 + 1.0) for c, m, s in img] for img in preds]
    assert average_precision(preds, gts) == average_precision(rescaled, gts)


def test_boundary_examples():
    a = square_mask(16, 2, 2, 8)
    assert boundary_f(a, a) == 1.0
    assert boundary_f(square_mask(64, 0, 0, 3), square_mask(64, 50, 50, 3), tolerance_radius=1) == 0.0
    assert boundary_f(a, square_mask(16, 2, 3, 8), tolerance_radius=1) == 1.0
    assert boundary_f(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_boundary_is_four_connected_contour():
    b = boundary(square_mask(6, 1, 1, 4))
    assert b.sum() == 12 and not b[2:4, 2:4].any()


def test_default_radius():
    assert default_radius((64, 64)) == 1 and default_radius((480, 854)) == 9


@given(masks, masks)
def test_metrics_bounded_and_symmetric(a, b):
    assert 0.0 <= iou(a, b) <= 1.0 and iou(a, b) == iou(b, a)
    f = boundary_f(a, b, 1)
    assert 0.0 <= f <= 1.0 and f == boundary_f(b, a, 1)


def test_jf_examples():
    a, b = square_mask(16, 2, 2, 6), square_mask(16, 8, 8, 6)
    assert jf_score([[a, b]], [[a, b]]) == (1.0, 1.0, 1.0)
    empty = np.zeros((16, 16), dtype=bool)
    assert jf_score([[empty]], [[a]]) == (0.0, 0.0, 0.0)
    j, f, jf = jf_score([[a], [square_mask(16, 3, 3, 6)]], [[a], [a]])
    assert jf == (j + f) / 2
    with pytest.raises(MetricError):
        jf_score([], [])
