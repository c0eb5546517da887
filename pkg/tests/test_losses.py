import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incontext_seg import tensor_ops as T
from incontext_seg.losses import (
    ContractError,
    GroundTruthSet,
    LossWeights,
    bce_mask_loss,
    dice_loss,
    hungarian_loss,
    id_loss,
    loss_terms,
    pair_cost,
    total_loss,
)
from incontext_seg.matching import (
    InfeasibleAssignmentError,
    OracleSizeError,
    brute_force_match,
    hungarian_match,
)
from incontext_seg.mformer import Prediction
from incontext_seg.selftest import random_cost

HALF = np.zeros((4, 4), dtype=bool)
HALF[:2] = True


def val(t) -> float:
    return float(t.data)


def saturated(mask, value=20.0):
    return np.where(mask, value, -value)


def prediction(class_probs, ins_logits, presence, id_logits):
    return Prediction(*(T.Tensor(np.asarray(x, dtype=np.float64)) for x in (class_probs, ins_logits, presence, id_logits)))


# --- mask losses ------------------------------------------------------------


def test_bce_examples():
    assert math.isclose(val(bce_mask_loss(np.zeros((4, 4)), HALF)), math.log(2), rel_tol=1e-12)
    assert val(bce_mask_loss(saturated(HALF), HALF)) < 1e-8
    full = np.ones((3, 3), dtype=bool)
    assert abs(val(bce_mask_loss(np.full((3, 3), -20.0), full)) - 20.0) < 1e-8


def test_dice_examples():
    assert val(dice_loss(saturated(HALF), HALF)) <= 1e-6
    assert abs(val(dice_loss(saturated(~HALF), HALF)) - (1 - 1 / 17)) < 1e-6
    empty = np.zeros((4, 4), dtype=bool)
    assert val(dice_loss(saturated(empty), empty)) < 1e-6


def test_mask_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        bce_mask_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(T.ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros((3, 2)))


@given(st.integers(0, 2**31 - 1))
def test_mask_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    logits, gt = 10 * rng.standard_normal((5, 5)), rng.random((5, 5)) < 0.5
    assert val(bce_mask_loss(logits, gt)) >= 0 and val(dice_loss(logits, gt)) >= 0


# --- pair cost --------------------------------------------------------------


def test_pair_cost_examples():
    assert abs(pair_cost(np.array([1.0, 0.0]), saturated(HALF), 0, HALF) + 1.0) < 1e-6
    cost = pair_cost(np.array([0.0, 1.0]), saturated(~HALF), 0, HALF)
    assert abs(cost - (20.0 + 1 - 1 / 17)) < 1e-6
    a = pair_cost(np.array([0.3, 0.7]), np.ones((4, 4)), 0, HALF)
    assert a == pair_cost(np.array([0.3, 0.7]), np.ones((4, 4)), 0, HALF)


def test_pair_cost_rejects_no_object():
    with pytest.raises(ContractError):
        pair_cost(np.array([0.5, 0.5]), np.zeros((2, 2)), None, np.zeros((2, 2), dtype=bool))


# --- matching ---------------------------------------------------------------


def test_hungarian_examples():
    assert hungarian_match([[0, 9], [9, 0]]).sigma == (0, 1)
    a = hungarian_match([[1, 2], [3, 1]])
    assert a.sigma == (0, 1) and a.total_cost == 2
    b = hungarian_match([[5, 1, 7]])
    assert b.sigma == (1,) and b.total_cost == 1


def test_hungarian_infeasible():
    with pytest.raises(InfeasibleAssignmentError):
        hungarian_match(np.zeros((3, 2)))


def test_brute_force_examples():
    assert brute_force_match([[4.0]]).sigma == (0,)
    assert brute_force_match(np.ones((3, 5))).sigma == (0, 1, 2)
    assert hungarian_match(np.ones((3, 5))).sigma == (0, 1, 2)
    with pytest.raises(OracleSizeError):
        brute_force_match(np.zeros((8, 8)))


@settings(max_examples=200)
@given(st.integers(0, 2**31 - 1))
def test_hungarian_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cost = random_cost(rng)
    a, b = hungarian_match(cost), brute_force_match(cost)
    assert a.sigma == b.sigma and a.total_cost == b.total_cost
    assert len(set(a.sigma)) == len(a.sigma)


# --- set and ID losses ------------------------------------------------------


def test_hungarian_loss_perfect_single_object():
    gt = GroundTruthSet(instances=[(0, HALF)], ids=[])
    pred = prediction([[1.0, 0.0]], saturated(HALF)[None], np.zeros((0, 2)), np.zeros((0, 4, 4)))
    assert val(hungarian_loss(pred, gt)) <= 1e-6


def test_hungarian_loss_zero_objects_uniform():
    s = 5
    pred = prediction(np.full((s, 3), 1 / 3), np.zeros((s, 4, 4)), np.zeros((0, 2)), np.zeros((0, 4, 4)))
    assert abs(val(hungarian_loss(pred, GroundTruthSet())) - s * math.log(3)) < 1e-12


def random_case(rng, s=4, n=3, m=2, g=2):
    probs = rng.dirichlet(np.ones(m + 1), size=s)
    pred = prediction(probs, 3 * rng.standard_normal((s, 4, 4)), rng.dirichlet(np.ones(2), size=n), 3 * rng.standard_normal((n, 4, 4)))
    gt = GroundTruthSet(
        instances=[(int(rng.integers(m)), rng.random((4, 4)) < 0.5) for _ in range(g)],
        ids=[(True, rng.random((4, 4)) < 0.5), (False, None), (True, rng.random((4, 4)) < 0.5)][:n],
    )
    return pred, gt


@given(st.integers(0, 2**31 - 1))
def test_hungarian_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_case(rng)
    perm = rng.permutation(4)
    shuffled = prediction(pred.ins_class_probs.data[perm], pred.ins_mask_logits.data[perm], pred.id_presence_probs.data, pred.id_mask_logits.data)
    assert abs(val(hungarian_loss(pred, gt)) - val(hungarian_loss(shuffled, gt))) <= 1e-12


def test_hungarian_loss_too_many_objects():
    pred = prediction([[0.5, 0.5]], np.zeros((1, 4, 4)), np.zeros((0, 2)), np.zeros((0, 4, 4)))
    with pytest.raises(ContractError):
        hungarian_loss(pred, GroundTruthSet(instances=[(0, HALF), (0, ~HALF)]))


def test_id_loss_examples():
    present = prediction(np.zeros((1, 2)), np.zeros((1, 4, 4)), [[1.0, 0.0]], saturated(HALF)[None])
    assert val(id_loss(present, GroundTruthSet(ids=[(True, HALF)]))) <= 1e-6
    absent = prediction(np.zeros((1, 2)), np.zeros((1, 4, 4)), [[0.5, 0.5]], np.zeros((1, 4, 4)))
    assert abs(val(id_loss(absent, GroundTruthSet(ids=[(False, None)]))) - math.log(2)) < 1e-12
    with pytest.raises(ContractError):
        id_loss(absent, GroundTruthSet(ids=[]))


def test_id_loss_is_not_permutation_invariant():
    gt = GroundTruthSet(ids=[(True, HALF), (True, ~HALF)])
    logits = np.stack([saturated(HALF), saturated(~HALF)])
    presence = [[0.9, 0.1], [0.9, 0.1]]
    straight = prediction(np.zeros((1, 2)), np.zeros((1, 4, 4)), presence, logits)
    swapped = prediction(np.zeros((1, 2)), np.zeros((1, 4, 4)), presence, logits[::-1])
    assert val(id_loss(swapped, gt)) > val(id_loss(straight, gt)) + 10


def test_total_loss_is_sum():
    rng = np.random.default_rng(0)
    pred, gt = random_case(rng)
    total, lh, li = loss_terms(pred, gt)
    assert val(total) == val(hungarian_loss(pred, gt)) + val(id_loss(pred, gt))
    assert val(total_loss(pred, gt)) == val(total) and val(lh) > 0 and val(li) > 0
    weighted = total_loss(pred, gt, LossWeights(hungarian=0.0))
    assert val(weighted) == val(id_loss(pred, gt))


def test_total_loss_zero_when_perfect():
    pred = prediction([[1.0, 0.0]], saturated(HALF)[None], [[1.0, 0.0]], saturated(HALF)[None])
    gt = GroundTruthSet(instances=[(0, HALF)], ids=[(True, HALF)])
    assert val(total_loss(pred, gt)) <= 2e-6


@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_case(rng)
    cls_logits = rng.standard_normal((4, 3))
    pres_logits = rng.standard_normal((3, 2))
    ins, idm = pred.ins_mask_logits.data, pred.id_mask_logits.data

    def f(c, p, a, b):
        return total_loss(Prediction(T.softmax(c, axis=-1), T.as_tensor(a), T.softmax(p, axis=-1), T.as_tensor(b)), gt)

    arrays = (cls_logits, pres_logits, ins, idm)
    params = [T.Tensor(x.copy(), requires_grad=True) for x in arrays]
    f(*params).backward()
    sizes = np.cumsum([0] + [x.size for x in arrays])

    def flat_f(v):
        return val(f(*(v[a:b].reshape(x.shape) for a, b, x in zip(sizes[:-1], sizes[1:], arrays))))

    numeric = T.finite_diff_grad(flat_f, np.concatenate([x.reshape(-1) for x in arrays]), eps=1e-6)
    analytic = np.concatenate([x.grad.reshape(-1) for x in params])
    assert np.isfinite(numeric).all()
    assert np.abs(analytic - numeric).max() <= 1e-5 * max(1.0, np.abs(numeric).max())
