"""Set-prediction training objective.

Instance predictions are matched to ground truth by minimum-cost assignment
(cost uses the class probability itself, the loss uses its log). ID
predictions are supervised index-by-index with no search.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import tensor_ops as T
from .matching import Assignment, hungarian_match
from .mformer import Prediction
from .tensor_ops import ShapeError

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1.0


class ContractError(ValueError):
    pass


@dataclass
class GroundTruthSet:
    """``instances``: (prototype index, mask) per target object of a referenced
    category. ``ids``: one (present, mask-or-None) per reference instance."""

    instances: list[tuple[int, np.ndarray]] = field(default_factory=list)
    ids: list[tuple[bool, np.ndarray | None]] = field(default_factory=list)

    def instance_masks(self) -> np.ndarray:
        return np.stack([np.asarray(m, dtype=np.float64) for _, m in self.instances])


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    no_object: float = 1.0
    hungarian: float = 1.0
    id: float = 1.0


def _logits(x) -> T.Tensor:
    return T.as_tensor(x)


def bce_mask_loss(logits, gt) -> T.Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a binary mask."""
    logits = _logits(logits)
    gt = np.asarray(gt, dtype=np.float64)
    if logits.shape != gt.shape:
        raise ShapeError(f"mask logits {logits.shape} vs ground truth {gt.shape}")
    return T.mean_all(T.bce_with_logits(logits, gt))


def dice_loss(logits, gt, smooth: float = DICE_SMOOTH) -> T.Tensor:
    logits = _logits(logits)
    gt = np.asarray(gt, dtype=np.float64)
    if logits.shape != gt.shape:
        raise ShapeError(f"mask logits {logits.shape} vs ground truth {gt.shape}")
    p = T.sigmoid(logits)
    num = T.scale(T.sum_all(T.mul(p, gt)), 2.0) + smooth
    den = T.sum_all(p) + (float(gt.sum()) + smooth)
    return 1.0 - T.div(num, den)


def mask_loss(logits, gt, weights: LossWeights = LossWeights()) -> T.Tensor:
    return T.scale(bce_mask_loss(logits, gt), weights.bce) + T.scale(dice_loss(logits, gt), weights.dice)


def pair_cost(class_probs: np.ndarray, mask_logits: np.ndarray, category: int | None, gt_mask: np.ndarray, weights: LossWeights = LossWeights()) -> float:
    """Matching cost of one prediction against one real ground-truth object."""
    if category is None:
        raise ContractError("matching cost is only defined for real (non-empty-class) targets")
    bce = float(bce_mask_loss(np.asarray(mask_logits), gt_mask).data)
    dice = float(dice_loss(np.asarray(mask_logits), gt_mask).data)
    return -float(np.asarray(class_probs)[category]) + weights.bce * bce + weights.dice * dice


def cost_matrix(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> np.ndarray:
    """G×S matrix of pair costs, vectorised over all pairs."""
    probs = pred.ins_class_probs.data
    s = probs.shape[0]
    g = len(gt.instances)
    if g == 0:
        return np.zeros((0, s))
    logits = pred.ins_mask_logits.data.reshape(s, -1)
    masks = gt.instance_masks().reshape(g, -1)
    if masks.shape[1] != logits.shape[1]:
        raise ShapeError(f"ground-truth grid {gt.instances[0][1].shape} vs prediction grid {pred.grid}")
    cells = logits.shape[1]
    soft = np.logaddexp(0.0, logits).sum(axis=1)
    bce = (soft[None, :] - masks @ logits.T) / cells
    p = expit(logits)
    dice = 1.0 - (2.0 * (masks @ p.T) + DICE_SMOOTH) / (p.sum(axis=1)[None, :] + masks.sum(axis=1)[:, None] + DICE_SMOOTH)
    cls = np.array([c for c, _ in gt.instances])
    return -probs[:, cls].T + weights.bce * bce + weights.dice * dice


def _batched_mask_loss(logits: T.Tensor, masks: np.ndarray, weights: LossWeights) -> T.Tensor:
    """Sum over rows of (bce + dice) for K×P logits against K×P masks."""
    k, cells = masks.shape
    bce = T.scale(T.sum_all(T.bce_with_logits(logits, masks)), weights.bce / cells)
    p = T.sigmoid(logits)
    num = T.scale(T.sum_axis(T.mul(p, masks), 1), 2.0) + DICE_SMOOTH
    den = T.sum_axis(p, 1) + (masks.sum(axis=1) + DICE_SMOOTH)
    dice = T.scale(float(k) - T.sum_all(T.div(num, den)), weights.dice)
    return bce + dice


def match(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> Assignment:
    s = pred.ins_class_probs.shape[0]
    if len(gt.instances) > s:
        raise ContractError(f"{len(gt.instances)} ground-truth instances exceed {s} instance queries")
    return hungarian_match(cost_matrix(pred, gt, weights))


def hungarian_loss(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> T.Tensor:
    assignment = match(pred, gt, weights)
    probs = pred.ins_class_probs
    s, n_cls = probs.shape
    sigma = list(assignment.sigma)
    unmatched = [i for i in range(s) if i not in set(sigma)]
    terms = []
    if sigma:
        cls = [c for c, _ in gt.instances]
        terms.append(-T.sum_all(T.log_floor(T.pick(probs, (np.array(sigma), np.array(cls))), PROB_FLOOR)))
        logits = T.reshape(T.take_rows(pred.ins_mask_logits, sigma), (len(sigma), -1))
        terms.append(_batched_mask_loss(logits, gt.instance_masks().reshape(len(sigma), -1), weights))
    if unmatched:
        empty = T.pick(probs, (np.array(unmatched), np.full(len(unmatched), n_cls - 1)))
        terms.append(T.scale(T.sum_all(T.log_floor(empty, PROB_FLOOR)), -weights.no_object))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def id_loss(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> T.Tensor:
    probs = pred.id_presence_probs
    n = probs.shape[0]
    if len(gt.ids) != n:
        raise ContractError(f"{n} ID predictions but {len(gt.ids)} ID targets")
    present = [i for i, (p, _) in enumerate(gt.ids) if p]
    cols = np.array([0 if p else 1 for p, _ in gt.ids])
    total = -T.sum_all(T.log_floor(T.pick(probs, (np.arange(n), cols)), PROB_FLOOR))
    if present:
        logits = T.reshape(T.take_rows(pred.id_mask_logits, present), (len(present), -1))
        masks = np.stack([np.asarray(gt.ids[i][1], dtype=np.float64).reshape(-1) for i in present])
        total = total + _batched_mask_loss(logits, masks, weights)
    return total


def loss_terms(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """(total, hungarian, id)."""
    lh = hungarian_loss(pred, gt, weights)
    li = id_loss(pred, gt, weights)
    total = T.scale(lh, weights.hungarian) + T.scale(li, weights.id)
    return total, lh, li


def total_loss(pred: Prediction, gt: GroundTruthSet, weights: LossWeights = LossWeights()) -> T.Tensor:
    return loss_terms(pred, gt, weights)[0]
