"""Segmentation metrics: IoU / mIoU, COCO-style mask AP, and J / F / J&F.

Conventions: two empty masks have IoU 1 and boundary F 1, so a correct
"nothing here" prediction scores perfectly.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor_ops import ShapeError

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
_RECALL_POINTS = np.linspace(0.0, 1.0, 101)
_CROSS = ndimage.generate_binary_structure(2, 1)


class MetricError(ValueError):
    pass


def _pair(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], classes: Sequence[int]) -> float:
    """Per-class IoU accumulated over the whole set, averaged over classes in GT."""
    if len(preds) != len(gts):
        raise MetricError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise MetricError("empty evaluation set")
    inter = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    present = set()
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"label maps differ: {p.shape} vs {g.shape}")
        for c in classes:
            pc, gc = p == c, g == c
            if gc.any():
                present.add(c)
            inter[c] += int((pc & gc).sum())
            union[c] += int((pc | gc).sum())
    if not present:
        raise MetricError("no evaluated class appears in the ground truth")
    return float(np.mean([inter[c] / union[c] for c in classes if c in present]))


def per_class_iou(preds, gts, classes) -> dict[int, float]:
    out = {}
    for c in classes:
        try:
            out[int(c)] = miou(preds, gts, [c])
        except MetricError:
            continue
    return out


def _instances(items):
    out = []
    for it in items:
        if hasattr(it, "category"):
            out.append((int(it.category), np.asarray(it.mask, dtype=bool), float(getattr(it, "score", 1.0))))
        elif len(it) == 3:
            out.append((int(it[0]), np.asarray(it[1], dtype=bool), float(it[2])))
        else:
            out.append((int(it[0]), np.asarray(it[1], dtype=bool), 1.0))
    return out


def _ap_single(scored: list[tuple[float, bool]], num_gt: int) -> float:
    if num_gt == 0:
        return math.nan
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda k: -scored[k][0])
    tp = np.array([scored[k][1] for k in order], dtype=np.float64)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_POINTS, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


def average_precision(pred_instances, gt_instances, iou_thresholds=COCO_IOU_THRESHOLDS) -> float:
    """COCO-style mask AP.

    ``pred_instances[k]`` / ``gt_instances[k]`` list the (category, mask[, score])
    entries of image ``k``. Greedy matching by descending score, 101-point
    interpolated precision, averaged over thresholds and categories with GT.
    """
    if len(pred_instances) != len(gt_instances):
        raise MetricError(f"{len(pred_instances)} prediction lists vs {len(gt_instances)} ground-truth lists")
    preds = [_instances(p) for p in pred_instances]
    gts = [_instances(g) for g in gt_instances]
    classes = sorted({c for g in gts for c, _, _ in g})
    if not classes:
        return 0.0
    per_thr = []
    for thr in iou_thresholds:
        per_cls = []
        for c in classes:
            scored: list[tuple[float, bool]] = []
            num_gt = 0
            for p_img, g_img in zip(preds, gts):
                g_masks = [m for cc, m, _ in g_img if cc == c]
                num_gt += len(g_masks)
                taken = [False] * len(g_masks)
                dets = sorted([(s, m) for cc, m, s in p_img if cc == c], key=lambda t: -t[0])
                for s, m in dets:
                    best, best_k = thr, -1
                    for k, gm in enumerate(g_masks):
                        if taken[k]:
                            continue
                        v = iou(m, gm)
                        if v >= best:
                            best, best_k = v, k
                    if best_k >= 0:
                        taken[best_k] = True
                    scored.append((s, best_k >= 0))
            per_cls.append(_ap_single(scored, num_gt))
        per_thr.append(np.nanmean(per_cls))
    return float(np.mean(per_thr))


def default_radius(shape: tuple[int, int]) -> int:
    return max(1, math.ceil(0.0088 * math.hypot(*shape)))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _disk(r: int) -> np.ndarray:
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1]
    return ys * ys + xs * xs <= r * r


def boundary_f(a, b, tolerance_radius: int | None = None) -> float:
    a, b = _pair(a, b)
    r = default_radius(a.shape) if tolerance_radius is None else tolerance_radius
    ba, bb = boundary(a), boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    disk = _disk(r)
    da = ndimage.binary_dilation(ba, structure=disk)
    db = ndimage.binary_dilation(bb, structure=disk)
    precision = int((ba & db).sum()) / na
    recall = int((bb & da).sum()) / nb
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf_score(per_frame_preds, per_frame_gts, tolerance_radius: int | None = None) -> tuple[float, float, float]:
    """Mean J and F over every (frame, object); frame 0 must already be excluded."""
    if len(per_frame_preds) != len(per_frame_gts):
        raise MetricError(f"{len(per_frame_preds)} predicted frames vs {len(per_frame_gts)} annotated frames")
    js, fs = [], []
    for pf, gf in zip(per_frame_preds, per_frame_gts):
        if len(pf) != len(gf):
            raise MetricError(f"{len(pf)} predicted objects vs {len(gf)} annotated objects")
        for p, g in zip(pf, gf):
            js.append(iou(p, g))
            fs.append(boundary_f(p, g, tolerance_radius))
    if not js:
        raise MetricError("empty sequence")
    j, f = float(np.mean(js)), float(np.mean(fs))
    return j, f, (j + f) / 2
