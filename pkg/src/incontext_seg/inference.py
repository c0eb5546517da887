"""Turn decoder predictions into ID, instance and semantic outputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .mformer import Prediction

PRESENCE_THRESHOLD = 0.5
SCORE_THRESHOLD = 0.05
BACKGROUND_THRESHOLD = 0.5


@dataclass
class IdOutput:
    index: int
    mask: np.ndarray
    score: float


@dataclass
class InstanceOutput:
    category: int
    mask: np.ndarray
    score: float
    query: int


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def upsample_logits(logits: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of K×h×w logits to K×H×W with half-pixel centres."""
    logits = _arr(logits)
    k, h, w = logits.shape
    hh, ww = size
    if (h, w) == (hh, ww):
        return logits.copy()

    def coords(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(hh, h)
    x0, x1, fx = coords(ww, w)
    top = logits[:, y0][:, :, x0] * (1 - fx) + logits[:, y0][:, :, x1] * fx
    bot = logits[:, y1][:, :, x0] * (1 - fx) + logits[:, y1][:, :, x1] * fx
    return top * (1 - fy)[None, :, None] + bot * fy[None, :, None]


def mask_score(prob: float, confidence: np.ndarray, mask: np.ndarray) -> float:
    """prob × mean confidence over the predicted foreground (0 when empty)."""
    if not mask.any():
        return 0.0
    return float(prob) * float(confidence[mask].mean())


def decode_id(pred: Prediction, presence_thresh: float = PRESENCE_THRESHOLD, image_size: tuple[int, int] | None = None) -> list[IdOutput]:
    presence = _arr(pred.id_presence_probs)[:, 0]
    logits = _arr(pred.id_mask_logits)
    conf = expit(upsample_logits(logits, image_size or logits.shape[1:]))
    kept = [i for i in range(len(presence)) if presence[i] >= presence_thresh]
    if not kept:
        return []
    fg = conf[kept] >= 0.5
    # pixels claimed by several queries go to the most confident one
    owner = np.argmax(np.where(fg, conf[kept], -1.0), axis=0)
    out = []
    for slot, i in enumerate(kept):
        mask = fg[slot] & (owner == slot)
        out.append(IdOutput(i, mask, mask_score(presence[i], conf[i], fg[slot])))
    return out


def decode_instances(pred: Prediction, score_thresh: float = SCORE_THRESHOLD, categories: list[int] | None = None, image_size: tuple[int, int] | None = None) -> list[InstanceOutput]:
    probs = _arr(pred.ins_class_probs)
    logits = _arr(pred.ins_mask_logits)
    conf = expit(upsample_logits(logits, image_size or logits.shape[1:]))
    m = probs.shape[1] - 1
    out = []
    for i in range(probs.shape[0]):
        c = int(np.argmax(probs[i, :m]))
        if probs[i, c] <= probs[i, m]:
            continue
        mask = conf[i] >= 0.5
        score = mask_score(probs[i, c], conf[i], mask)
        if score >= score_thresh:
            out.append(InstanceOutput(categories[c] if categories else c, mask, score, i))
    out.sort(key=lambda o: -o.score)
    return out


def semantic_scores(pred: Prediction, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """M×H×W class evidence: sum over queries of class prob × mask confidence."""
    probs = _arr(pred.ins_class_probs)[:, :-1]
    logits = _arr(pred.ins_mask_logits)
    conf = expit(upsample_logits(logits, image_size or logits.shape[1:]))
    return np.einsum("sm,shw->mhw", probs, conf)


def decode_semantic(pred: Prediction, categories: list[int], image_size: tuple[int, int] | None = None, background_thresh: float = BACKGROUND_THRESHOLD) -> np.ndarray:
    """Label map with 0 for background and ``categories[c]`` elsewhere."""
    scores = semantic_scores(pred, image_size)
    if len(categories) != scores.shape[0]:
        raise ValueError(f"{len(categories)} category ids for {scores.shape[0]} prototypes")
    best = np.argmax(scores, axis=0)
    top = np.take_along_axis(scores, best[None], axis=0)[0]
    labels = np.asarray(categories, dtype=np.int64)[best]
    return np.where(top > background_thresh, labels, 0)
