"""Episodic one-shot semantic evaluation and video tracking evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Scene, Video, category_pairs
from .inference import decode_semantic
from .memory import DEFAULT_CAPACITY, DEFAULT_DECAY, track_video
from .metrics import jf_score, miou, per_class_iou
from .model import predict


@dataclass(frozen=True)
class FssEpisode:
    reference: int
    target: int
    category: int


def make_fss_episodes(scenes: list[Scene], count: int, seed: int) -> list[FssEpisode]:
    """Sample ``count`` (reference, target, shared category) triples."""
    feasible = category_pairs(scenes)
    if not feasible:
        raise ValueError("no two scenes share a category")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        i, j = feasible[int(rng.integers(len(feasible)))]
        shared = sorted(set(scenes[i].categories) & set(scenes[j].categories))
        out.append(FssEpisode(i, j, shared[int(rng.integers(len(shared)))]))
    return out


def semantic_target(scene: Scene, category: int) -> np.ndarray:
    label = np.zeros(scene.image.shape[:2], dtype=np.int64)
    for c, m in zip(scene.categories, scene.masks):
        if c == category:
            label[m] = category
    return label


def fss_predict(params, reference: Scene, target: Scene, category: int, patch: int = 4, encoder_seed: int = 0, heads: int = 1) -> np.ndarray:
    """One-shot semantic label map: the reference shows every instance of ``category``."""
    keep = [k for k, c in enumerate(reference.categories) if c == category]
    if not keep:
        raise ValueError(f"reference scene has no instance of category {category}")
    pred, grouped = predict(params, reference.example(keep), target.image, patch, encoder_seed, heads)
    return decode_semantic(pred, grouped.sem_categories, target.image.shape[:2])


def evaluate_fss(params, scenes: list[Scene], episodes: list[FssEpisode], patch: int = 4, encoder_seed: int = 0, heads: int = 1) -> dict:
    preds, gts = [], []
    for ep in episodes:
        preds.append(fss_predict(params, scenes[ep.reference], scenes[ep.target], ep.category, patch, encoder_seed, heads))
        gts.append(semantic_target(scenes[ep.target], ep.category))
    classes = sorted({ep.category for ep in episodes})
    return {
        "miou": miou(preds, gts, classes),
        "per_class_iou": {str(k): v for k, v in per_class_iou(preds, gts, classes).items()},
        "episodes": len(episodes),
    }


def evaluate_video(params, video: Video, capacity: int = DEFAULT_CAPACITY, decay: float = DEFAULT_DECAY, patch: int = 4, encoder_seed: int = 0, heads: int = 1, presence_thresh: float = 0.5) -> tuple[float, float, float]:
    result = track_video(video.frames, video.first_frame_example(), params, capacity, decay, patch, encoder_seed, presence_thresh, heads)
    return jf_score(result.masks[1:], video.masks[1:])


def evaluate_vos(params, videos: list[Video], capacity: int = DEFAULT_CAPACITY, decay: float = DEFAULT_DECAY, patch: int = 4, encoder_seed: int = 0, heads: int = 1, presence_thresh: float = 0.5) -> dict:
    """Per-video J, F and J&F, averaged over videos."""
    scores = np.array([evaluate_video(params, v, capacity, decay, patch, encoder_seed, heads, presence_thresh) for v in videos])
    j, f, jf = scores.mean(axis=0)
    return {"J": float(j), "F": float(f), "J&F": float(jf), "videos": len(videos), "capacity": capacity, "decay": decay}
