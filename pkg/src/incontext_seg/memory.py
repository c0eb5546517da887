"""Per-object memory banks and semi-supervised video tracking.

Each object keeps a pinned first-frame entry plus up to ``capacity - 1``
intermediate predictions. When a bank overflows, the non-pinned entry with the
lowest time-decayed score ``raw * decay ** (now - frame)`` is evicted, the
older entry losing ties.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .encoder import encode_stub
from .inference import decode_id
from .interaction import InContextExample, downsample_mask, group_masks, mask_pool
from .model import forward

DEFAULT_CAPACITY = 6
DEFAULT_DECAY = 0.99


class ProtocolError(RuntimeError):
    pass


@dataclass
class MemoryEntry:
    features: np.ndarray
    mask: np.ndarray
    raw_score: float
    frame: int
    pinned: bool = False


@dataclass
class MemoryBank:
    object_id: int
    capacity: int = DEFAULT_CAPACITY
    decay: float = DEFAULT_DECAY
    entries: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"memory capacity must be >= 1, got {self.capacity}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")

    @property
    def last_frame(self) -> int | None:
        return max((e.frame for e in self.entries), default=None)

    def decayed_scores(self, now: int) -> list[float]:
        return [e.raw_score * self.decay ** (now - e.frame) for e in self.entries]

    def frames(self) -> list[int]:
        return [e.frame for e in self.entries]


def score_prediction(presence_prob: float, mask_logits: np.ndarray) -> float:
    """p(present) × mean sigmoid confidence over the predicted foreground."""
    conf = expit(np.asarray(mask_logits, dtype=np.float64))
    fg = conf >= 0.5
    if not fg.any():
        return 0.0
    return float(presence_prob) * float(conf[fg].mean())


def update_memory(bank: MemoryBank, features: np.ndarray, mask: np.ndarray, raw_score: float, frame_idx: int) -> MemoryBank:
    """Offer a frame to the bank. The first entry ever stored is the pinned reference."""
    last = bank.last_frame
    if last is not None and frame_idx <= last:
        raise ProtocolError(f"frame {frame_idx} offered after frame {last}; frames must strictly increase")
    if not bank.entries:
        bank.entries.append(MemoryEntry(features, np.asarray(mask, dtype=bool), 1.0, frame_idx, pinned=True))
        return bank
    bank.entries.append(MemoryEntry(features, np.asarray(mask, dtype=bool), float(raw_score), frame_idx))
    if len(bank.entries) > bank.capacity:
        scores = bank.decayed_scores(frame_idx)
        victims = [k for k, e in enumerate(bank.entries) if not e.pinned]
        victim = min(victims, key=lambda k: (scores[k], bank.entries[k].frame))
        del bank.entries[victim]
    return bank


def memory_token(bank: MemoryBank) -> np.ndarray:
    """Arithmetic mean of the ID tokens pooled from every usable entry."""
    tokens = []
    for e in bank.entries:
        pooled = mask_pool(e.features, e.mask)
        if not pooled.empty[0]:
            tokens.append(pooled.tokens[0])
    if not tokens:  # reference masks are never empty after validation, but guard anyway
        tokens = [mask_pool(bank.entries[0].features, bank.entries[0].mask).tokens[0]]
    acc = np.zeros_like(tokens[0])
    for t in tokens:
        acc = acc + t
    return acc / len(tokens)


@dataclass
class TrackResult:
    masks: list[list[np.ndarray]]  # masks[t][obj], image resolution
    scores: list[list[float]]  # scores[t][obj]; frame 0 is the annotation (1.0)
    banks: list[MemoryBank]


def track_video(frames: list[np.ndarray], annotation: InContextExample, params, capacity: int = DEFAULT_CAPACITY, decay: float = DEFAULT_DECAY, patch: int = 4, encoder_seed: int = 0, presence_thresh: float = 0.5, heads: int = 1) -> TrackResult:
    if not frames:
        raise ProtocolError("video has no frames")
    if annotation is None or annotation.num_instances == 0:
        raise ProtocolError("first-frame annotation is empty")
    channels = params.dims.channels
    size = frames[0].shape[:2]
    feats0 = encode_stub(frames[0], patch, channels, encoder_seed)
    grid = feats0.shape[1:]
    grouped = group_masks(annotation, grid)
    banks = [MemoryBank(i, capacity, decay) for i in range(annotation.num_instances)]
    for i, bank in enumerate(banks):
        update_memory(bank, feats0, grouped.id_masks[i], 1.0, 0)
    masks = [[m.copy() for m in annotation.masks]]
    scores = [[1.0] * annotation.num_instances]
    for t in range(1, len(frames)):
        feats = encode_stub(frames[t], patch, channels, encoder_seed)
        id_tokens = np.stack([memory_token(b) for b in banks])
        pred = forward(params, feats0, grouped, feats, heads, id_tokens=id_tokens)[-1]
        decoded = {o.index: o.mask for o in decode_id(pred, presence_thresh, size)}
        presence = pred.id_presence_probs.data[:, 0]
        frame_masks, frame_scores = [], []
        for i, bank in enumerate(banks):
            m = decoded.get(i, np.zeros(size, dtype=bool))
            s = score_prediction(presence[i], pred.id_mask_logits.data[i])
            update_memory(bank, feats, downsample_mask(m, grid), s, t)
            frame_masks.append(m)
            frame_scores.append(s)
        masks.append(frame_masks)
        scores.append(frame_scores)
    return TrackResult(masks, scores, banks)
