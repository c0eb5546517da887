"""Reference-to-target interaction: mask grouping, mask pooling and fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .layers import attend, feed_forward, norm, weights_of
from .params import ConfigurationError
from .tensor_ops import ShapeError


class AnnotationError(ValueError):
    pass


@dataclass
class InContextExample:
    """Reference image with one binary mask and one category id per instance."""

    image: np.ndarray
    masks: np.ndarray
    categories: list[int]
    allow_overlap: bool = False

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim == 2:
            self.masks = self.masks[None]
        self.categories = [int(c) for c in self.categories]
        if len(self.categories) < 1 or self.masks.shape[0] != len(self.categories):
            raise AnnotationError(f"{self.masks.shape[0]} masks but {len(self.categories)} categories")
        if self.masks.shape[1:] != np.shape(self.image)[:2]:
            raise ShapeError(f"mask size {self.masks.shape[1:]} != image size {np.shape(self.image)[:2]}")
        if not self.masks.reshape(len(self.categories), -1).any(axis=1).all():
            raise AnnotationError("every reference mask must be non-empty")
        if not self.allow_overlap and (self.masks.sum(axis=0) > 1).any():
            raise AnnotationError("reference masks overlap")

    @property
    def num_instances(self) -> int:
        return len(self.categories)


@dataclass
class GroupedMasks:
    id_masks: np.ndarray
    sem_masks: np.ndarray
    sem_categories: list[int]
    id_empty: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.id_empty is None:
            self.id_empty = ~self.id_masks.reshape(len(self.id_masks), -1).any(axis=1)


@dataclass
class TokenSet:
    tokens: np.ndarray
    kind: str
    empty: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


def downsample_mask(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-cell majority vote; ties count as foreground."""
    mask = np.asarray(mask, dtype=bool)
    hh, ww = mask.shape
    h, w_ = grid
    if hh % h or ww % w_:
        raise ShapeError(f"mask {hh}×{ww} does not tile a {h}×{w_} grid")
    ph, pw = hh // h, ww // w_
    counts = mask.reshape(h, ph, w_, pw).sum(axis=(1, 3))
    return 2 * counts >= ph * pw


def group_masks(ex: InContextExample, feature_grid: tuple[int, int]) -> GroupedMasks:
    id_masks = np.stack([downsample_mask(m, feature_grid) for m in ex.masks])
    cats = sorted(set(ex.categories))
    sem = np.stack([id_masks[[c == k for c in ex.categories]].any(axis=0) for k in cats])
    return GroupedMasks(id_masks, sem, cats)


def mask_pool(features: np.ndarray, masks: np.ndarray, kind: str = "id") -> TokenSet:
    """Average the C-vectors of ``features`` under each mask; empty masks give zeros."""
    feats = np.asarray(features, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim == 2:
        masks = masks[None]
    c = feats.shape[0]
    if masks.shape[1:] != feats.shape[1:]:
        raise ShapeError(f"mask grid {masks.shape[1:]} != feature grid {feats.shape[1:]}")
    flat_m = masks.reshape(masks.shape[0], -1).astype(np.float64)
    counts = flat_m.sum(axis=1)
    sums = flat_m @ feats.reshape(c, -1).T
    empty = counts == 0
    tokens = sums / np.where(empty, 1.0, counts)[:, None]
    return TokenSet(tokens, kind, empty)


def _fusion_block_count(params) -> int:
    n = 0
    while f"fusion.{n}.ln_self.g" in params:
        n += 1
    if n == 0:
        raise ConfigurationError("in-context fusion parameters are not initialised")
    return n


def fuse(t_id, t_sem, target_tokens, params, heads: int = 1):
    """Fusion on flattened inputs. ``target_tokens`` is (H*W)×C.

    Returns (q_id N×C, p_sem M×C, enhanced target (H*W)×C) as Tensors.
    """
    params = weights_of(params)
    n = np.shape(t_id.data if isinstance(t_id, T.Tensor) else t_id)[0]
    tok = T.concat([t_id, t_sem], axis=0)
    feat = T.as_tensor(target_tokens)
    for b in range(_fusion_block_count(params)):
        p = f"fusion.{b}"
        x = norm(params, f"{p}.ln_self", tok)
        tok = tok + attend(params, f"{p}.self", x, x, x, heads=heads)
        tn = norm(params, f"{p}.ln_tok", tok)
        fn = norm(params, f"{p}.ln_feat", feat)
        # one set of cross-attention weights, used in both directions
        tok = tok + attend(params, f"{p}.cross", tn, fn, fn, heads=heads)
        feat = feat + attend(params, f"{p}.cross", fn, tn, tn, heads=heads)
        tok = tok + feed_forward(params, f"{p}.ffn", norm(params, f"{p}.ln_ffn", tok))
        feat = feat + feed_forward(params, f"{p}.ffn", norm(params, f"{p}.ln_ffn", feat))
    m = tok.shape[0] - n
    return T.rows(tok, 0, n), T.rows(tok, n, n + m), feat


def feature_tokens(features: np.ndarray) -> np.ndarray:
    """C×H×W -> (H*W)×C."""
    c = features.shape[0]
    return np.ascontiguousarray(np.asarray(features, dtype=np.float64).reshape(c, -1).T)


def in_context_fusion(t_id: TokenSet, t_sem: TokenSet, target_features: np.ndarray, params, heads: int = 1):
    """Returns (q_id, p_sem, enhanced target feature map C×H×W) as arrays."""
    c, h, w_ = np.shape(target_features)
    if t_id.tokens.shape[1] != c or t_sem.tokens.shape[1] != c:
        raise ShapeError(f"token width {t_id.tokens.shape[1]}/{t_sem.tokens.shape[1]} != feature channels {c}")
    q_id, p_sem, feat = fuse(t_id.tokens, t_sem.tokens, feature_tokens(target_features), params, heads)
    return q_id.data, p_sem.data, np.ascontiguousarray(feat.data.T.reshape(c, h, w_))
