"""End-to-end forward pass: pooling, fusion, decoder."""
from __future__ import annotations

import numpy as np

from . import tensor_ops as T
from .encoder import encode_stub
from .interaction import GroupedMasks, InContextExample, feature_tokens, fuse, group_masks, mask_pool
from .layers import weights_of
from .mformer import Prediction, m_former_forward


def forward(params, ref_features: np.ndarray, grouped: GroupedMasks, target_features: np.ndarray, heads: int = 1, id_tokens: np.ndarray | None = None) -> list[Prediction]:
    """All per-layer predictions for one reference/target pair.

    ``id_tokens`` replaces the ID tokens pooled from the reference (the video
    tracker passes memory-averaged tokens here).
    """
    weights = weights_of(params)
    c, h, w_ = target_features.shape
    t_id = mask_pool(ref_features, grouped.id_masks).tokens if id_tokens is None else np.asarray(id_tokens)
    t_sem = mask_pool(ref_features, grouped.sem_masks, kind="semantic").tokens
    q_id, p_sem, feat = fuse(t_id, t_sem, feature_tokens(target_features), weights, heads)
    feat_map = T.reshape(T.transpose(feat), (c, h, w_))
    _, preds = m_former_forward(q_id, weights["queries.ins"], p_sem, feat_map, weights, heads=heads)
    return preds


def predict(params, ref: InContextExample, target_image: np.ndarray, patch: int = 4, encoder_seed: int = 0, heads: int = 1) -> tuple[Prediction, GroupedMasks]:
    """Encode both images with the stub encoder and return the final prediction."""
    c = (params.dims.channels if hasattr(params, "dims") else weights_of(params)["queries.ins"].shape[1])
    f_r = encode_stub(ref.image, patch, c, encoder_seed)
    f_t = encode_stub(target_image, patch, c, encoder_seed)
    grouped = group_masks(ref, f_r.shape[1:])
    return forward(params, f_r, grouped, f_t, heads)[-1].detach(), grouped
