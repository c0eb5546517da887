"""Dual-path matching decoder and its prediction heads.

Query layout inside the shared self-attention is ``[q_id | q_ins | p_sem]``.
ID queries see only ID queries, instance queries see instance queries and
prototypes, prototypes see only prototypes. Prototypes never look at the
target feature; they are refined by their own feed-forward path and then act
as the instance classifier.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_ops as T
from .layers import attend, feed_forward, norm, w, weights_of
from .params import ConfigurationError
from .tensor_ops import AdditiveMask, ShapeError


@dataclass
class QueryState:
    q_id: T.Tensor
    q_ins: T.Tensor
    p_sem: T.Tensor
    layer: int = 0

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.q_id.shape[0], self.q_ins.shape[0], self.p_sem.shape[0]


@dataclass
class Prediction:
    """Per-layer decoder output. Masks are logits on the feature grid."""

    ins_class_probs: T.Tensor  # S×(M+1), last column is no-object
    ins_mask_logits: T.Tensor  # S×H×W
    id_presence_probs: T.Tensor  # N×2, columns (present, no-object)
    id_mask_logits: T.Tensor  # N×H×W

    @property
    def grid(self) -> tuple[int, int]:
        return self.ins_mask_logits.shape[1:]

    def detach(self) -> "Prediction":
        return Prediction(*(T.Tensor(t.data) for t in (self.ins_class_probs, self.ins_mask_logits, self.id_presence_probs, self.id_mask_logits)))


def build_attention_mask(n: int, s: int, m: int) -> AdditiveMask:
    total = n + s + m
    allowed = np.zeros((total, total), dtype=bool)
    allowed[:n, :n] = True
    allowed[n : n + s, n:] = True
    allowed[n + s :, n + s :] = True
    return AdditiveMask(allowed)


def sine_position_grid(channels: int, h: int, w_: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code, (h*w)×channels; half the channels per axis."""
    half = channels // 2
    out = np.zeros((h, w_, channels))
    ys, xs = np.meshgrid(np.arange(h) / max(h, 1), np.arange(w_) / max(w_, 1), indexing="ij")
    for axis_off, coord, width in ((0, ys, half), (half, xs, channels - half)):
        for j in range(width):
            freq = 2.0 * math.pi * (2.0 ** (j // 2))
            out[:, :, axis_off + j] = np.sin(freq * coord) if j % 2 == 0 else np.cos(freq * coord)
    return out.reshape(h * w_, channels)


def _as_tokens(features) -> T.Tensor:
    if isinstance(features, T.Tensor):
        if features.data.ndim == 2:
            return features
        c = features.shape[0]
        return T.transpose(T.reshape(features, (c, -1)))
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim == 3:
        return T.Tensor(np.ascontiguousarray(arr.reshape(arr.shape[0], -1).T))
    return T.Tensor(arr)


def foreground_mask(prev_mask_logits) -> AdditiveMask | None:
    """Rows allow cells whose previous logit is >= 0; empty rows allow everything."""
    if prev_mask_logits is None:
        return None
    logits = prev_mask_logits.data if isinstance(prev_mask_logits, T.Tensor) else np.asarray(prev_mask_logits)
    allowed = logits.reshape(logits.shape[0], -1) >= 0.0
    allowed[~allowed.any(axis=1)] = True
    return AdditiveMask(allowed)


def masked_cross_attention(queries, features, prev_mask_logits, params, prefix: str = "mformer.0", pos: np.ndarray | None = None, heads: int = 1):
    """Residual cross-attention of queries onto target cells, restricted to each
    query's previous foreground."""
    params = weights_of(params)
    feats = _as_tokens(features)
    if prev_mask_logits is not None:
        k = np.shape(prev_mask_logits.data if isinstance(prev_mask_logits, T.Tensor) else prev_mask_logits)
        if k[0] != queries.shape[0] or int(np.prod(k[1:])) != feats.shape[0]:
            raise ShapeError(f"previous masks {k} do not match {queries.shape[0]} queries on {feats.shape[0]} cells")
    keys = feats if pos is None else T.add(feats, pos)
    x = norm(params, f"{prefix}.ln_cross", queries)
    return queries + attend(params, f"{prefix}.cross", x, keys, feats, mask=foreground_mask(prev_mask_logits), heads=heads)


def m_former_block(state: QueryState, features, prev_pred: Prediction | None, params, layer: int | None = None, pos=None, heads: int = 1) -> QueryState:
    params = weights_of(params)
    layer = state.layer if layer is None else layer
    p = f"mformer.{layer}"
    if f"{p}.ln_self.g" not in params:
        raise ConfigurationError(f"decoder block {layer} is not initialised")
    feats = _as_tokens(features)
    n, s, m = state.sizes
    x = T.concat([state.q_id, state.q_ins, state.p_sem], axis=0)
    xn = norm(params, f"{p}.ln_self", x)
    x = x + attend(params, f"{p}.self", xn, xn, xn, mask=build_attention_mask(n, s, m), heads=heads)
    q = T.rows(x, 0, n + s)
    proto = T.rows(x, n + s, n + s + m)
    prev = None
    if prev_pred is not None:
        prev = np.concatenate([prev_pred.id_mask_logits.data, prev_pred.ins_mask_logits.data], axis=0)
    q = masked_cross_attention(q, feats, prev, params, p, pos, heads)
    q = q + feed_forward(params, f"{p}.ffn_q", norm(params, f"{p}.ln_ffn_q", q))
    proto = proto + feed_forward(params, f"{p}.ffn_p", norm(params, f"{p}.ln_ffn_p", proto))
    return QueryState(T.rows(q, 0, n), T.rows(q, n, n + s), proto, layer + 1)


def predict_heads(state: QueryState, features, params, grid: tuple[int, int] | None = None) -> Prediction:
    params = weights_of(params)
    if grid is None:
        if isinstance(features, T.Tensor) and features.data.ndim == 2 or np.ndim(features) == 2:
            raise ShapeError("grid is required for flattened features")
        grid = tuple(np.shape(features.data if isinstance(features, T.Tensor) else features)[1:])
    feats = _as_tokens(features)
    c = feats.shape[1]
    pixel = T.linear(feats, w(params, "head.pixel.w"), w(params, "head.pixel.b"))
    pixel_t = T.transpose(pixel)
    n, s = state.q_id.shape[0], state.q_ins.shape[0]

    id_logits = T.matmul(feed_forward(params, "head.id_mask", state.q_id), pixel_t)
    ins_logits = T.matmul(feed_forward(params, "head.ins_mask", state.q_ins), pixel_t)

    no_obj = T.reshape(w(params, "head.no_object"), (1, c))
    classifier = T.concat([state.p_sem, no_obj], axis=0)
    cls_logits = T.scale(T.matmul(state.q_ins, T.transpose(classifier)), 1.0 / math.sqrt(c))
    presence = T.linear(state.q_id, w(params, "head.id_cls.w"), w(params, "head.id_cls.b"))
    return Prediction(
        ins_class_probs=T.softmax(cls_logits, axis=-1),
        ins_mask_logits=T.reshape(ins_logits, (s,) + tuple(grid)),
        id_presence_probs=T.softmax(presence, axis=-1),
        id_mask_logits=T.reshape(id_logits, (n,) + tuple(grid)),
    )


def decoder_depth(params) -> int:
    params = weights_of(params)
    n = 0
    while f"mformer.{n}.ln_self.g" in params:
        n += 1
    return n


def m_former_forward(q_id0, q_ins0, p_sem0, features, params, num_layers: int | None = None, heads: int = 1):
    """Run the decoder; returns (final state, [prediction per layer incl. layer 0])."""
    params = weights_of(params)
    depth = decoder_depth(params)
    num_layers = depth if num_layers is None else num_layers
    if num_layers < 1 or num_layers > depth:
        raise ConfigurationError(f"requested {num_layers} decoder blocks, parameters hold {depth}")
    if isinstance(features, T.Tensor) and features.data.ndim == 3 or not isinstance(features, T.Tensor) and np.ndim(features) == 3:
        c, h, w_ = np.shape(features.data if isinstance(features, T.Tensor) else features)
        feats = _as_tokens(features)
    else:
        raise ShapeError("decoder features must be a C×H×W map")
    pos = sine_position_grid(c, h, w_)
    state = QueryState(T.as_tensor(q_id0), T.as_tensor(q_ins0), T.as_tensor(p_sem0), 0)
    preds = [predict_heads(state, feats, params, (h, w_))]
    for layer in range(num_layers):
        state = m_former_block(state, feats, preds[-1], params, layer, pos, heads)
        preds.append(predict_heads(state, feats, params, (h, w_)))
    return state, preds
