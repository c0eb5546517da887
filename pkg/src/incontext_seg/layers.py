"""Parameterised sub-layers shared by the fusion block and the decoder."""
from __future__ import annotations

from typing import Mapping

from . import tensor_ops as T
from .params import ConfigurationError, ModelParams

Weights = Mapping[str, "T.Tensor"]


def weights_of(params) -> Weights:
    """Accept a ModelParams or a name -> Tensor/ndarray mapping."""
    if params is None:
        raise ConfigurationError("model parameters are not initialised")
    return params.tensors if isinstance(params, ModelParams) else params


def w(params: Weights, name: str):
    try:
        return params[name]
    except KeyError:
        raise ConfigurationError(f"missing parameter {name!r}") from None


def norm(params: Weights, prefix: str, x):
    return T.layer_norm(x, w(params, f"{prefix}.g"), w(params, f"{prefix}.b"))


def attend(params: Weights, prefix: str, queries, keys, values, mask=None, heads: int = 1):
    """Projected attention; returns the output projection (no residual)."""
    q = T.linear(queries, w(params, f"{prefix}.wq"), w(params, f"{prefix}.bq"))
    k = T.linear(keys, w(params, f"{prefix}.wk"), w(params, f"{prefix}.bk"))
    v = T.linear(values, w(params, f"{prefix}.wv"), w(params, f"{prefix}.bv"))
    out = T.multi_head_attention(q, k, v, heads=heads, mask=mask)
    return T.linear(out, w(params, f"{prefix}.wo"), w(params, f"{prefix}.bo"))


def feed_forward(params: Weights, prefix: str, x):
    return T.ffn(x, w(params, f"{prefix}.w1"), w(params, f"{prefix}.b1"), w(params, f"{prefix}.w2"), w(params, f"{prefix}.b2"))
