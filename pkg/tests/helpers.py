"""Small builders shared by the test modules."""
import numpy as np

from incontext_seg.params import ModelDims, ModelParams
from incontext_seg.train import init_params


def random_params(dims: ModelDims, seed: int = 0, spread: float = 0.3) -> ModelParams:
    rng = np.random.default_rng(seed)
    base = init_params(dims, seed)
    return ModelParams(dims, {k: a + spread * rng.standard_normal(a.shape) for k, a in base.tensors.items()})


def zero_projections(params: ModelParams, names) -> ModelParams:
    out = params.copy()
    for n in names:
        out.tensors[n][...] = 0.0
    return out


def square_mask(size, y0, x0, side):
    m = np.zeros((size, size), dtype=bool)
    m[y0 : y0 + side, x0 : x0 + side] = True
    return m
