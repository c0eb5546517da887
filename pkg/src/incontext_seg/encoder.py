"""Image feature providers.

The stand-in encoder cuts the image into non-overlapping patches and projects
each flattened patch with a fixed seeded Gaussian matrix. It is linear and
bias-free, so an all-zero image encodes to all-zero features.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .formats import FormatError, load_sint, save_sint
from .tensor_ops import ShapeError

DEFAULT_PATCH = 4
DEFAULT_CHANNELS = 16


@lru_cache(maxsize=16)
def _projection(patch: int, channels: int, seed: int) -> np.ndarray:
    d = 3 * patch * patch
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d, channels)) / np.sqrt(d)
    w.setflags(write=False)
    return w


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """H'×W'×3 image -> (H*W)×(3·patch²) rows, row-major over the patch grid."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be H×W×3, got {img.shape}")
    hh, ww, _ = img.shape
    if hh % patch or ww % patch:
        raise ShapeError(f"image size {hh}×{ww} is not divisible by patch {patch}")
    h, w = hh // patch, ww // patch
    x = img.reshape(h, patch, w, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(h * w, patch * patch * 3)


def encode_stub(img: np.ndarray, patch: int = DEFAULT_PATCH, channels: int = DEFAULT_CHANNELS, seed: int = 0) -> np.ndarray:
    """Encode an image into a C×H×W feature map."""
    hh, ww = np.shape(img)[:2]
    tokens = patchify(img, patch) @ _projection(patch, channels, seed)
    return np.ascontiguousarray(tokens.T.reshape(channels, hh // patch, ww // patch))


def save_features(path, features: np.ndarray) -> None:
    save_sint(path, np.asarray(features, dtype=np.float64))


def load_features(path) -> np.ndarray:
    feats = load_sint(path, ndim=3).astype(np.float64)
    if min(feats.shape) < 1:
        raise FormatError(f"empty feature map dims {feats.shape}", 7)
    return feats
