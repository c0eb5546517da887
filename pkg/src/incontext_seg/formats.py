"""On-disk formats: SINT v1 tensors and binary PGM/PPM images."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

SINT_MAGIC = b"SINT"
SINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_sint(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        code = 0
    else:
        arr = arr.astype(np.float64, copy=False)
        code = 1
    if arr.ndim > 255:
        raise ValueError("SINT supports at most 255 dimensions")
    header = SINT_MAGIC + bytes([SINT_VERSION, code, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_sint(buf: bytes, ndim: int | None = None) -> np.ndarray:
    if len(buf) < 7:
        raise FormatError("truncated SINT header", len(buf))
    if buf[:4] != SINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if buf[4] != SINT_VERSION:
        raise FormatError(f"unsupported version {buf[4]}", 4)
    if buf[5] not in _DTYPES:
        raise FormatError(f"unknown dtype code {buf[5]}", 5)
    dtype = _DTYPES[buf[5]]
    nd = buf[6]
    if ndim is not None and nd != ndim:
        raise FormatError(f"expected ndim={ndim}, file has ndim={nd}", 6)
    end = 7 + 4 * nd
    if len(buf) < end:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack(f"<{nd}I", buf[7:end])
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != need:
        raise FormatError(f"payload is {len(buf) - end} bytes, dims {dims} need {need}", end)
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims).copy()


def save_sint(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_sint(array))


def load_sint(path, ndim: int | None = None) -> np.ndarray:
    return decode_sint(Path(path).read_bytes(), ndim=ndim)


# ---------------------------------------------------------------------------
# portable anymaps


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit grayscale P5. Binary masks should be passed as 0/255."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}", 0)
        return np.array(im, dtype=np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, np.where(np.asarray(mask, dtype=bool), 255, 0))


def read_mask(path) -> np.ndarray:
    return read_pgm(path) > 127


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H×W×3 image. Floats are taken as [0,1] and quantised to 8 bits."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs H×W×3, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PPM")


def read_ppm(path, as_float: bool = True) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected P6 RGB image, got mode {im.mode}", 0)
        arr = np.array(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0 if as_float else arr


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Round-trip a float image through 8 bits, as PPM storage does."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255) / 255.0


# ---------------------------------------------------------------------------
# JSON helpers


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
