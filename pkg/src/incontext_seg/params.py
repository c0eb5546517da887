"""Model dimensions, the named parameter layout, and checkpoint directories."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .formats import FormatError, load_sint, read_json, save_sint, write_json

MANIFEST = "manifest.txt"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    channels: int = 16
    num_instance_queries: int = 8
    num_layers: int = 2
    fusion_blocks: int = 1
    ffn_expansion: int = 4
    heads: int = 1

    def __post_init__(self):
        if min(self.channels, self.num_instance_queries, self.num_layers, self.fusion_blocks, self.ffn_expansion, self.heads) < 1:
            raise ConfigurationError(f"all model dimensions must be positive: {self}")
        if self.channels % self.heads:
            raise ConfigurationError(f"channels {self.channels} not divisible by heads {self.heads}")


def _attn_shapes(prefix: str, c: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for n in ("q", "k", "v", "o"):
        out[f"{prefix}.w{n}"] = (c, c)
        out[f"{prefix}.b{n}"] = (c,)
    return out


def _ln_shapes(prefix: str, c: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (c,), f"{prefix}.b": (c,)}


def _ffn_shapes(prefix: str, c: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (c, hidden), f"{prefix}.b1": (hidden,), f"{prefix}.w2": (hidden, c), f"{prefix}.b2": (c,)}


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every trainable tensor."""
    c = dims.channels
    hid = dims.ffn_expansion * c
    shapes: dict[str, tuple[int, ...]] = {}
    for b in range(dims.fusion_blocks):
        p = f"fusion.{b}"
        shapes.update(_ln_shapes(f"{p}.ln_self", c))
        shapes.update(_attn_shapes(f"{p}.self", c))
        shapes.update(_ln_shapes(f"{p}.ln_tok", c))
        shapes.update(_ln_shapes(f"{p}.ln_feat", c))
        shapes.update(_attn_shapes(f"{p}.cross", c))
        shapes.update(_ln_shapes(f"{p}.ln_ffn", c))
        shapes.update(_ffn_shapes(f"{p}.ffn", c, hid))
    shapes["queries.ins"] = (dims.num_instance_queries, c)
    for layer in range(dims.num_layers):
        p = f"mformer.{layer}"
        shapes.update(_ln_shapes(f"{p}.ln_self", c))
        shapes.update(_attn_shapes(f"{p}.self", c))
        shapes.update(_ln_shapes(f"{p}.ln_cross", c))
        shapes.update(_attn_shapes(f"{p}.cross", c))
        shapes.update(_ln_shapes(f"{p}.ln_ffn_q", c))
        shapes.update(_ffn_shapes(f"{p}.ffn_q", c, hid))
        shapes.update(_ln_shapes(f"{p}.ln_ffn_p", c))
        shapes.update(_ffn_shapes(f"{p}.ffn_p", c, hid))
    shapes["head.pixel.w"] = (c, c)
    shapes["head.pixel.b"] = (c,)
    for h in ("id_mask", "ins_mask"):
        shapes.update(_ffn_shapes(f"head.{h}", c, c))
    shapes["head.id_cls.w"] = (c, 2)
    shapes["head.id_cls.b"] = (2,)
    shapes["head.no_object"] = (c,)
    return shapes


def output_projection_names(dims: ModelDims) -> list[str]:
    """Names whose zeroing turns every residual sub-layer into the identity."""
    names = []
    shapes = param_shapes(dims)
    for name in shapes:
        if not (name.startswith("fusion.") or name.startswith("mformer.")):
            continue
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("wo", "bo", "w2", "b2"):
            names.append(name)
    return names


@dataclass
class ModelParams:
    dims: ModelDims
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.dims)
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise ConfigurationError(f"parameters not initialised: {missing[:4]}{'...' if len(missing) > 4 else ''}")
        for k, shape in expected.items():
            arr = self.tensors[k]
            if tuple(arr.shape) != shape:
                raise ConfigurationError(f"parameter {k} has shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ConfigurationError(f"parameter {k} is not finite")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].reshape(-1) for k in param_shapes(self.dims)])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for k, shape in param_shapes(self.dims).items():
            n = int(np.prod(shape))
            out[k] = np.asarray(flat[pos : pos + n], dtype=np.float64).reshape(shape).copy()
            pos += n
        return ModelParams(self.dims, out)


def save_params(directory, params: ModelParams, extra: dict | None = None) -> None:
    """Write one SINT file per tensor plus ``manifest.txt`` and ``model.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, shape in param_shapes(params.dims).items():
        fname = name + ".sint"
        save_sint(d / fname, params[name])
        lines.append(f"{name}\t{fname}\t{'x'.join(str(s) for s in shape)}")
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    meta = {"dims": asdict(params.dims)}
    if extra:
        meta.update(extra)
    write_json(d / "model.json", meta)


def load_params(directory) -> ModelParams:
    d = Path(directory)
    for required in (MANIFEST, "model.json"):
        if not (d / required).is_file():
            raise FileNotFoundError(f"checkpoint file missing: {d / required}")
    dims = ModelDims(**read_json(d / "model.json")["dims"])
    tensors = {}
    for line in (d / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname, shape = line.split("\t")
        arr = load_sint(d / fname)
        want = tuple(int(s) for s in shape.split("x")) if shape else ()
        if arr.shape != want:
            raise FormatError(f"{fname}: shape {arr.shape} disagrees with manifest {want}", 7)
        tensors[name] = arr
    return ModelParams(dims, tensors)
