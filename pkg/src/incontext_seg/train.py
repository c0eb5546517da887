"""Desk-scale training loop.

Gradients come either from the autodiff tape (``analytic``) or from central
finite differences over every parameter (``finite-diff``, only practical for
tiny models; it is the oracle the analytic path is checked against).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_ops as T
from .data import Pair, Scene, SceneConfig, category_pairs, pair_same_category, pair_same_image
from .encoder import encode_stub
from .formats import config_hash, load_sint, read_json, save_sint, write_json
from .interaction import GroupedMasks, downsample_mask, group_masks
from .losses import GroundTruthSet, LossWeights, loss_terms
from .model import forward
from .params import ModelDims, ModelParams, param_shapes, save_params

log = logging.getLogger(__name__)

GRADIENT_MODES = ("analytic", "finite-diff")


class TrainingError(RuntimeError):
    pass


class OptimizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    channels: int = 16
    max_instances: int = 4
    num_instance_queries: int = 8
    num_layers: int = 2
    heads: int = 1
    steps: int = 200
    batch_size: int = 2
    lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pair_prob: float = 0.5
    seed: int = 0
    gradient_mode: str = "analytic"
    fd_eps: float = 1e-5
    deep_supervision: bool = False
    patch: int = 4
    encoder_seed: int = 0
    dataset_size: int = 64
    view_scale: tuple[float, float] = (0.5, 1.0)
    loss_bce: float = 1.0
    loss_dice: float = 1.0
    loss_no_object: float = 1.0
    loss_hungarian: float = 1.0
    loss_id: float = 1.0
    scene: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError(f"pair probability must lie in [0, 1], got {self.pair_prob}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}")

    @property
    def dims(self) -> ModelDims:
        return ModelDims(channels=self.channels, num_instance_queries=self.num_instance_queries, num_layers=self.num_layers, heads=self.heads)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.loss_bce, self.loss_dice, self.loss_no_object, self.loss_hungarian, self.loss_id)

    @property
    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.scene)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "view_scale" in d:
            d["view_scale"] = tuple(d["view_scale"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_scale"] = list(self.view_scale)
        return d


# ---------------------------------------------------------------------------
# parameters and optimiser


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/fan_in); biases and LayerNorm shifts zero; LayerNorm gains one."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(dims).items():
        leaf = name.rsplit(".", 1)[1]
        if name == "queries.ins":
            out[name] = rng.standard_normal(shape)
        elif name == "head.no_object":
            out[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        elif ".ln" in name:
            out[name] = np.ones(shape) if leaf == "g" else np.zeros(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return ModelParams(dims, out)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.tensors.items()}, {k: np.zeros_like(a) for k, a in params.tensors.items()})


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup over the first ``warmup_steps`` steps, constant after."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    step = state.step + 1
    lr = learning_rate(cfg, step)
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        decayed = p - lr * cfg.weight_decay * p
        new_p[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(params.dims, new_p), OptimizerState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    ref_features: np.ndarray
    grouped: GroupedMasks
    target_features: np.ndarray
    gt: GroundTruthSet
    regime: str = ""


def build_episode(pair: Pair, cfg: TrainConfig, rng: np.random.Generator | None = None) -> Episode:
    """Encode a pair and express its targets on the feature grid.

    Targets too small to survive downsampling are dropped (instance) or marked
    absent (ID). References with more than ``max_instances`` objects are
    subsampled.
    """
    ref = pair.reference
    keep = list(range(ref.num_instances))
    if len(keep) > cfg.max_instances:
        rng = rng or np.random.default_rng(0)
        keep = sorted(rng.choice(len(keep), cfg.max_instances, replace=False).tolist())
        ref = type(ref)(ref.image, ref.masks[keep], [ref.categories[k] for k in keep])
    ids = [pair.id_targets[k] for k in keep]
    f_r = encode_stub(ref.image, cfg.patch, cfg.channels, cfg.encoder_seed)
    f_t = encode_stub(pair.target_image, cfg.patch, cfg.channels, cfg.encoder_seed)
    grid = f_t.shape[1:]
    grouped = group_masks(ref, grid)
    proto = {c: k for k, c in enumerate(grouped.sem_categories)}
    instances = []
    for cat, m in pair.target_instances:
        if cat not in proto:
            continue
        dm = downsample_mask(m, grid)
        if dm.any():
            instances.append((proto[cat], dm))
    if len(instances) > cfg.num_instance_queries:
        instances = sorted(instances, key=lambda t: -int(t[1].sum()))[: cfg.num_instance_queries]
    id_targets = []
    for present, m in ids:
        dm = downsample_mask(m, grid) if present else None
        id_targets.append((True, dm) if dm is not None and dm.any() else (False, None))
    return Episode(f_r, grouped, f_t, GroundTruthSet(instances, id_targets), pair.regime)


def sample_pair(dataset: list[Scene], rng: np.random.Generator, cfg: TrainConfig, feasible: list[tuple[int, int]] | None = None) -> Pair:
    feasible = category_pairs(dataset) if feasible is None else feasible
    if rng.random() < cfg.pair_prob or not feasible:
        scene = dataset[int(rng.integers(len(dataset)))]
        return pair_same_image(scene, rng, scale=cfg.view_scale)
    return pair_same_category(dataset, rng, feasible=feasible)


# ---------------------------------------------------------------------------
# loss and gradients


def episode_losses(params, ep: Episode, cfg: TrainConfig) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    preds = forward(params, ep.ref_features, ep.grouped, ep.target_features, cfg.heads)
    used = preds if cfg.deep_supervision else preds[-1:]
    total = lh = li = None
    for p in used:
        t, h, i = loss_terms(p, ep.gt, cfg.weights)
        total = t if total is None else total + t
        lh = h if lh is None else lh + h
        li = i if li is None else li + i
    return total, lh, li


def batch_loss(params, episodes: list[Episode], cfg: TrainConfig) -> tuple[T.Tensor, float, float]:
    total, lh_sum, li_sum = None, 0.0, 0.0
    for ep in episodes:
        t, lh, li = episode_losses(params, ep, cfg)
        total = t if total is None else total + t
        lh_sum += float(lh.data)
        li_sum += float(li.data)
    k = 1.0 / len(episodes)
    return T.scale(total, k), lh_sum * k, li_sum * k


def analytic_gradients(params: ModelParams, episodes: list[Episode], cfg: TrainConfig):
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
    loss, lh, li = batch_loss(leaves, episodes, cfg)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), lh, li, grads


def loss_function(params: ModelParams, episodes: list[Episode], cfg: TrainConfig) -> Callable[[np.ndarray], float]:
    """Scalar batch loss as a function of the flat parameter vector."""

    def f(flat: np.ndarray) -> float:
        return float(batch_loss(params.unflatten(flat), episodes, cfg)[0].data)

    return f


def fd_gradients(params: ModelParams, episodes: list[Episode], cfg: TrainConfig):
    flat = params.flatten()
    g = T.finite_diff_grad(loss_function(params, episodes, cfg), flat, cfg.fd_eps)
    loss, lh, li = batch_loss(params, episodes, cfg)
    grads = params.unflatten(g).tensors
    return float(loss.data), lh, li, grads


def train(cfg: TrainConfig, dataset: list[Scene], params: ModelParams | None = None, callback: Callable[[dict], None] | None = None) -> tuple[ModelParams, list[dict]]:
    """Run ``cfg.steps`` optimiser steps; returns final params and the loss curve."""
    params, _, curve = run_training(cfg, dataset, params, callback)
    return params, curve


def run_training(cfg: TrainConfig, dataset: list[Scene], params: ModelParams | None = None, callback: Callable[[dict], None] | None = None) -> tuple[ModelParams, OptimizerState, list[dict]]:
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.dims, cfg.seed) if params is None else params
    state = OptimizerState.zeros_like(params)
    feasible = category_pairs(dataset)
    grad_fn = analytic_gradients if cfg.gradient_mode == "analytic" else fd_gradients
    curve = []
    for step in range(cfg.steps):
        episodes = [build_episode(sample_pair(dataset, rng, cfg, feasible), cfg, rng) for _ in range(cfg.batch_size)]
        loss, lh, li, grads = grad_fn(params, episodes, cfg)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step} (config seed {cfg.seed})")
        params, state = adam_step(params, grads, state, cfg)
        row = {"step": step, "loss": loss, "l_hungarian": lh, "l_id": li}
        curve.append(row)
        if callback is not None:
            callback(row)
        if step % 20 == 0:
            log.info("step %d loss %.4f (hungarian %.4f, id %.4f)", step, loss, lh, li)
    return params, state, curve


# ---------------------------------------------------------------------------
# checkpoints


CURVE_FIELDS = ("step", "loss", "l_hungarian", "l_id")


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in curve:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in CURVE_FIELDS})


def read_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in CURVE_FIELDS[1:]}} for r in csv.DictReader(fh)]


def save_checkpoint(directory, params: ModelParams, state: OptimizerState, cfg: TrainConfig, curve: list[dict] | None = None) -> None:
    """Params directory plus ``optimizer/`` moment tensors, config and loss curve."""
    d = Path(directory)
    conf = cfg.to_dict()
    save_params(d, params, extra={"train_config": conf, "config_hash": config_hash(conf)})
    opt = d / "optimizer"
    opt.mkdir(parents=True, exist_ok=True)
    for name in params.tensors:
        save_sint(opt / f"m.{name}.sint", state.m[name])
        save_sint(opt / f"v.{name}.sint", state.v[name])
    write_json(opt / "state.json", {"step": state.step})
    if curve is not None:
        write_curve(d / "loss_curve.csv", curve)


def load_optimizer_state(directory, params: ModelParams) -> OptimizerState:
    opt = Path(directory) / "optimizer"
    m = {k: load_sint(opt / f"m.{k}.sint") for k in params.tensors}
    v = {k: load_sint(opt / f"v.{k}.sint") for k in params.tensors}
    return OptimizerState(m, v, int(read_json(opt / "state.json")["step"]))


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(read_json(path))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
