"""Oracle and invariant checks, runnable without any data on disk.

Each check returns a :class:`CheckResult`; ``run_all`` drives the ``selftest``
command and the acceptance suite reuses the individual checks.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_ops as T
from .data import SceneConfig, category_pairs, gen_dataset
from .formats import load_sint, read_mask, read_pgm, read_ppm, save_sint, write_mask, write_pgm, write_ppm
from .interaction import mask_pool
from .matching import brute_force_match, hungarian_match
from .memory import MemoryBank, update_memory
from .metrics import average_precision, jf_score, miou
from .mformer import QueryState, m_former_block, m_former_forward, predict_heads, sine_position_grid
from .params import ModelDims, ModelParams, output_projection_names
from .train import TrainConfig, analytic_gradients, build_episode, init_params, loss_function, sample_pair

GRAD_FLOOR = 1e-5  # gradients below this magnitude are compared absolutely


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def relative_error(a, b, floor: float = GRAD_FLOOR) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# matching


def random_cost(rng: np.random.Generator, max_side: int = 7) -> np.ndarray:
    n = int(rng.integers(1, max_side + 1))
    m = int(rng.integers(n, max_side + 1))
    if rng.random() < 0.3:  # integer costs exercise the tie rule
        return rng.integers(0, 4, size=(n, m)).astype(np.float64)
    return rng.random((n, m))


def check_matching(count: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(count):
        c = random_cost(rng)
        h, b = hungarian_match(c), brute_force_match(c)
        if h.sigma != b.sigma or h.total_cost != b.total_cost:
            bad += 1
    dt = time.perf_counter() - t0
    return CheckResult("matching oracle", bad == 0 and dt < 5.0, f"{count - bad}/{count} identical to brute force", dt)


# ---------------------------------------------------------------------------
# gradients


TINY = TrainConfig(channels=4, num_instance_queries=2, num_layers=1, max_instances=3, batch_size=1, scene=dict(size=16, min_extent=5, max_extent=9, min_visible=2))


def tiny_instances(count: int, seed: int = 0, cfg: TrainConfig = TINY):
    """(params, episodes) pairs with perturbed initial weights on 16×16 scenes."""
    scenes = gen_dataset(cfg.scene_config, 8, seed)
    feasible = category_pairs(scenes)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        base = init_params(cfg.dims, seed * 1000 + k)
        params = ModelParams(base.dims, {n: a + 0.1 * rng.standard_normal(a.shape) for n, a in base.tensors.items()})
        out.append((params, [build_episode(sample_pair(scenes, rng, cfg, feasible), cfg, rng)]))
    return out


def probe_coords(params: ModelParams, rng: np.random.Generator, extra: int = 32) -> np.ndarray:
    """One coordinate inside every parameter tensor plus ``extra`` uniform picks."""
    coords, pos = [], 0
    for a in params.tensors.values():
        coords.append(pos + int(rng.integers(a.size)))
        pos += a.size
    coords.extend(rng.choice(pos, extra, replace=False).tolist())
    return np.array(sorted(set(coords)))


def check_gradients(count: int = 20, seed: int = 0, cfg: TrainConfig = TINY) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    worst_rich = worst_an = 0.0
    for params, episodes in tiny_instances(count, seed, cfg):
        f = loss_function(params, episodes, cfg)
        flat = params.flatten()
        coords = probe_coords(params, rng)
        fd1 = T.finite_diff_grad(f, flat, 1e-5, coords=coords)
        fd2 = T.finite_diff_grad(f, flat, 5e-6, coords=coords)
        worst_rich = max(worst_rich, float(relative_error(fd1, fd2).max()))
        _, _, _, grads = analytic_gradients(params, episodes, cfg)
        an = np.concatenate([grads[k].reshape(-1) for k in params.tensors])[coords]
        worst_an = max(worst_an, float(relative_error(an, fd1).max()))
    dt = time.perf_counter() - t0
    ok = worst_rich < 1e-3 and worst_an < 1e-4 and dt < 120.0
    return CheckResult("gradient correctness", ok, f"step-halving rel {worst_rich:.2e} (< 1e-3), analytic vs FD rel {worst_an:.2e} (< 1e-4)", dt)


# ---------------------------------------------------------------------------
# decoder structure


def random_params(dims: ModelDims, rng: np.random.Generator) -> ModelParams:
    base = init_params(dims, int(rng.integers(2**31)))
    return ModelParams(dims, {k: a + 0.3 * rng.standard_normal(a.shape) for k, a in base.tensors.items()})


def id_trajectory(params, q_id, q_ins, p_sem, feats) -> list[np.ndarray]:
    """q_id after every block plus every layer's ID-head outputs."""
    c, h, w_ = feats.shape
    pos = sine_position_grid(c, h, w_)
    tokens = np.ascontiguousarray(feats.reshape(c, -1).T)
    state = QueryState(T.Tensor(q_id), T.Tensor(q_ins), T.Tensor(p_sem), 0)
    pred = predict_heads(state, tokens, params, (h, w_))
    out = [state.q_id.data, pred.id_presence_probs.data, pred.id_mask_logits.data]
    for layer in range(params.dims.num_layers):
        state = m_former_block(state, tokens, pred, params, layer, pos)
        pred = predict_heads(state, tokens, params, (h, w_))
        out += [state.q_id.data, pred.id_presence_probs.data, pred.id_mask_logits.data]
    return out


def check_id_isolation(draws: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst, exact = 0.0, True
    for _ in range(draws):
        c = int(rng.choice([4, 8]))
        dims = ModelDims(channels=c, num_instance_queries=int(rng.integers(1, 5)), num_layers=int(rng.integers(1, 4)))
        params = random_params(dims, rng)
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w_ = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        q_id = rng.standard_normal((n, c))
        feats = rng.standard_normal((c, h, w_))
        s = dims.num_instance_queries
        a = id_trajectory(params, q_id, rng.standard_normal((s, c)), rng.standard_normal((m, c)), feats)
        b = id_trajectory(params, q_id, rng.standard_normal((s, c)) * 3, rng.standard_normal((m, c)) * 3, feats)
        for x, y in zip(a, b):
            worst = max(worst, float(np.abs(x - y).max()))
            exact &= bool(np.array_equal(x, y))
    dt = time.perf_counter() - t0
    return CheckResult("ID-path isolation", worst <= 1e-12, f"max deviation {worst:.1e} over {draws} draws (bit-exact: {exact})", dt)


def check_residual_identity(draws: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    exact = True
    for _ in range(draws):
        dims = ModelDims(channels=8, num_instance_queries=3, num_layers=int(rng.integers(1, 4)))
        params = random_params(dims, rng)
        zeroed = params.copy()
        for name in output_projection_names(dims):
            if name.startswith("mformer."):
                zeroed.tensors[name][...] = 0.0
        q = [rng.standard_normal((k, 8)) for k in (2, 3, 2)]
        state, _ = m_former_forward(*q, rng.standard_normal((8, 4, 4)), zeroed)
        exact &= all(np.array_equal(x.data, y) for x, y in zip((state.q_id, state.q_ins, state.p_sem), q))
    dt = time.perf_counter() - t0
    return CheckResult("residual identity", exact, f"{draws} zero-projection stacks return their inputs bit-exactly: {exact}", dt)


# ---------------------------------------------------------------------------
# mask pooling


def mask_pool_oracle(features: np.ndarray, masks: np.ndarray) -> np.ndarray:
    c, h, w_ = features.shape
    out = np.zeros((len(masks), c))
    for k, m in enumerate(masks):
        count = 0
        for y in range(h):
            for x in range(w_):
                if m[y, x]:
                    count += 1
                    for ch in range(c):
                        out[k, ch] += features[ch, y, x]
        if count:
            out[k] /= count
    return out


def check_mask_pool(cases: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(cases):
        c, h, w_ = (int(v) for v in rng.integers(1, 9, size=3))
        feats = rng.standard_normal((c, h, w_))
        masks = rng.random((int(rng.integers(1, 4)), h, w_)) < rng.random()
        got = mask_pool(feats, masks).tokens
        worst = max(worst, float(np.abs(got - mask_pool_oracle(feats, masks)).max()))
    dt = time.perf_counter() - t0
    return CheckResult("mask-pool oracle", worst <= 1e-12, f"max deviation {worst:.1e} over {cases} cases", dt)


# ---------------------------------------------------------------------------
# metrics


def check_metric_sanity(seed: int = 0) -> CheckResult:
    t0 = time.perf_counter()
    scenes = gen_dataset(SceneConfig(size=32, min_extent=6, max_extent=14), 6, seed)
    labels = []
    for s in scenes:
        lab = np.zeros(s.image.shape[:2], dtype=np.int64)
        for c, m in zip(s.categories, s.masks):
            lab[m] = c
        labels.append(lab)
    classes = sorted({c for s in scenes for c in s.categories})
    m = miou(labels, labels, classes)
    inst = [[(c, mk, 1.0) for c, mk in zip(s.categories, s.masks)] for s in scenes]
    ap = average_precision(inst, inst)
    frames = [[mk for mk in s.masks] for s in scenes]
    _, _, jf = jf_score(frames, frames)
    gt = np.zeros((8, 8), dtype=bool)
    gt[2:6, 2:6] = True
    fp = np.zeros_like(gt)
    fp[0, 0] = True
    fp_first = average_precision([[(1, fp, 0.9), (1, gt, 0.8)]], [[(1, gt)]], iou_thresholds=(0.5,))
    tp_first = average_precision([[(1, gt, 0.9), (1, fp, 0.8)]], [[(1, gt)]], iou_thresholds=(0.5,))
    ok = m == 1.0 and ap == 1.0 and jf == 1.0 and fp_first == 0.5 and tp_first == 1.0
    dt = time.perf_counter() - t0
    return CheckResult("metric sanity", ok, f"mIoU {m}, AP {ap}, J&F {jf}, FP-first AP {fp_first}, TP-first AP {tp_first}", dt)


# ---------------------------------------------------------------------------
# memory bank


def check_memory_invariants(updates: int = 1000, seed: int = 0) -> CheckResult:
    """Random update sequences: pinned entry survives, capacity holds, λ=1 keeps the top raw scores."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    ok = True
    feats = np.zeros((1, 2, 2))
    mask = np.ones((2, 2), dtype=bool)
    for k in (1, 2, 3, 6):
        for decay in (1.0, 0.9, 0.99):
            bank = MemoryBank(0, k, decay)
            update_memory(bank, feats, mask, 1.0, 0)
            frame, offered = 0, []
            for _ in range(updates):
                frame += int(rng.integers(1, 4))
                raw = float(rng.random())
                offered.append(raw)
                update_memory(bank, feats, mask, raw, frame)
                ok &= len(bank.entries) <= k
                ok &= sum(e.pinned for e in bank.entries) == 1 and bank.entries[0].pinned and bank.entries[0].frame == 0
            if decay == 1.0:
                kept = sorted(e.raw_score for e in bank.entries if not e.pinned)
                ok &= kept == sorted(offered)[len(offered) - (k - 1) :] if k > 1 else kept == []
    dt = time.perf_counter() - t0
    return CheckResult("memory-bank invariants", bool(ok), f"{updates} updates × 12 (K, λ) settings", dt)


# ---------------------------------------------------------------------------
# formats


def check_round_trips(cases: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    ok = True
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(tmp)
        for k in range(cases):
            shape = tuple(int(v) for v in rng.integers(0, 5, size=int(rng.integers(0, 4))))
            for dtype in (np.float32, np.float64):
                a = rng.standard_normal(shape).astype(dtype)
                save_sint(d / "t.sint", a)
                b = load_sint(d / "t.sint")
                ok &= b.dtype == a.dtype and b.shape == a.shape and a.tobytes() == b.tobytes()
            h, w_ = (int(v) for v in rng.integers(1, 20, size=2))
            g = rng.integers(0, 256, size=(h, w_)).astype(np.uint8)
            write_pgm(d / "g.pgm", g)
            ok &= np.array_equal(read_pgm(d / "g.pgm"), g)
            mk = rng.random((h, w_)) < 0.5
            write_mask(d / "m.pgm", mk)
            ok &= np.array_equal(read_mask(d / "m.pgm"), mk)
            rgb = rng.integers(0, 256, size=(h, w_, 3)).astype(np.uint8)
            write_ppm(d / "c.ppm", rgb)
            ok &= np.array_equal(read_ppm(d / "c.ppm", as_float=False), rgb)
            ok &= np.array_equal(read_ppm(d / "c.ppm"), rgb / 255.0)
    dt = time.perf_counter() - t0
    return CheckResult("format round-trips", bool(ok), f"{cases} SINT (f32+f64), PGM, mask and PPM cases bit-exact", dt)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "matching": check_matching,
    "gradients": check_gradients,
    "id_isolation": check_id_isolation,
    "residual": check_residual_identity,
    "mask_pool": check_mask_pool,
    "metrics": check_metric_sanity,
    "memory": check_memory_invariants,
    "formats": check_round_trips,
}


def run_all(names: list[str] | None = None, report: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name in names or list(CHECKS):
        try:
            r = CHECKS[name]()
        except Exception as exc:  # a crash is a failure, not an abort
            r = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        results.append(r)
        if report is not None:
            report(r.line())
    return results
