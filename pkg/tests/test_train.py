import math

import numpy as np
import pytest

from incontext_seg import tensor_ops as T
from incontext_seg import train as tr
from incontext_seg.data import gen_dataset
from incontext_seg.params import ModelDims, load_params, param_shapes
from incontext_seg.selftest import TINY
from incontext_seg.train import (
    OptimizerError,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adam_step,
    build_episode,
    init_params,
    learning_rate,
    load_optimizer_state,
    loss_function,
    read_curve,
    sample_pair,
    save_checkpoint,
    train,
    with_overrides,
)

# the smallest model that still exercises every component
MICRO = with_overrides(TINY, channels=2, max_instances=2, lr=1e-2, warmup_steps=5)


def micro_dataset():
    return gen_dataset(MICRO.scene_config, 8, 0)


def test_init_is_deterministic():
    a, b = init_params(ModelDims(), 3), init_params(ModelDims(), 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(init_params(ModelDims(), 4)["queries.ins"], a["queries.ins"])


def test_init_biases_zero_and_norm_gains_one():
    p = init_params(ModelDims(), 0)
    for name in p:
        leaf = name.rsplit(".", 1)[1]
        if ".ln" in name:
            assert (p[name] == (1.0 if leaf == "g" else 0.0)).all()
        elif leaf.startswith("b"):
            assert not p[name].any(), name


def test_init_weight_statistics():
    dims = ModelDims(channels=100, num_instance_queries=1, num_layers=1)
    w = init_params(dims, 0)["head.pixel.w"].reshape(-1) * math.sqrt(100)  # 10^4 unit-variance draws
    assert abs(w.mean()) <= 3 / math.sqrt(w.size)
    assert abs(w.std() - 1) < 0.05


def single(value, **kw):
    cfg = TrainConfig(weight_decay=0.0, warmup_steps=0, **kw)
    dims = ModelDims(channels=2, num_instance_queries=1, num_layers=1)
    params = init_params(dims, 0)
    grads = {k: np.full_like(v, value) for k, v in params.tensors.items()}
    return cfg, params, grads


def test_adam_first_step_is_minus_lr_sign():
    cfg, params, grads = single(1.0, lr=1e-4)
    new, state = adam_step(params, grads, OptimizerState.zeros_like(params), cfg)
    for k in params:
        assert np.allclose(new[k] - params[k], -1e-4, rtol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_no_decay_is_identity():
    cfg, params, grads = single(0.0)
    new, _ = adam_step(params, grads, OptimizerState.zeros_like(params), cfg)
    assert all(np.array_equal(new[k], params[k]) for k in params)


def test_weight_decay_is_decoupled():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5, warmup_steps=0)
    dims = ModelDims(channels=2, num_instance_queries=1, num_layers=1)
    params = init_params(dims, 0)
    zero = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    new, _ = adam_step(params, zero, OptimizerState.zeros_like(params), cfg)
    assert all(np.allclose(new[k], params[k] * 0.95) for k in params)


def test_warmup_is_linear():
    cfg = TrainConfig(lr=1e-4, warmup_steps=100)
    assert learning_rate(cfg, 50) == 0.5e-4 and learning_rate(cfg, 100) == 1e-4 and learning_rate(cfg, 500) == 1e-4


def test_non_finite_gradient_names_parameter():
    cfg, params, grads = single(0.0)
    grads["head.id_cls.w"][0, 0] = np.nan
    with pytest.raises(OptimizerError, match="head.id_cls.w"):
        adam_step(params, grads, OptimizerState.zeros_like(params), cfg)


@pytest.mark.parametrize("bad", [dict(steps=0), dict(lr=0.0), dict(pair_prob=1.5), dict(gradient_mode="magic"), dict(batch_size=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_round_trip_and_unknown_fields():
    cfg = TrainConfig(lr=3e-3, scene={"size": 32})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3, "colour": 2})


def test_episode_targets_fit_queries():
    ds = micro_dataset()
    rng = np.random.default_rng(0)
    for _ in range(20):
        ep = build_episode(sample_pair(ds, rng, MICRO), MICRO, rng)
        assert len(ep.gt.instances) <= MICRO.num_instance_queries
        assert len(ep.gt.ids) == len(ep.grouped.id_masks) <= MICRO.max_instances
        assert all(m.any() for present, m in ep.gt.ids if present)


def test_pair_mixture_probability():
    ds = micro_dataset()
    rng = np.random.default_rng(1)
    regimes = [sample_pair(ds, rng, MICRO).regime for _ in range(2000)]
    assert abs(regimes.count("same_image") / 2000 - 0.5) < 0.05


def test_finite_difference_training_is_deterministic():
    cfg = with_overrides(MICRO, steps=3, gradient_mode="finite-diff")
    ds = micro_dataset()
    a, ca = train(cfg, ds)
    b, cb = train(cfg, ds)
    assert ca == cb and all(np.array_equal(a[k], b[k]) for k in a)


def test_analytic_curve_tracks_finite_difference_curve():
    ds = micro_dataset()
    cfg = with_overrides(MICRO, steps=50)
    _, fd = train(with_overrides(cfg, gradient_mode="finite-diff"), ds)
    _, an = train(cfg, ds)
    for a, b in zip(fd[::10], an[::10]):
        assert abs(a["loss"] - b["loss"]) <= 0.05 * abs(a["loss"]), (a, b)


def test_disabling_id_loss_zeroes_id_head_gradients():
    cfg = with_overrides(MICRO, loss_id=0.0)
    ds = micro_dataset()
    rng = np.random.default_rng(2)
    eps = [build_episode(sample_pair(ds, rng, cfg), cfg, rng) for _ in range(2)]
    params = tr.init_params(cfg.dims, 0)
    names = list(param_shapes(cfg.dims))
    offsets = np.cumsum([0] + [params[k].size for k in names])
    coords = [i for k, a, b in zip(names, offsets[:-1], offsets[1:]) if k.startswith(("head.id_cls", "head.id_mask")) for i in range(a, b)]
    g = T.finite_diff_grad(loss_function(params, eps, cfg), params.flatten(), 1e-5, coords)
    assert len(coords) > 0 and not g.any()
    _, _, _, grads = tr.analytic_gradients(params, eps, cfg)
    assert all(not grads[k].any() for k in names if k.startswith(("head.id_cls", "head.id_mask")))


def test_non_finite_loss_aborts(monkeypatch):
    def broken(params, episodes, cfg):
        return math.nan, 0.0, 0.0, {}

    monkeypatch.setattr(tr, "analytic_gradients", broken)
    with pytest.raises(TrainingError, match="step 0.*seed 0"):
        train(with_overrides(MICRO, steps=2), micro_dataset())


def test_checkpoint_round_trip(tmp_path):
    cfg = with_overrides(MICRO, steps=2)
    params, state, curve = tr.run_training(cfg, micro_dataset())
    save_checkpoint(tmp_path, params, state, cfg, curve)
    loaded = load_params(tmp_path)
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    opt = load_optimizer_state(tmp_path, loaded)
    assert opt.step == 2 and all(np.array_equal(opt.m[k], state.m[k]) for k in params)
    assert read_curve(tmp_path / "loss_curve.csv") == curve
