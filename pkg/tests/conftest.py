import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pathlib
import time
from dataclasses import dataclass

import pytest

CONFIGS = pathlib.Path(__file__).resolve().parents[1] / "configs"


@dataclass
class ToyRun:
    cfg: object
    dataset: list
    initial: object
    trained: object
    curve: list
    seconds: float


@pytest.fixture(scope="session")
def toy_run() -> ToyRun:
    """The committed toy training run, trained once per session."""
    from incontext_seg.data import gen_dataset
    from incontext_seg.train import init_params, load_train_config, train

    cfg = load_train_config(CONFIGS / "toy_train.json")
    dataset = gen_dataset(cfg.scene_config, cfg.dataset_size, cfg.seed)
    initial = init_params(cfg.dims, cfg.seed)
    t0 = time.perf_counter()
    trained, curve = train(cfg, dataset, initial.copy())
    return ToyRun(cfg, dataset, initial, trained, curve, time.perf_counter() - t0)
