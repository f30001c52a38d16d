import os

import numpy as np
import pytest

from semcom.channel import ChannelConfig
from semcom.config import ExperimentConfig
from semcom.data import DataConfig, load_datasets
from semcom.model import ModelConfig
from semcom.training import TrainConfig

DESK_SEEDS = tuple(range(5))

TINY_MODEL = ModelConfig(stage_dims=(8, 8, 8, 8), encoder_depths=(1, 1, 1, 1), hcd_depths=(1, 2, 1, 1),
                         lcd_depths=(1, 1, 1, 1), heads=(1, 1, 1, 1))


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    """Small enough that a full regimen trains in well under a second."""
    return ExperimentConfig(model=TINY_MODEL, channel=ChannelConfig(),
                            train=TrainConfig(epochs=2, batch_size=4),
                            data=DataConfig(extent=16, train_n=8, test_n=4))


@pytest.fixture
def tiny_data(tiny_cfg):
    return load_datasets(tiny_cfg.data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """All regimens x 5 seeds at the desk configuration, computed once per session.

    Returns (config, {seed: {regimen: TrainLog}}, {seed: seconds}).
    """
    import time

    from semcom.cli import _compare_cell

    cfg = ExperimentConfig().replace("train", eval_every=5)
    out = tmp_path_factory.mktemp("desk")
    logs, secs = {}, {}
    for seed in DESK_SEEDS:
        t0 = time.perf_counter()
        logs[seed] = _compare_cell(cfg, seed, out)
        secs[seed] = time.perf_counter() - t0
    return cfg, logs, secs
