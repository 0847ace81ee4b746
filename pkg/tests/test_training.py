import math

import numpy as np
import pytest
import torch

from tests.conftest import tiny_config
from utils import training
from utils.dataset import DatasetBundle, Trajectory
from utils.errors import DatasetError, NonFiniteLossError, TrajectoryTooShortError
from utils.maze_env import EnvParams
from utils.training import LOG_COLUMNS, latent_action_std, train_high, train_low


def test_low_training_log(trained, config):
    _, low_log, _, _ = trained
    assert list(low_log.columns) == LOG_COLUMNS
    assert low_log["epoch"].tolist() == list(range(1, config.train_low.epochs + 1))
    assert all(math.isfinite(v) for v in low_log["total"])


def test_high_training_attaches_modules(trained, config):
    params, _, high_log, _ = trained
    assert params.has_high
    assert params.d_l == config.model.d_l
    assert len(params.latent_action_std) == params.d_l
    assert all(s > 0 for s in params.latent_action_std)
    assert list(high_log.columns) == LOG_COLUMNS
    assert (high_log["vicreg"] == 0.0).all()


def test_prober_metrics(trained):
    _, _, _, metrics = trained
    assert metrics["samples"] > 0
    assert metrics["heldout"] >= 1
    assert metrics["median_error_cells"] >= 0.0
    assert "baseline_median_error_cells" in metrics


def test_training_is_deterministic(tiny_bundle):
    config = tiny_config().model_copy(deep=True)
    config.train_low.epochs = 1
    env_params = EnvParams.from_config(config.env)
    a, log_a = train_low(tiny_bundle, config, env_params)
    b, log_b = train_low(tiny_bundle, config, env_params)
    assert log_a.equals(log_b)
    for x, y in zip(a.low_parameters().values(), b.low_parameters().values()):
        assert torch.equal(x, y)


def test_encoder_stays_frozen_during_high_training(tiny_bundle):
    config = tiny_config().model_copy(deep=True)
    config.train_low.epochs = 1
    config.train_high.epochs = 1
    env_params = EnvParams.from_config(config.env)
    params, _ = train_low(tiny_bundle, config, env_params)
    before = {k: v.clone() for k, v in params.low_parameters().items()}
    train_high(tiny_bundle, params, config, env_params)
    for name, value in params.low_parameters().items():
        assert torch.equal(value, before[name]), name


def test_empty_dataset_rejected(config, rooms):
    empty = DatasetBundle(trajectories=[], layouts={"rooms": rooms}, G=6, resolution=16)
    with pytest.raises(DatasetError):
        train_low(empty, config)


def test_too_short_trajectories_rejected(config, rooms):
    short = Trajectory(states=np.zeros((3, 4)) + 0.5, actions=np.zeros((2, 2)), layout_id="rooms")
    bundle = DatasetBundle(trajectories=[short], layouts={"rooms": rooms}, G=6, resolution=16)
    with pytest.raises(TrajectoryTooShortError):
        train_low(bundle, config)


def test_non_finite_loss_reports_breakdown(tiny_bundle, monkeypatch):
    config = tiny_config().model_copy(deep=True)
    config.train_low.epochs = 1

    real = training.loss_total_low

    def poisoned(*args, **kwargs):
        breakdown = real(*args, **kwargs)
        breakdown.total = breakdown.total * float("nan")
        return breakdown

    monkeypatch.setattr(training, "loss_total_low", poisoned)
    with pytest.raises(NonFiniteLossError) as info:
        train_low(tiny_bundle, config)
    assert info.value.epoch == 1 and info.value.batch == 0
    assert math.isnan(info.value.terms["total"])


def test_latent_action_std_falls_back_without_chunks(trained, rooms):
    params = trained[0]
    short = Trajectory(states=np.zeros((3, 4)) + 0.5, actions=np.zeros((2, 2)), layout_id="rooms")
    bundle = DatasetBundle(trajectories=[short], layouts={"rooms": rooms}, G=6, resolution=16)
    assert latent_action_std(bundle, params, stride=5) == [1.0] * params.d_l
