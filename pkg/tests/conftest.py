import numpy as np
import pytest
import torch

from utils.config import parse_config
from utils.dataset import DatasetBundle, collect_dataset, make_layouts
from utils.maze_env import EnvParams, MazeLayout
from utils.training import fit_prober, train_high, train_low

ROOMS = """
......
.####.
......
.####.
......
......
"""

TINY_CONFIG = {
    "seed": 3,
    "workers": 1,
    "env": {"grid_size": 6, "resolution": 16, "blob_sigma": 1.0},
    "data": {"train_layouts": 2, "test_layouts": 2, "episodes_per_layout": 3, "steps": 30,
             "heldout_episodes_per_layout": 2},
    "model": {"d_z": 8, "latent_shape": [2, 2, 2], "d_l": 2, "max_chunk": 5, "encoder_channels": [4, 4, 4],
              "encoder_hidden": 16, "low_hidden": 16, "high_hidden": 16, "action_hidden": 8,
              "prober_channels": [4, 4]},
    "train_low": {"epochs": 2, "batch_size": 4, "pred_T": 4, "windows_per_trajectory": 2},
    "train_high": {"epochs": 2, "batch_size": 4, "pred_T": 3, "stride": 5, "windows_per_trajectory": 2},
    "prober": {"epochs": 2, "batch_size": 16, "max_samples": 200},
    "planner": {
        "bands": {
            name: {
                "d_lo": lo,
                "d_hi": hi,
                "max_steps": 12,
                "flat": {"level": {"mppi": {"num_samples": 16, "horizon": 6, "num_iters": 2}}, "replan_every": 4},
                "hier": {
                    "high": {"mppi": {"num_samples": 16, "horizon": 2, "noise_sigma": 1.0, "action_bound": 3.0,
                                      "num_iters": 2}},
                    "low": {"mppi": {"num_samples": 16, "horizon": 4, "num_iters": 2}},
                    "replan_every": 4,
                },
            }
            for name, lo, hi in (("easy", 2, 4), ("medium", 5, 7))
        }
    },
    "bench": {
        "tasks_per_band": 2,
        "trials_per_task": 1,
        "horizons": [0, 1, 5, 10],
        "bootstrap_samples": 50,
        "latent_dims": [1, 2],
        "default_sweep": {"flat_samples": [8], "flat_horizons": [5], "hier_low_samples": [8],
                          "hier_high_samples": [8], "hier_high_horizons": [2]},
    },
}


def tiny_config():
    return parse_config(TINY_CONFIG)


@pytest.fixture
def rooms():
    return MazeLayout.from_text(ROOMS, layout_id="rooms")


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def env_params(config):
    return EnvParams.from_config(config.env)


@pytest.fixture
def additive():
    """Toy world model whose next latent is z + a"""
    return lambda z, a: z + a


@pytest.fixture(scope="session")
def tiny_bundle():
    config = tiny_config()
    env_params = EnvParams.from_config(config.env)
    layouts = make_layouts("train", config.data.train_layouts, config.env, config.seed)
    trajectories = collect_dataset(layouts, config.data.episodes_per_layout, config.data.steps,
                                   config.data.action_repeat, config.seed, env_params)
    return DatasetBundle(trajectories=trajectories, layouts={l.layout_id: l for l in layouts},
                         G=config.env.grid_size, resolution=env_params.resolution)


@pytest.fixture(scope="session")
def heldout_bundle():
    config = tiny_config()
    env_params = EnvParams.from_config(config.env)
    layouts = make_layouts("test", config.data.test_layouts, config.env, config.seed)
    trajectories = collect_dataset(layouts, config.data.heldout_episodes_per_layout, config.data.steps,
                                   config.data.action_repeat, config.seed, env_params)
    return DatasetBundle(trajectories=trajectories, layouts={l.layout_id: l for l in layouts},
                         G=config.env.grid_size, resolution=env_params.resolution)


@pytest.fixture(scope="session")
def trained(tiny_bundle):
    """Tiny two-level model: (params, low log, high log, prober metrics)"""
    config = tiny_config()
    env_params = EnvParams.from_config(config.env)
    torch.manual_seed(0)
    params, low_log = train_low(tiny_bundle, config, env_params)
    metrics = fit_prober(tiny_bundle, params, config, env_params)
    params, high_log = train_high(tiny_bundle, params, config, env_params)
    return params, low_log, high_log, metrics


@pytest.fixture
def rng():
    return np.random.default_rng(0)
