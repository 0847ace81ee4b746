"""End-to-end training at reduced and at desk scale, with closed-loop checks; run with `pytest -m slow`."""

import os
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from utils.bench import compute_sweep, evaluate, horizon_error_curve, sample_tasks
from utils.config import parse_config
from utils.dataset import DatasetBundle, collect_dataset, make_layouts
from utils.maze_env import EnvParams
from utils.models import encode_states, predict_low
from utils.planners import make_planner
from utils.training import fit_prober, train_high, train_low

pytestmark = pytest.mark.slow

REDUCED = {
    "seed": 1,
    "env": {"resolution": 32},
    "data": {"train_layouts": 4, "episodes_per_layout": 30},
    "train_low": {"epochs": 10, "batch_size": 64, "windows_per_trajectory": 2},
    "train_high": {"epochs": 15, "batch_size": 64, "windows_per_trajectory": 2},
    "prober": {"epochs": 10},
}


@pytest.fixture(scope="module")
def reduced_run():
    config = parse_config(REDUCED)
    env_params = EnvParams.from_config(config.env)
    layouts = make_layouts("train", config.data.train_layouts, config.env, config.seed)
    bundle = DatasetBundle(
        trajectories=collect_dataset(layouts, config.data.episodes_per_layout, config.data.steps,
                                     config.data.action_repeat, config.seed, env_params),
        layouts={l.layout_id: l for l in layouts}, G=config.env.grid_size, resolution=env_params.resolution,
    )
    torch.manual_seed(0)
    params, low_log = train_low(bundle, config, env_params)
    metrics = fit_prober(bundle, params, config, env_params)
    params, high_log = train_high(bundle, params, config, env_params)
    return params, low_log, high_log, metrics


def test_low_level_loss_decreases(reduced_run):
    _, low_log, _, _ = reduced_run
    assert low_log["total"].iloc[-3:].mean() < low_log["total"].iloc[:3].mean()


def test_high_level_loss_decreases(reduced_run):
    _, _, high_log, _ = reduced_run
    assert high_log["total"].iloc[-3:].mean() < high_log["total"].iloc[:3].mean()


def test_prober_beats_mean_position(reduced_run):
    _, _, _, metrics = reduced_run
    assert metrics["median_error_cells"] < metrics["baseline_median_error_cells"]


# -- desk scale: default config, 5 layouts x 200 episodes ---------------------


@pytest.fixture(scope="module")
def desk_run():
    config = parse_config({"seed": 1})
    env_params = EnvParams.from_config(config.env)
    train_layouts = make_layouts("train", config.data.train_layouts, config.env, config.seed)
    test_layouts = make_layouts("test", config.data.test_layouts, config.env, config.seed)
    bundle = DatasetBundle(
        trajectories=collect_dataset(train_layouts, config.data.episodes_per_layout, config.data.steps,
                                     config.data.action_repeat, config.seed, env_params),
        layouts={l.layout_id: l for l in train_layouts}, G=config.env.grid_size, resolution=env_params.resolution,
    )
    heldout = DatasetBundle(
        trajectories=collect_dataset(test_layouts, config.data.heldout_episodes_per_layout, config.data.steps,
                                     config.data.action_repeat, config.seed, env_params),
        layouts={l.layout_id: l for l in test_layouts}, G=config.env.grid_size, resolution=env_params.resolution,
    )
    torch.manual_seed(0)
    params, low_log = train_low(bundle, config, env_params)
    metrics = fit_prober(bundle, params, config, env_params)
    params, high_log = train_high(bundle, params, config, env_params)
    return SimpleNamespace(config=config, env_params=env_params, bundle=bundle, heldout=heldout, params=params,
                           low_log=low_log, high_log=high_log, prober=metrics)


def _band_tasks(run, name):
    band = run.config.band(name)
    return band, sample_tasks(list(run.heldout.layouts.values()), (band.d_lo, band.d_hi),
                              run.config.bench.tasks_per_band, run.config.seed, name,
                              run.config.bench.max_task_attempts)


def _evaluate(run, mode, band, tasks):
    return evaluate(tasks, make_planner(mode, band, run.params), run.params, run.heldout.layouts, band.max_steps,
                    run.config.planner.success_threshold, run.config.bench.trials_per_task, run.config.seed,
                    run.config.bench.subgoal_progress_ratio, run.env_params,
                    workers=max(1, os.cpu_count() or 1), train_layout_ids=run.bundle.layouts.keys())


def test_hierarchy_beats_flat_on_the_hard_band(desk_run):
    band, tasks = _band_tasks(desk_run, "hard")
    flat = _evaluate(desk_run, "flat", band, tasks)
    hier = _evaluate(desk_run, "hier", band, tasks)
    assert flat.episodes >= 60 and hier.episodes == flat.episodes
    assert hier.success_rate - flat.success_rate >= 0.15


def test_hierarchy_matches_best_flat_success_at_half_the_time(desk_run):
    band, tasks = _band_tasks(desk_run, "medium")
    sweep = compute_sweep(desk_run.config.bench.default_sweep, band, tasks, desk_run.params,
                          desk_run.heldout.layouts, desk_run.config.planner.success_threshold,
                          desk_run.config.bench.trials_per_task, desk_run.config.seed,
                          desk_run.config.bench.subgoal_progress_ratio, desk_run.env_params,
                          train_layout_ids=desk_run.bundle.layouts.keys())
    flat = sweep[sweep["planner"] == "flat"].sort_values(["success_rate", "mean_plan_ms"], ascending=[False, True])
    best = flat.iloc[0]
    hier = sweep[sweep["planner"] == "hier"]
    matching = hier[(hier["success_rate"] >= best["success_rate"])
                    & (hier["mean_plan_ms"] <= 0.5 * best["mean_plan_ms"])]
    assert len(matching) >= 1


def test_horizon_error_crosses_over(desk_run):
    stride = desk_run.config.train_high.stride
    curve = horizon_error_curve(desk_run.params, desk_run.heldout, [1, 2 * stride], stride,
                                desk_run.config.bench.bootstrap_samples, desk_run.config.seed,
                                desk_run.env_params).set_index("horizon")
    near, far = curve.loc[1], curve.loc[2 * stride]
    assert near["l1_low_hi"] < near["l1_high_lo"]
    assert far["l1_high_hi"] < far["l1_low_lo"]


def test_low_predictor_beats_copying_the_last_latent(desk_run):
    predicted, copied = [], []
    for traj in desk_run.heldout.trajectories:
        z = encode_states(traj.states, desk_run.heldout.layouts[traj.layout_id], desk_run.params,
                          desk_run.env_params)
        with torch.no_grad():
            pred = predict_low(z[:-1], torch.from_numpy(traj.actions), desk_run.params)
        predicted.append((pred - z[1:]).abs().sum(dim=-1))
        copied.append((z[:-1] - z[1:]).abs().sum(dim=-1))
    assert float(torch.cat(predicted).mean()) < float(torch.cat(copied).mean())


def test_rollout_loss_drops_fivefold(desk_run):
    l_roll = desk_run.low_log["l_roll"]
    assert l_roll.iloc[-1] * 5.0 <= l_roll.iloc[0]


def test_trained_latents_do_not_collapse(desk_run):
    states = np.concatenate([t.states for t in desk_run.heldout.trajectories if t.layout_id == "test-0"])
    z = encode_states(states, desk_run.heldout.layouts["test-0"], desk_run.params, desk_run.env_params)
    assert float(z.std(dim=0).mean()) > 0.1


def test_prober_locates_the_agent_within_half_a_cell(desk_run):
    assert desk_run.prober["median_error_cells"] < 0.5
