"""bench: evaluate flat and hierarchical MPC per band and write the benchmark tables."""

import json
import logging
import os

import pandas as pd

from commands import write_frame
from commands.gen_data import HELDOUT_FILE, TRAIN_FILE
from utils.bench import (
    compute_sweep,
    evaluate,
    horizon_error_curve,
    latent_dim_sweep,
    offline_plan_metric,
    sample_tasks,
)
from utils.checkpoints import CheckpointManager
from utils.config import RunConfig, config_hash, resolve_data_dir, resolve_out_dir, resolve_workers, save_config
from utils.dataset import DatasetManager
from utils.maze_env import EnvParams
from utils.planners import make_planner

logger = logging.getLogger(__name__)

PLANNER_MODES = ("flat", "hier")


def run(args, config: RunConfig) -> int:
    out_dir = resolve_out_dir(args.out_dir, "results")
    models_dir = args.models or "models"
    data_dir = resolve_data_dir()
    workers = resolve_workers(args.workers, config)
    env_params = EnvParams.from_config(config.env)
    run_hash = config_hash(config)
    bands = list(config.planner.bands) if args.band == "all" else [args.band]

    checkpoints = CheckpointManager(models_dir)
    params = checkpoints.load()
    train_ids = checkpoints.train_layout_ids()
    heldout = DatasetManager(data_dir).load_dataset(args.data or os.path.join(data_dir, HELDOUT_FILE))
    layouts = heldout.layouts
    os.makedirs(out_dir, exist_ok=True)
    save_config(config, os.path.join(out_dir, "config.json"))

    modes = [m for m in PLANNER_MODES if m == "flat" or params.has_high]
    if "hier" not in modes:
        logger.warning("no high-level checkpoint in %s; evaluating the flat planner only", models_dir)

    records, timings, summary_rows, sweeps, offline = [], [], [], [], {}
    for band_name in bands:
        band = config.band(band_name)
        tasks = sample_tasks(list(layouts.values()), (band.d_lo, band.d_hi), config.bench.tasks_per_band,
                             config.seed, band_name, config.bench.max_task_attempts)
        logger.info("band %s: %d tasks in D=[%d, %d]", band_name, len(tasks), band.d_lo, band.d_hi)
        for mode in modes:
            planner = make_planner(mode, band, params)
            summary = evaluate(tasks, planner, params, layouts, band.max_steps, config.planner.success_threshold,
                               config.bench.trials_per_task, config.seed, config.bench.subgoal_progress_ratio,
                               env_params, run_hash, workers, train_ids, os.path.join(out_dir, "traces", band_name))
            records.append(summary.records_frame())
            timings.append(summary.timing_frame())
            summary_rows.append({"band": band_name, "planner": mode, "episodes": summary.episodes,
                                 "success_rate": summary.success_rate, "ci_lo": summary.ci_lo,
                                 "ci_hi": summary.ci_hi, "valid_plan_rate": summary.valid_plan_rate,
                                 "config_hash": run_hash})
            offline[f"{band_name}/{mode}"] = offline_plan_metric(tasks, planner, params, layouts, env_params,
                                                                 config.bench.expert_cells, config.seed)
        if not args.skip_sweep:
            sweep = compute_sweep(config.bench.default_sweep, band, tasks, params, layouts,
                                  config.planner.success_threshold, config.bench.trials_per_task, config.seed,
                                  config.bench.subgoal_progress_ratio, env_params, run_hash, train_ids)
            sweeps.append(sweep.assign(band=band_name))

    write_frame(pd.concat(records, ignore_index=True) if records else pd.DataFrame(), out_dir, "results.csv")
    write_frame(pd.concat(timings, ignore_index=True) if timings else pd.DataFrame(), out_dir, "timing.csv")
    write_frame(pd.DataFrame(summary_rows), out_dir, "summary.csv")
    sweep = pd.concat(sweeps, ignore_index=True) if sweeps else pd.DataFrame()
    write_frame(sweep, out_dir, "sweep.csv")
    write_frame(sweep[sweep["pareto"]] if "pareto" in sweep else sweep, out_dir, "pareto.csv")

    curve = horizon_error_curve(params, heldout, config.bench.horizons, config.train_high.stride,
                                config.bench.bootstrap_samples, config.seed, env_params, run_hash)
    write_frame(curve, out_dir, "horizon_curve.csv")

    with open(os.path.join(out_dir, "offline_metric.json"), "w") as f:
        json.dump({"config_hash": run_hash, "metrics": offline}, f, indent=2, sort_keys=True)

    if args.latent_dims:
        train = DatasetManager(data_dir).load_dataset(os.path.join(data_dir, TRAIN_FILE))
        low = checkpoints.load(include_high=False)
        band = config.band(bands[-1])
        tasks = sample_tasks(list(layouts.values()), (band.d_lo, band.d_hi), config.bench.tasks_per_band,
                             config.seed, bands[-1], config.bench.max_task_attempts)
        dims = latent_dim_sweep(config.bench.latent_dims, train, low, config, tasks, layouts, band, env_params,
                                run_hash, train_ids)
        write_frame(dims, out_dir, "latent_dims.csv")
    return 0
