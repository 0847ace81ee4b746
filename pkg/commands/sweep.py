"""sweep: success rate against planning time over a grid of planner budgets."""

import json
import logging
import os

from commands import write_frame
from commands.gen_data import HELDOUT_FILE
from utils.bench import compute_sweep, sample_tasks
from utils.checkpoints import CheckpointManager
from utils.config import RunConfig, SweepGrid, config_hash, resolve_data_dir, resolve_out_dir
from utils.dataset import DatasetManager
from utils.errors import ConfigError, MissingFileError
from utils.maze_env import EnvParams

logger = logging.getLogger(__name__)


def load_grid(path) -> SweepGrid:
    if not os.path.exists(path):
        raise MissingFileError(f"grid file not found: {path}")
    with open(path, "r") as f:
        try:
            return SweepGrid.model_validate(json.load(f))
        except (json.JSONDecodeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def run(args, config: RunConfig) -> int:
    grid = load_grid(args.grid_file) if args.grid_file else config.bench.default_sweep
    out_dir = resolve_out_dir(args.out_dir, "results")
    data_dir = resolve_data_dir()
    env_params = EnvParams.from_config(config.env)
    run_hash = config_hash(config)

    checkpoints = CheckpointManager(args.models or "models")
    params = checkpoints.load()
    heldout = DatasetManager(data_dir).load_dataset(args.data or os.path.join(data_dir, HELDOUT_FILE))
    band = config.band(args.band)
    tasks = sample_tasks(list(heldout.layouts.values()), (band.d_lo, band.d_hi), config.bench.tasks_per_band,
                         config.seed, args.band, config.bench.max_task_attempts)

    # always single-worker, --workers is ignored here
    frame = compute_sweep(grid, band, tasks, params, heldout.layouts, config.planner.success_threshold,
                          config.bench.trials_per_task, config.seed, config.bench.subgoal_progress_ratio,
                          env_params, run_hash, checkpoints.train_layout_ids())
    frame = frame.assign(band=args.band)
    write_frame(frame, out_dir, "sweep.csv")
    write_frame(frame[frame["pareto"]] if "pareto" in frame else frame, out_dir, "pareto.csv")
    return 0
