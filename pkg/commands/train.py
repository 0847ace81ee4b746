"""train: fit the low-level model (plus prober) or the high-level model on top of it."""

import logging
import os

from commands.gen_data import TRAIN_FILE
from utils.checkpoints import CheckpointManager
from utils.config import RunConfig, config_hash, resolve_data_dir
from utils.dataset import DatasetManager
from utils.errors import DatasetError
from utils.maze_env import EnvParams
from utils.training import fit_prober, train_high, train_low

logger = logging.getLogger(__name__)


def run(args, config: RunConfig) -> int:
    data_path = args.data or os.path.join(resolve_data_dir(), TRAIN_FILE)
    out_dir = args.out or "models"
    env_params = EnvParams.from_config(config.env)
    manager = DatasetManager(os.path.dirname(data_path) or ".")
    bundle = manager.load_dataset(data_path)
    if bundle.resolution != env_params.resolution:
        raise DatasetError(f"dataset rendered at {bundle.resolution}px, config expects {env_params.resolution}px")
    digest = manager.dataset_digest(data_path)
    run_hash = config_hash(config)
    checkpoints = CheckpointManager(out_dir)

    if args.level == "low":
        params, log = train_low(bundle, config, env_params)
        metrics = fit_prober(bundle, params, config, env_params)
        checkpoints.save_low(params, run_hash, bundle.layouts.keys(), digest, env_params.resolution, log, metrics)
        return 0

    params = checkpoints.load(include_high=False)
    low_meta = checkpoints.read_low_sidecar()
    if low_meta.get("dataset_digest") and low_meta["dataset_digest"] != digest:
        logger.warning("high-level data %s differs from the low-level training data", data_path)
    params, log = train_high(bundle, params, config, env_params)
    checkpoints.save_high(params, run_hash, digest, log)
    return 0
