"""gen-data: generate train/test layouts and collect the offline datasets."""

import logging
import os

from utils.config import RunConfig, resolve_data_dir, resolve_workers
from utils.dataset import DatasetManager, collect_dataset, make_layouts
from utils.maze_env import EnvParams

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.hwmd"
HELDOUT_FILE = "heldout.hwmd"


def run(args, config: RunConfig) -> int:
    out_dir = args.out or resolve_data_dir()
    workers = resolve_workers(args.workers, config)
    env_params = EnvParams.from_config(config.env)
    manager = DatasetManager(out_dir)

    train_layouts = make_layouts("train", config.data.train_layouts, config.env, config.seed)
    test_layouts = make_layouts("test", config.data.test_layouts, config.env, config.seed)
    for layout in train_layouts + test_layouts:
        manager.save_layout(layout, os.path.join(out_dir, "layouts", f"{layout.layout_id}.txt"))

    train = collect_dataset(train_layouts, config.data.episodes_per_layout, config.data.steps,
                            config.data.action_repeat, config.seed, env_params, workers)
    manager.save_dataset(TRAIN_FILE, train, train_layouts, env_params.resolution)

    heldout = collect_dataset(test_layouts, config.data.heldout_episodes_per_layout, config.data.steps,
                              config.data.action_repeat, config.seed, env_params, workers)
    manager.save_dataset(HELDOUT_FILE, heldout, test_layouts, env_params.resolution)

    for filename in (TRAIN_FILE, HELDOUT_FILE):
        logger.info("%s digest %s", filename, manager.dataset_digest(filename))
    return 0
