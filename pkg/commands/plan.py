"""plan: one plan from a start cell toward a goal cell, printed as JSON on stdout."""

import json
import logging

import numpy as np
import torch

from commands import parse_cell
from utils.checkpoints import CheckpointManager
from utils.config import RunConfig, config_hash, derive_seed
from utils.dataset import DatasetManager
from utils.errors import ConfigError
from utils.maze_env import EnvParams, EnvState
from utils.models import probe
from utils.planners import make_planner, observe_latent

logger = logging.getLogger(__name__)


def run(args, config: RunConfig) -> int:
    models_dir = args.models or "models"
    params = CheckpointManager(models_dir).load(require_high=args.mode == "hier")
    layout = DatasetManager(".").load_layout(args.layout, cell_size=config.env.cell_size)
    env_params = EnvParams.from_config(config.env)

    start, goal = parse_cell(args.start), parse_cell(args.goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not layout.is_free(cell):
            raise ConfigError(f"{name} cell {cell} is not a free cell of {args.layout}")

    planner = make_planner(args.mode, config.band(args.band), params)
    z = observe_latent(EnvState(position=layout.cell_center(start)), layout, params, env_params)
    z_goal = observe_latent(EnvState(position=layout.cell_center(goal)), layout, params, env_params)
    result = planner.plan(z, z_goal, derive_seed(config.seed, "plan/0"))

    document = result.to_dict()
    document.update({"mode": args.mode, "band": args.band, "start": list(start), "goal": list(goal),
                     "config_hash": config_hash(config)})
    if result.subgoal_latents:
        with torch.no_grad():
            probes = probe(torch.as_tensor(np.stack(result.subgoal_latents)), params)
        document["subgoal_probes"] = probes.numpy().astype(np.float64).tolist()
    print(json.dumps(document))
    return 0
