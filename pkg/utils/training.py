"""Minibatch Adam training for the low-level model, the high-level model and the prober."""

import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from utils import ndcompute as nd
from utils.config import RunConfig, derive_seed
from utils.dataset import DatasetBundle
from utils.errors import ChunkTooLongError, DatasetError, NonFiniteLossError, TrajectoryTooShortError
from utils.losses import loss_total_high, loss_total_low
from utils.maze_env import EnvParams, render_batch
from utils.models import (
    WorldModelParams,
    attach_high_level,
    build_world_model,
    encode_action_chunks,
    encode_states,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "l_tf", "l_roll", "vicreg", "proprio", "total"]


def _require_data(bundle: DatasetBundle):
    if not bundle.trajectories:
        raise DatasetError("cannot train on an empty dataset")


def _render_rows(bundle: DatasetBundle, rows: Sequence[Tuple[int, np.ndarray]], env_params: EnvParams):
    """rows of (trajectory index, state indices) -> flat images, proprio and (B, L, 4) states"""
    states = np.stack([bundle.trajectories[i].states[idx] for i, idx in rows])
    B, L = states.shape[:2]
    res = env_params.resolution
    images = np.empty((B, L, 3, res, res), dtype=np.float32)
    proprio = np.empty((B, L, 2), dtype=np.float32)
    by_layout = defaultdict(list)
    for b, (i, _) in enumerate(rows):
        by_layout[bundle.trajectories[i].layout_id].append(b)
    for layout_id, members in by_layout.items():
        imgs, prop = render_batch(states[members].reshape(-1, 4), bundle.layouts[layout_id], env_params)
        images[members] = imgs.reshape(len(members), L, 3, res, res)
        proprio[members] = prop.reshape(len(members), L, 2)
    return (torch.from_numpy(images.reshape(B * L, 3, res, res)),
            torch.from_numpy(proprio.reshape(B * L, 2)),
            torch.from_numpy(states))


def _epoch_row(epoch: int, sums: Dict[str, float], count: int) -> Dict[str, float]:
    row = {"epoch": epoch}
    row.update({name: sums[name] / max(count, 1) for name in LOG_COLUMNS[1:]})
    return row


def _step(named, state: nd.OptimizerState, breakdown, epoch: int, batch: int, tape: nd.Tape) -> Dict[str, float]:
    values = breakdown.as_floats()
    if not breakdown.is_finite():
        raise NonFiniteLossError(epoch, batch, values)
    grads = tape.backward(breakdown.total, named)
    nd.adam_step(named, grads, state)
    return values


def train_low(bundle: DatasetBundle, config: RunConfig, env_params: Optional[EnvParams] = None,
              seed: Optional[int] = None) -> Tuple[WorldModelParams, pd.DataFrame]:
    """Jointly train encoder, low-level predictor and proprio head on random windows of pred_T steps"""
    _require_data(bundle)
    cfg = config.train_low
    seed = config.seed if seed is None else seed
    env_params = env_params or EnvParams.from_config(config.env)
    usable = [i for i, traj in enumerate(bundle.trajectories) if len(traj) >= cfg.pred_T]
    if not usable:
        raise TrajectoryTooShortError(f"no trajectory holds a window of {cfg.pred_T} steps")

    params = build_world_model(config.model, derive_seed(seed, "init/low"), env_params.resolution,
                               train_low=cfg, train_high=config.train_high)
    named = params.low_parameters()
    state = nd.OptimizerState(list(named.values()), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(seed, "train/low"))
    span = np.arange(cfg.pred_T + 1)
    rows = []

    for epoch in range(1, cfg.epochs + 1):
        windows = [
            (i, int(rng.integers(0, len(bundle.trajectories[i]) - cfg.pred_T + 1)))
            for i in usable
            for _ in range(cfg.windows_per_trajectory)
        ]
        order = rng.permutation(len(windows))
        sums, count = defaultdict(float), 0
        for batch, offset in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [windows[k] for k in order[offset:offset + cfg.batch_size]]
            images, proprio, states = _render_rows(bundle, [(i, s + span) for i, s in chosen], env_params)
            actions = torch.from_numpy(
                np.stack([bundle.trajectories[i].actions[s:s + cfg.pred_T] for i, s in chosen])
            )
            with nd.Tape() as tape:
                z = params.encoder(images, proprio).reshape(len(chosen), len(span), params.d_z)
                breakdown = loss_total_low(z, actions, states, params, cfg)
                values = _step(named, state, breakdown, epoch, batch, tape)
            for name, value in values.items():
                sums[name] += value * len(chosen)
            count += len(chosen)
        row = _epoch_row(epoch, sums, count)
        rows.append(row)
        logger.info("low epoch %d/%d: l_tf=%.4f l_roll=%.4f vicreg=%.4f proprio=%.4f total=%.4f",
                    epoch, cfg.epochs, row["l_tf"], row["l_roll"], row["vicreg"], row["proprio"], row["total"])

    params.eval()
    return params, pd.DataFrame(rows, columns=LOG_COLUMNS)


def latent_action_std(bundle: DatasetBundle, params: WorldModelParams, stride: int) -> List[float]:
    """Per-dimension std of the latent actions of every stride-aligned training chunk"""
    chunks = []
    for traj in bundle.trajectories:
        for s in range(0, len(traj) - stride + 1, stride):
            chunks.append(traj.actions[s:s + stride])
    if len(chunks) < 2:
        return [1.0] * params.d_l
    with torch.no_grad():
        latents = encode_action_chunks(torch.from_numpy(np.stack(chunks)), params)
    return [float(v) for v in latents.std(dim=0, unbiased=True)]


def train_high(bundle: DatasetBundle, params: WorldModelParams, config: RunConfig,
               env_params: Optional[EnvParams] = None, seed: Optional[int] = None,
               d_l: Optional[int] = None) -> Tuple[WorldModelParams, pd.DataFrame]:
    """Train the action encoder and high-level predictor on fixed-stride waypoints; the encoder stays frozen"""
    _require_data(bundle)
    cfg = config.train_high
    seed = config.seed if seed is None else seed
    env_params = env_params or EnvParams.from_config(config.env)
    if cfg.stride > params.model_config.max_chunk:
        raise ChunkTooLongError(f"stride {cfg.stride} exceeds max_chunk {params.model_config.max_chunk}")
    span = (cfg.pred_T - 1) * cfg.stride
    usable = [i for i, traj in enumerate(bundle.trajectories) if len(traj) >= span]
    if not usable:
        raise TrajectoryTooShortError(f"no trajectory holds {cfg.pred_T} waypoints at stride {cfg.stride}")

    attach_high_level(params, derive_seed(seed, "init/high"), d_l)
    params.train_high = cfg
    named = params.high_parameters()
    state = nd.OptimizerState(list(named.values()), lr=cfg.lr)
    rng = np.random.default_rng(derive_seed(seed, "train/high"))
    offsets = cfg.stride * np.arange(cfg.pred_T)
    rows = []

    for epoch in range(1, cfg.epochs + 1):
        windows = [
            (i, int(rng.integers(0, len(bundle.trajectories[i]) - span + 1)))
            for i in usable
            for _ in range(cfg.windows_per_trajectory)
        ]
        order = rng.permutation(len(windows))
        sums, count = defaultdict(float), 0
        for batch, offset in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [windows[k] for k in order[offset:offset + cfg.batch_size]]
            images, proprio, states = _render_rows(bundle, [(i, s + offsets) for i, s in chosen], env_params)
            chunks = torch.from_numpy(np.stack([
                bundle.trajectories[i].actions[s:s + span].reshape(cfg.pred_T - 1, cfg.stride, 2)
                for i, s in chosen
            ]))
            with torch.no_grad():
                z = params.encoder(images, proprio).reshape(len(chosen), cfg.pred_T, params.d_z)
            with nd.Tape() as tape:
                latent_actions = encode_action_chunks(chunks, params)
                breakdown = loss_total_high(z, latent_actions, states, params, cfg)
                values = _step(named, state, breakdown, epoch, batch, tape)
            for name, value in values.items():
                sums[name] += value * len(chosen)
            count += len(chosen)
        row = _epoch_row(epoch, sums, count)
        rows.append(row)
        logger.info("high epoch %d/%d: l_tf=%.4f l_roll=%.4f proprio=%.4f total=%.4f",
                    epoch, cfg.epochs, row["l_tf"], row["l_roll"], row["proprio"], row["total"])

    params.latent_action_std = latent_action_std(bundle, params, cfg.stride)
    params.eval()
    return params, pd.DataFrame(rows, columns=LOG_COLUMNS)


def _probe_samples(bundle: DatasetBundle, limit: int, rng: np.random.Generator):
    pairs = [(t, k) for t, traj in enumerate(bundle.trajectories) for k in range(len(traj.states))]
    if len(pairs) > limit:
        pairs = [pairs[j] for j in np.sort(rng.choice(len(pairs), size=limit, replace=False))]
    return pairs


def fit_prober(bundle: DatasetBundle, params: WorldModelParams, config: RunConfig,
               env_params: Optional[EnvParams] = None, seed: Optional[int] = None) -> Dict[str, float]:
    """Regress (x, y) from frozen latents; returns held-out median errors in cells"""
    _require_data(bundle)
    cfg = config.prober
    seed = config.seed if seed is None else seed
    env_params = env_params or EnvParams.from_config(config.env)
    rng = np.random.default_rng(derive_seed(seed, "train/prober"))

    pairs = _probe_samples(bundle, cfg.max_samples, rng)
    states = np.stack([bundle.trajectories[t].states[k] for t, k in pairs])
    layout_ids = [bundle.trajectories[t].layout_id for t, _ in pairs]
    z = torch.empty((len(pairs), params.d_z))
    for layout_id in sorted(set(layout_ids)):
        members = [j for j, lid in enumerate(layout_ids) if lid == layout_id]
        z[members] = encode_states(states[members], bundle.layouts[layout_id], params, env_params)
    positions = torch.from_numpy(states[:, :2].copy())

    order = rng.permutation(len(pairs))
    n_heldout = max(1, int(round(cfg.heldout_fraction * len(pairs)))) if cfg.heldout_fraction > 0 else 0
    heldout, train = order[:n_heldout], order[n_heldout:]

    named = params.named_parameters(("prober",))
    state = nd.OptimizerState(list(named.values()), lr=cfg.lr)
    for epoch in range(1, cfg.epochs + 1):
        shuffled = rng.permutation(train)
        total, count = 0.0, 0
        for offset in range(0, len(shuffled), cfg.batch_size):
            idx = torch.from_numpy(shuffled[offset:offset + cfg.batch_size])
            with nd.Tape() as tape:
                loss = nd.mse_loss(params.prober(z[idx]), positions[idx])
                grads = tape.backward(loss, named)
            nd.adam_step(named, grads, state)
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        logger.debug("prober epoch %d/%d: mse=%.4f", epoch, cfg.epochs, total / max(count, 1))

    metrics = {"samples": float(len(pairs)), "heldout": float(len(heldout))}
    if len(heldout):
        cell = bundle.layouts[layout_ids[0]].cell_size
        idx = torch.from_numpy(heldout)
        with torch.no_grad():
            errors = torch.linalg.norm(params.prober(z[idx]) - positions[idx], dim=-1) / cell
        mean_position = positions[torch.from_numpy(train)].mean(dim=0) if len(train) else positions.mean(dim=0)
        baseline = torch.linalg.norm(positions[idx] - mean_position, dim=-1) / cell
        metrics["median_error_cells"] = float(errors.median())
        metrics["baseline_median_error_cells"] = float(baseline.median())
        logger.info("prober held-out median error %.3f cells (mean-position baseline %.3f)",
                    metrics["median_error_cells"], metrics["baseline_median_error_cells"])
    params.prober.eval()
    return metrics
