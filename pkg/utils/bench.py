"""Benchmark harness: task sampling, closed-loop evaluation, compute sweeps and offline diagnostics.

Every table is a pandas DataFrame carrying a `config_hash` column so an
artifact can be traced back to the run that produced it.
"""

import copy
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import stats

from utils import ndcompute as nd
from utils.config import BandConfig, RunConfig, SweepGrid, derive_seed
from utils.dataset import DatasetBundle
from utils.errors import LayoutOverlapError
from utils.maze_env import EnvParams, EnvState, MazeLayout, distance_map, shortest_path
from utils.models import WorldModelParams, encode_action_chunk, encode_states, predict_high, rollout_low
from utils.planners import EpisodeRecord, FlatPlanner, HierarchicalPlanner, mpc_run, observe_latent
from utils.training import train_high

logger = logging.getLogger(__name__)

# results.csv holds only seed-determined fields; wall-clock times go to timing.csv
RESULT_COLUMNS = [
    "task_id", "layout_id", "band", "distance", "trial", "planner", "success", "steps",
    "plans", "final_distance", "valid_plan_rate", "config_hash",
]
TIMING_COLUMNS = ["task_id", "band", "trial", "planner", "plan_index", "plan_ms", "config_hash"]


@dataclass
class TaskSpec:
    task_id: str
    layout_id: str
    start_cell: Tuple[int, int]
    goal_cell: Tuple[int, int]
    start_state: List[float]
    goal_position: List[float]
    distance: int
    seed: int
    band: str = ""

    def start(self) -> EnvState:
        return EnvState.from_vector(self.start_state)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BenchmarkRecord:
    task_id: str
    layout_id: str
    band: str
    distance: int
    trial: int
    planner: str
    success: bool
    steps: int
    plans: int
    total_plan_ms: float
    mean_plan_ms: float
    final_distance: float
    valid_plan_rate: float
    config_hash: str = ""
    plan_ms: List[float] = field(default_factory=list)


@dataclass
class EvaluationSummary:
    planner: str
    episodes: int
    successes: int
    success_rate: float
    ci_lo: float
    ci_hi: float
    mean_plan_ms: float
    valid_plan_rate: float
    records: List[BenchmarkRecord] = field(default_factory=list)

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=RESULT_COLUMNS)

    def timing_frame(self) -> pd.DataFrame:
        """One row per plan with its wall-clock time"""
        rows = [
            {"task_id": r.task_id, "band": r.band, "trial": r.trial, "planner": r.planner, "plan_index": i,
             "plan_ms": ms, "config_hash": r.config_hash}
            for r in self.records
            for i, ms in enumerate(r.plan_ms)
        ]
        return pd.DataFrame(rows, columns=TIMING_COLUMNS)


def wilson_interval(successes: int, total: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion; (0, 1) when total is 0"""
    if total <= 0:
        return 0.0, 1.0
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    phat = successes / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = (phat + z2 / (2.0 * total)) / denom
    margin = z * math.sqrt(phat * (1.0 - phat) / total + z2 / (4.0 * total * total)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - margin)
    hi = 1.0 if successes == total else min(1.0, center + margin)
    return lo, hi


# -- tasks --------------------------------------------------------------------


def _band_pairs(layout: MazeLayout, d_lo: int, d_hi: int) -> int:
    count = 0
    for cell in layout.free_cells():
        count += sum(1 for d in distance_map(layout, cell).values() if d_lo <= d <= d_hi)
    return count


def sample_tasks(layouts: Sequence[MazeLayout], band: Tuple[int, int], count: int, seed: int,
                 band_name: str = "", max_attempts: int = 10_000) -> List[TaskSpec]:
    """Rejection-sample free start/goal cells until their grid distance falls in the band

    Tasks are spread round-robin over the layouts that can satisfy the band;
    the others are skipped with a warning.
    """
    d_lo, d_hi = band
    if count <= 0:
        return []
    feasible = []
    for layout in layouts:
        if _band_pairs(layout, d_lo, d_hi) == 0:
            logger.warning("layout %s has no start/goal pair with distance in [%d, %d]; skipping",
                           layout.layout_id, d_lo, d_hi)
        else:
            feasible.append(layout)
    if not feasible:
        return []

    tasks = []
    for i in range(count):
        layout = feasible[i % len(feasible)]
        task_seed = derive_seed(seed, f"task/{band_name}/{i}")
        rng = np.random.default_rng(task_seed)
        cells = layout.free_cells()
        for _ in range(max_attempts):
            start_cell = cells[rng.integers(len(cells))]
            goal_cell = cells[rng.integers(len(cells))]
            distance = distance_map(layout, start_cell).get(goal_cell)
            if distance is not None and d_lo <= distance <= d_hi:
                break
        else:
            logger.warning("task %d on %s: no pair in band after %d attempts", i, layout.layout_id, max_attempts)
            continue
        position = (np.asarray(start_cell) + rng.uniform(0.25, 0.75, size=2)) * layout.cell_size
        tasks.append(TaskSpec(
            task_id=f"{band_name or 'band'}-{i}",
            layout_id=layout.layout_id,
            start_cell=tuple(int(c) for c in start_cell),
            goal_cell=tuple(int(c) for c in goal_cell),
            start_state=[float(position[0]), float(position[1]), 0.0, 0.0],
            goal_position=[float(v) for v in layout.cell_center(goal_cell)],
            distance=int(distance),
            seed=int(task_seed),
            band=band_name,
        ))
    return tasks


def check_disjoint(eval_layout_ids: Iterable[str], train_layout_ids: Iterable[str]) -> None:
    overlap = set(eval_layout_ids) & set(train_layout_ids)
    if overlap:
        raise LayoutOverlapError(f"evaluation layouts overlap training layouts: {sorted(overlap)}")


# -- evaluation ---------------------------------------------------------------


@dataclass
class EpisodeJob:
    task: TaskSpec
    trial: int
    layout: MazeLayout
    planner: object
    params: WorldModelParams
    max_steps: int
    success_threshold: float
    progress_ratio: float
    env_params: EnvParams
    seed: int


def _init_worker():
    torch.set_num_threads(1)


def _run_episode(job: EpisodeJob) -> EpisodeRecord:
    return mpc_run(job.layout, job.task.start(), np.asarray(job.task.goal_position), job.planner, job.params,
                   max_steps=job.max_steps, success_threshold=job.success_threshold, seed=job.seed,
                   env_params=job.env_params, progress_ratio=job.progress_ratio)


def _run_jobs(jobs: List[EpisodeJob], workers: int) -> List[EpisodeRecord]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
            return list(pool.map(_run_episode, jobs))
    return [_run_episode(job) for job in jobs]


def evaluate(tasks: Sequence[TaskSpec], planner, params: WorldModelParams, layouts: Dict[str, MazeLayout],
             max_steps: int, success_threshold: float = 0.5, trials: int = 1, seed: int = 0,
             progress_ratio: float = 0.5, env_params: EnvParams = EnvParams(), config_hash: str = "",
             workers: int = 1, train_layout_ids: Optional[Iterable[str]] = None,
             trace_dir: Optional[str] = None) -> EvaluationSummary:
    """Run every task `trials` times in closed loop and aggregate with a 95% Wilson interval"""
    if train_layout_ids is not None:
        check_disjoint((t.layout_id for t in tasks), train_layout_ids)
    mode = getattr(planner, "mode", "custom")
    jobs = [
        EpisodeJob(task, trial, layouts[task.layout_id], planner, params, max_steps, success_threshold,
                   progress_ratio, env_params, derive_seed(seed, f"episode/{task.task_id}/{trial}"))
        for task in tasks
        for trial in range(trials)
    ]
    episodes = _run_jobs(jobs, workers)

    records = []
    for job, episode in zip(jobs, episodes):
        valid = float(np.mean(episode.plan_valid)) if episode.plan_valid else float("nan")
        records.append(BenchmarkRecord(
            task_id=job.task.task_id, layout_id=job.task.layout_id, band=job.task.band,
            distance=job.task.distance, trial=job.trial, planner=mode, success=bool(episode.success),
            steps=episode.steps, plans=episode.plans, total_plan_ms=episode.total_plan_ms,
            mean_plan_ms=episode.mean_plan_ms, final_distance=episode.final_distance,
            valid_plan_rate=valid, config_hash=config_hash, plan_ms=list(episode.plan_ms),
        ))
        logger.info("%s %s trial %d: %s in %d steps (%d plans, %.1f ms/plan)", mode, job.task.task_id, job.trial,
                    "success" if episode.success else "failure", episode.steps, episode.plans, episode.mean_plan_ms)
        if trace_dir:
            write_trace(trace_dir, mode, job.task, job.trial, episode, config_hash)

    successes = sum(r.success for r in records)
    lo, hi = wilson_interval(successes, len(records))
    plan_ms = [r.mean_plan_ms for r in records if r.plans]
    flags = [v for e in episodes for v in e.plan_valid]
    return EvaluationSummary(
        planner=mode,
        episodes=len(records),
        successes=successes,
        success_rate=successes / len(records) if records else 0.0,
        ci_lo=lo,
        ci_hi=hi,
        mean_plan_ms=float(np.mean(plan_ms)) if plan_ms else 0.0,
        valid_plan_rate=float(np.mean(flags)) if flags else float("nan"),
        records=records,
    )


def write_trace(trace_dir: str, mode: str, task: TaskSpec, trial: int, episode: EpisodeRecord,
                config_hash: str) -> str:
    os.makedirs(trace_dir, exist_ok=True)
    path = os.path.join(trace_dir, f"{mode}_{task.task_id}_{trial}.json")
    with open(path, "w") as f:
        json.dump({"config_hash": config_hash, "planner": mode, "trial": trial, "task": task.to_dict(),
                   "episode": episode.to_dict(include_timing=False)}, f)
    return path


# -- compute sweep ------------------------------------------------------------


def sweep_configs(grid: SweepGrid, band: BandConfig) -> List[Tuple[str, dict, object]]:
    """(planner mode, row description, planner config) for every grid point

    Only the optimizer each level actually runs is resized.
    """
    out = []
    for samples in grid.flat_samples:
        for horizon in grid.flat_horizons:
            cfg = band.flat.model_copy(update={"level": band.flat.level.with_budget(samples, horizon)})
            out.append(("flat", {"samples": samples, "horizon": horizon}, cfg))
    for low_samples in grid.hier_low_samples:
        for high_samples in grid.hier_high_samples:
            for high_horizon in grid.hier_high_horizons:
                cfg = band.hier.model_copy(update={
                    "low": band.hier.low.with_budget(low_samples),
                    "high": band.hier.high.with_budget(high_samples, high_horizon),
                })
                out.append(("hier", {"low_samples": low_samples, "high_samples": high_samples,
                                     "high_horizon": high_horizon}, cfg))
    return out


def pareto_flags(times: Sequence[float], successes: Sequence[float]) -> List[bool]:
    """True for rows no other row beats on both lower time and higher success"""
    flags = []
    for i, (t_i, s_i) in enumerate(zip(times, successes)):
        dominated = any(
            t_j <= t_i and s_j >= s_i and (t_j < t_i or s_j > s_i)
            for j, (t_j, s_j) in enumerate(zip(times, successes))
            if j != i
        )
        flags.append(not dominated)
    return flags


def compute_sweep(grid: SweepGrid, band: BandConfig, tasks: Sequence[TaskSpec], params: WorldModelParams,
                  layouts: Dict[str, MazeLayout], success_threshold: float = 0.5, trials: int = 1, seed: int = 0,
                  progress_ratio: float = 0.5, env_params: EnvParams = EnvParams(), config_hash: str = "",
                  train_layout_ids: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """Evaluate every grid point single-worker and flag the success-vs-time Pareto frontier"""
    rows = []
    for index, (mode, description, cfg) in enumerate(sweep_configs(grid, band)):
        if mode == "hier" and not params.has_high:
            continue
        planner = FlatPlanner(cfg, params) if mode == "flat" else HierarchicalPlanner(cfg, params)
        summary = evaluate(tasks, planner, params, layouts, band.max_steps, success_threshold, trials, seed,
                           progress_ratio, env_params, config_hash, workers=1, train_layout_ids=train_layout_ids)
        budget = cfg.level.budget if mode == "flat" else cfg.high.budget + cfg.low.budget
        row = {"config_id": index, "planner": mode, "samples": None, "horizon": None, "low_samples": None,
               "high_samples": None, "high_horizon": None}
        row.update(description)
        row.update({"budget": budget, "mean_plan_ms": summary.mean_plan_ms, "success_rate": summary.success_rate,
                    "ci_lo": summary.ci_lo, "ci_hi": summary.ci_hi, "episodes": summary.episodes,
                    "config_hash": config_hash})
        rows.append(row)
        logger.info("sweep %s %s: success %.2f at %.1f ms/plan", mode, description, summary.success_rate,
                    summary.mean_plan_ms)
    frame = pd.DataFrame(rows)
    if not frame.empty:
        frame["pareto"] = pareto_flags(frame["mean_plan_ms"].tolist(), frame["success_rate"].tolist())
    return frame


# -- offline plan metric ------------------------------------------------------


def expert_delta(layout: MazeLayout, start_cell, goal_cell, expert_cells: int = 5) -> np.ndarray:
    """Net displacement along the first `expert_cells` cells of a BFS shortest path"""
    path = shortest_path(layout, start_cell, goal_cell)
    last = path[min(expert_cells, len(path)) - 1]
    return (layout.cell_center(last) - layout.cell_center(path[0])).astype(np.float64)


def action_alignment(plan_sum: np.ndarray, expert: np.ndarray) -> Tuple[float, float, bool]:
    """(cosine, L1, zero_plan); cosine is recorded as 0 when either vector is zero"""
    plan_sum = np.asarray(plan_sum, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    l1 = float(np.abs(plan_sum - expert).sum())
    norms = np.linalg.norm(plan_sum) * np.linalg.norm(expert)
    if norms < 1e-12:
        return 0.0, l1, True
    return float(np.dot(plan_sum, expert) / norms), l1, False


def offline_plan_metric(tasks: Sequence[TaskSpec], planner, params: WorldModelParams,
                        layouts: Dict[str, MazeLayout], env_params: EnvParams = EnvParams(),
                        expert_cells: int = 5, seed: int = 0) -> Dict[str, float]:
    """Compare the summed actions of each task's first plan with the scripted expert displacement"""
    cosines, l1s, zero_plans = [], [], 0
    for task in tasks:
        layout = layouts[task.layout_id]
        z = observe_latent(task.start(), layout, params, env_params)
        z_goal = observe_latent(EnvState(position=np.asarray(task.goal_position)), layout, params, env_params)
        plan = planner.plan(z, z_goal, derive_seed(seed, f"offline/{task.task_id}"))
        cosine, l1, zero = action_alignment(np.asarray(plan.actions).sum(axis=0),
                                            expert_delta(layout, task.start_cell, task.goal_cell, expert_cells))
        if zero:
            logger.warning("task %s: zero-vector plan, cosine recorded as 0", task.task_id)
        cosines.append(cosine)
        l1s.append(l1)
        zero_plans += int(zero)
    return {
        "mean_cosine": float(np.mean(cosines)) if cosines else float("nan"),
        "mean_l1": float(np.mean(l1s)) if l1s else float("nan"),
        "zero_plans": float(zero_plans),
        "tasks": float(len(cosines)),
    }


# -- horizon-error curve ------------------------------------------------------


def split_chunks(actions: np.ndarray, stride: int) -> List[np.ndarray]:
    """Fewest chunks of at most `stride` actions covering the sequence"""
    return [actions[i:i + stride] for i in range(0, len(actions), stride)]


def bootstrap_ci(values: np.ndarray, samples: int, rng: np.random.Generator) -> Tuple[float, float]:
    if len(values) == 0:
        return float("nan"), float("nan")
    idx = rng.integers(0, len(values), size=(samples, len(values)))
    means = values[idx].mean(axis=1)
    return float(np.percentile(means, 2.5)), float(np.percentile(means, 97.5))


def horizon_error_curve(params: WorldModelParams, bundle: DatasetBundle, horizons: Sequence[int], stride: int,
                        bootstrap_samples: int = 1000, seed: int = 0, env_params: EnvParams = EnvParams(),
                        config_hash: str = "") -> pd.DataFrame:
    """Held-out L1 of an h-step low-level unroll vs the fewest high-level steps covering h"""
    rng = np.random.default_rng(derive_seed(seed, "bench/horizon"))
    latents = [encode_states(t.states, bundle.layouts[t.layout_id], params, env_params) for t in bundle.trajectories]
    rows = []
    for h in horizons:
        low_err, high_err = [], []
        for traj, z in zip(bundle.trajectories, latents):
            if len(traj) < h:
                continue
            if h == 0:
                low_err.append(0.0)
                high_err.append(0.0)
                continue
            with torch.no_grad():
                actions = torch.from_numpy(traj.actions[:h])
                z_low = rollout_low(z[0], actions, params)[-1]
                low_err.append(float(nd.l1_norm(z_low - z[h])))
                if params.has_high:
                    z_high = z[0]
                    for chunk in split_chunks(traj.actions[:h], stride):
                        z_high = predict_high(z_high, encode_action_chunk(chunk, params), params)
                    high_err.append(float(nd.l1_norm(z_high - z[h])))
        low_arr, high_arr = np.asarray(low_err), np.asarray(high_err)
        low_ci = bootstrap_ci(low_arr, bootstrap_samples, rng)
        high_ci = bootstrap_ci(high_arr, bootstrap_samples, rng)
        rows.append({
            "horizon": h,
            "high_steps": math.ceil(h / stride) if h else 0,
            "n": len(low_arr),
            "l1_low": float(low_arr.mean()) if len(low_arr) else float("nan"),
            "l1_low_lo": low_ci[0],
            "l1_low_hi": low_ci[1],
            "l1_high": float(high_arr.mean()) if len(high_arr) else float("nan"),
            "l1_high_lo": high_ci[0],
            "l1_high_hi": high_ci[1],
            "config_hash": config_hash,
        })
    return pd.DataFrame(rows)


# -- latent action dimension sweep --------------------------------------------


def latent_dim_sweep(d_values: Sequence[int], bundle: DatasetBundle, low_params: WorldModelParams,
                     config: RunConfig, tasks: Sequence[TaskSpec], layouts: Dict[str, MazeLayout], band: BandConfig,
                     env_params: EnvParams = EnvParams(), config_hash: str = "",
                     train_layout_ids: Optional[Iterable[str]] = None) -> pd.DataFrame:
    """Train one high-level model per latent action size and evaluate hierarchical planning with each"""
    rows = []
    for d_l in d_values:
        if d_l < 1:
            raise ValueError(f"latent action dimension must be >= 1, got {d_l}")
        params = copy.deepcopy(low_params)
        params, _ = train_high(bundle, params, config, env_params, d_l=d_l)
        summary = evaluate(tasks, HierarchicalPlanner(band.hier, params), params, layouts, band.max_steps,
                           config.planner.success_threshold, config.bench.trials_per_task, config.seed,
                           config.bench.subgoal_progress_ratio, env_params, config_hash,
                           train_layout_ids=train_layout_ids)
        rows.append({"d_l": d_l, "success_rate": summary.success_rate, "ci_lo": summary.ci_lo,
                     "ci_hi": summary.ci_hi, "plan_validity_rate": summary.valid_plan_rate,
                     "episodes": summary.episodes, "config_hash": config_hash})
        logger.info("d_l=%d: success %.2f, plan validity %.2f", d_l, summary.success_rate, summary.valid_plan_rate)
    return pd.DataFrame(rows)
