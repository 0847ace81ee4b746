"""Sampling-based planning in latent space.

Energies are L1 distances between a goal latent and the terminal latent of
an autoregressive rollout. CEM and MPPI minimize them over action
sequences; `FlatPlanner` optimizes primitive actions toward the goal and
`HierarchicalPlanner` optimizes latent macro-actions first, then hands the
first predicted waypoint to the low level as its target. `mpc_run` closes
the loop against the simulator, replanning every k steps.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch

from utils import ndcompute as nd
from utils.config import CemConfig, FlatPlannerConfig, HierPlannerConfig, LevelConfig, MppiConfig, derive_seed
from utils.maze_env import EnvParams, EnvState, MazeLayout, render, step
from utils.models import WorldModelParams, encode, probe

logger = logging.getLogger(__name__)

Predictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
EnergyFn = Callable[[torch.Tensor], torch.Tensor]
Bounds = Union[float, Sequence[float], torch.Tensor]


@dataclass
class PlanResult:
    actions: np.ndarray
    best_energy: List[float] = field(default_factory=list)
    energy: float = float("nan")
    wall_clock_ms: float = 0.0
    samples_evaluated: int = 0
    optimizer: str = ""
    subgoal_latents: List[np.ndarray] = field(default_factory=list)
    subgoal_index: int = -1
    target_latent: Optional[np.ndarray] = None
    high_actions: Optional[np.ndarray] = None
    best_actions: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        def listify(x):
            return None if x is None else np.asarray(x, dtype=np.float64).tolist()

        return {
            "actions": listify(self.actions),
            "best_energy": [float(e) for e in self.best_energy],
            "energy": float(self.energy),
            "wall_clock_ms": float(self.wall_clock_ms),
            "samples_evaluated": int(self.samples_evaluated),
            "optimizer": self.optimizer,
            "subgoal_latents": [listify(z) for z in self.subgoal_latents],
            "subgoal_index": int(self.subgoal_index),
            "high_actions": listify(self.high_actions),
        }


# -- energies -----------------------------------------------------------------


def rollout_terminal(predictor: Predictor, z1: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Terminal latent of an unroll; actions (..., h, dim) with z1 (d,) broadcast over the leading dims"""
    z = z1.expand(actions.shape[:-2] + z1.shape[-1:])
    for t in range(actions.shape[-2]):
        z = predictor(z, actions[..., t, :])
    return z


def energy_low(actions, z1, z_goal, predictor: Predictor) -> torch.Tensor:
    """||z_goal - P1(a_{1:h}; z1)||_1, one value per leading index"""
    actions = torch.as_tensor(actions, dtype=torch.float32)
    if actions.dim() < 2 or actions.shape[-2] < 1:
        raise ValueError("energy needs a horizon of at least one step")
    terminal = rollout_terminal(predictor, torch.as_tensor(z1), actions)
    z_goal = torch.as_tensor(z_goal).expand_as(terminal)
    return nd.l1_norm(z_goal - terminal)


def energy_high(latent_actions, z1, z_goal, predictor: Predictor) -> torch.Tensor:
    """||z_goal - P2(l_{1:H}; z1)||_1, one value per leading index"""
    return energy_low(latent_actions, z1, z_goal, predictor)


# -- optimizers ---------------------------------------------------------------


def _bounds(bounds: Bounds, dim: int) -> torch.Tensor:
    b = torch.as_tensor(bounds, dtype=torch.float32)
    return b.expand(dim) if b.dim() == 0 else b.reshape(dim)


def _clamp(x: torch.Tensor, bound: torch.Tensor) -> torch.Tensor:
    return torch.minimum(torch.maximum(x, -bound), bound)


def _generator(seed: int, stage: str) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(seed, stage))


def cem_optimize(energy: EnergyFn, config: CemConfig, seed: int = 0, action_dim: int = 2,
                 bounds: Optional[Bounds] = None, horizon: Optional[int] = None) -> PlanResult:
    """Factorized Gaussian refit to elites; the std is smoothed with `var_ema` and floored at 1e-6"""
    horizon = horizon or config.horizon
    bound = _bounds(config.action_bound if bounds is None else bounds, action_dim)
    mean = torch.full((horizon, action_dim), float(config.init_mean))
    std = torch.full((horizon, action_dim), float(config.init_std))
    best_actions, best = _clamp(mean, bound), float("inf")
    history = []
    start = time.perf_counter()
    with torch.no_grad():
        for it in range(config.num_iters):
            noise = torch.randn((config.num_samples, horizon, action_dim), generator=_generator(seed, f"cem/{it}"))
            samples = _clamp(mean + std * noise, bound)
            energies = energy(samples)
            order = torch.argsort(energies)
            elites = samples[order[: config.num_elites]]
            if float(energies[order[0]]) < best:
                best = float(energies[order[0]])
                best_actions = samples[order[0]].clone()
            history.append(best)
            mean = elites.mean(dim=0)
            elite_std = elites.std(dim=0, unbiased=False)
            std = torch.clamp(config.var_ema * std + (1.0 - config.var_ema) * elite_std, min=1e-6)
        if config.num_iters == 0:
            best = float(energy(best_actions.unsqueeze(0))[0])
    return PlanResult(
        actions=best_actions.numpy(),
        best_energy=history,
        energy=best,
        wall_clock_ms=(time.perf_counter() - start) * 1000.0,
        samples_evaluated=config.num_samples * config.num_iters,
        optimizer="cem",
        best_actions=best_actions.numpy(),
    )


def mppi_weights(costs: torch.Tensor, temperature: float) -> torch.Tensor:
    """w_i proportional to exp(-(c_i - c_min) / temperature), normalized to sum to 1"""
    costs = costs.to(torch.float64)
    shifted = costs - costs.min()
    weights = torch.exp(-shifted / temperature)
    return weights / weights.sum()


def mppi_optimize(energy: EnergyFn, config: MppiConfig, nominal=None, seed: int = 0, action_dim: int = 2,
                  bounds: Optional[Bounds] = None, horizon: Optional[int] = None) -> PlanResult:
    """Perturb the nominal with N(0, sigma^2), score, and replace it with the weighted sample average"""
    horizon = horizon or config.horizon
    bound = _bounds(config.action_bound if bounds is None else bounds, action_dim)
    if nominal is None:
        nominal = torch.zeros((horizon, action_dim))
    nominal = _clamp(torch.as_tensor(np.asarray(nominal), dtype=torch.float32).reshape(horizon, action_dim), bound)
    best_actions, best = nominal.clone(), float("inf")
    history = []
    start = time.perf_counter()
    with torch.no_grad():
        for it in range(config.num_iters):
            noise = config.noise_sigma * torch.randn(
                (config.num_samples, horizon, action_dim), generator=_generator(seed, f"mppi/{it}")
            )
            samples = _clamp(nominal + noise, bound)
            costs = energy(samples)
            weights = mppi_weights(costs, config.temperature).to(samples.dtype)
            idx = int(torch.argmin(costs))
            if float(costs[idx]) < best:
                best = float(costs[idx])
                best_actions = samples[idx].clone()
            history.append(best)
            nominal = _clamp((weights[:, None, None] * samples).sum(dim=0), bound)
        final = float(energy(nominal.unsqueeze(0))[0])
    return PlanResult(
        actions=nominal.numpy(),
        best_energy=history,
        energy=final,
        wall_clock_ms=(time.perf_counter() - start) * 1000.0,
        samples_evaluated=config.num_samples * config.num_iters,
        optimizer="mppi",
        best_actions=best_actions.numpy(),
    )


def optimize_level(energy: EnergyFn, level: LevelConfig, seed: int, action_dim: int, nominal=None) -> PlanResult:
    """Run the optimizer a level is configured with; CEM ignores the warm start"""
    if level.optimizer == "cem":
        return cem_optimize(energy, level.cem, seed, action_dim)
    return mppi_optimize(energy, level.mppi, nominal, seed, action_dim)


# -- planners -----------------------------------------------------------------


def plan_flat(z1, z_goal, level: LevelConfig, predictor: Predictor, seed: int = 0, nominal=None) -> PlanResult:
    """Optimize primitive actions against the low-level energy over the whole horizon"""
    z1, z_goal = torch.as_tensor(z1), torch.as_tensor(z_goal)
    start = time.perf_counter()
    result = optimize_level(lambda a: energy_low(a, z1, z_goal, predictor), level, seed, action_dim=2,
                            nominal=nominal)
    result.wall_clock_ms = (time.perf_counter() - start) * 1000.0
    return result


def plan_hier(z1, z_goal, config: HierPlannerConfig, low_predictor: Predictor, high_predictor: Predictor,
              latent_dim: int, seed: int = 0, latent_scale: Optional[Bounds] = None,
              nominal_low=None, nominal_high=None) -> PlanResult:
    """Macro-actions against the high-level energy, then primitive actions toward the first usable subgoal

    The high-level optimizer samples in units of `latent_scale` (the per-dimension
    std of training latent actions), so its sigma and bound are in std units.
    `nominal_high` and the returned `high_actions` are actual latent actions.
    """
    z1, z_goal = torch.as_tensor(z1), torch.as_tensor(z_goal)
    start = time.perf_counter()
    scale = torch.ones(latent_dim) if latent_scale is None else _bounds(latent_scale, latent_dim)
    if nominal_high is not None:
        nominal_high = torch.as_tensor(np.asarray(nominal_high), dtype=torch.float32) / scale
    high = optimize_level(lambda u: energy_high(u * scale, z1, z_goal, high_predictor), config.high,
                          derive_seed(seed, "high"), latent_dim, nominal=nominal_high)

    with torch.no_grad():
        macro = torch.as_tensor(high.actions) * scale
        subgoals = []
        z = z1
        for k in range(macro.shape[0]):
            z = high_predictor(z, macro[k])
            subgoals.append(z)
    index = 0
    if len(subgoals) > 1 and float(nd.l1_norm(subgoals[0] - z1)) < config.subgoal_epsilon:
        logger.warning("first subgoal is within %.1e of the current latent; targeting the second",
                       config.subgoal_epsilon)
        index = 1
    target = subgoals[index]

    low = optimize_level(lambda a: energy_low(a, z1, target, low_predictor), config.low,
                         derive_seed(seed, "low"), action_dim=2, nominal=nominal_low)
    low.wall_clock_ms = (time.perf_counter() - start) * 1000.0
    low.samples_evaluated += high.samples_evaluated
    low.subgoal_latents = [s.numpy().copy() for s in subgoals]
    low.subgoal_index = index
    low.target_latent = target.numpy().copy()
    low.high_actions = macro.numpy()
    return low


def shift_nominal(actions: np.ndarray, k: int) -> np.ndarray:
    """Drop the first k steps and zero-pad at the end"""
    actions = np.asarray(actions, dtype=np.float32)
    shifted = np.zeros_like(actions)
    if k < len(actions):
        shifted[: len(actions) - k] = actions[k:]
    return shifted


class FlatPlanner:
    """Single-level MPC on the low-level world model"""

    mode = "flat"

    def __init__(self, config: FlatPlannerConfig, params: WorldModelParams):
        self.config = config
        self.params = params
        self.replan_every = config.replan_every

    def plan(self, z1, z_goal, seed: int, previous: Optional[PlanResult] = None, executed: int = 0) -> PlanResult:
        nominal = None
        if previous is not None and self.config.level.optimizer == "mppi":
            nominal = shift_nominal(previous.actions, executed)
        return plan_flat(z1, z_goal, self.config.level, self.params.low, seed, nominal)


class HierarchicalPlanner:
    """Two-level MPC; both levels are replanned on every call"""

    mode = "hier"

    def __init__(self, config: HierPlannerConfig, params: WorldModelParams):
        if not params.has_high:
            raise ValueError("hierarchical planning needs a trained high-level model")
        self.config = config
        self.params = params
        self.replan_every = config.replan_every
        self.latent_scale = params.latent_action_std or [1.0] * params.d_l

    def plan(self, z1, z_goal, seed: int, previous: Optional[PlanResult] = None, executed: int = 0) -> PlanResult:
        nominal_low = nominal_high = None
        if previous is not None:
            if self.config.low.optimizer == "mppi":
                nominal_low = shift_nominal(previous.actions, executed)
            if self.config.high.optimizer == "mppi" and previous.high_actions is not None:
                nominal_high = previous.high_actions
        return plan_hier(z1, z_goal, self.config, self.params.low, self.params.high, self.params.d_l, seed,
                         latent_scale=self.latent_scale, nominal_low=nominal_low, nominal_high=nominal_high)


def make_planner(mode: str, band_cfg, params: WorldModelParams):
    if mode == "flat":
        return FlatPlanner(band_cfg.flat, params)
    if mode == "hier":
        return HierarchicalPlanner(band_cfg.hier, params)
    raise ValueError(f"unknown planner mode '{mode}'")


# -- closed loop --------------------------------------------------------------


@dataclass
class EpisodeRecord:
    success: bool
    steps: int
    final_distance: float
    states: List[List[float]] = field(default_factory=list)
    plan_ms: List[float] = field(default_factory=list)
    plan_energy: List[float] = field(default_factory=list)
    subgoal_probes: List[List[List[float]]] = field(default_factory=list)
    plan_valid: List[bool] = field(default_factory=list)
    subgoal_index: List[int] = field(default_factory=list)

    @property
    def plans(self) -> int:
        return len(self.plan_ms)

    @property
    def total_plan_ms(self) -> float:
        return float(sum(self.plan_ms))

    @property
    def mean_plan_ms(self) -> float:
        return self.total_plan_ms / self.plans if self.plans else 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "success": self.success,
            "steps": self.steps,
            "final_distance": self.final_distance,
            "states": self.states,
            "plan_energy": self.plan_energy,
            "subgoal_probes": self.subgoal_probes,
            "plan_valid": self.plan_valid,
            "subgoal_index": self.subgoal_index,
        }
        if include_timing:
            out["plan_ms"] = self.plan_ms
        return out


def observe_latent(state: EnvState, layout: MazeLayout, params: WorldModelParams, env_params: EnvParams) -> torch.Tensor:
    with torch.no_grad():
        return encode(render(state, layout, env_params), params)


def mpc_run(layout: MazeLayout, start: EnvState, goal: np.ndarray, planner, params: WorldModelParams,
            max_steps: int, success_threshold: float = 0.5, seed: int = 0,
            env_params: EnvParams = EnvParams(), progress_ratio: float = 0.5,
            replan_every: Optional[int] = None) -> EpisodeRecord:
    """Observe, encode, plan, execute up to k actions, repeat until the goal is within threshold or time runs out"""
    goal = np.asarray(goal, dtype=np.float32).reshape(2)
    k = replan_every or planner.replan_every
    state = EnvState(position=start.position.copy(), velocity=start.velocity.copy())
    record = EpisodeRecord(success=False, steps=0, final_distance=float(np.linalg.norm(state.position - goal)))
    record.states.append(state.as_vector().tolist())
    if record.final_distance < success_threshold:
        record.success = True
        return record

    z_goal = observe_latent(EnvState(position=goal), layout, params, env_params)
    previous, executed = None, 0
    while record.steps < max_steps and not record.success:
        z = observe_latent(state, layout, params, env_params)
        plan = planner.plan(z, z_goal, derive_seed(seed, f"plan/{record.plans}"), previous, executed)
        record.plan_ms.append(plan.wall_clock_ms)
        record.plan_energy.append(plan.energy)

        n = min(k, len(plan.actions), max_steps - record.steps)
        for action in plan.actions[:n]:
            state = step(state, action, layout, env_params)
            record.steps += 1
            record.states.append(state.as_vector().tolist())
            if float(np.linalg.norm(state.position - goal)) < success_threshold:
                record.success = True
                break

        if plan.target_latent is not None:
            target = torch.as_tensor(plan.target_latent)
            before = float(nd.l1_norm(target - z))
            after = float(nd.l1_norm(target - observe_latent(state, layout, params, env_params)))
            record.plan_valid.append(after <= progress_ratio * before)
            record.subgoal_index.append(plan.subgoal_index)
            with torch.no_grad():
                probes = probe(torch.as_tensor(np.stack(plan.subgoal_latents)), params)
            record.subgoal_probes.append(probes.numpy().astype(np.float64).tolist())
        previous, executed = plan, n
        if n == 0:
            break

    record.final_distance = float(np.linalg.norm(state.position - goal))
    return record
