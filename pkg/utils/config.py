"""Run configuration: schema, loading, hashing, seed splitting and env overrides.

The defaults below reproduce the training and planning tables for the maze
domain; `config/default.json` spells every value out so runs are
self-describing.
"""

import hashlib
import json
import logging
import os
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils.errors import ConfigError, MissingFileError

logger = logging.getLogger(__name__)

BAND_NAMES = ("easy", "medium", "hard")
VICREG_ROLES = ("variance", "covariance", "invariance", "augmented_variance")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class EnvConfig(StrictModel):
    grid_size: int = Field(8, ge=4)
    cell_size: float = Field(1.0, gt=0)
    free_frac_min: float = Field(0.5, gt=0, lt=1)
    free_frac_max: float = Field(0.8, gt=0, lt=1)
    max_layout_attempts: int = Field(10_000, ge=1)
    a_scale: float = Field(0.1, gt=0)
    v_max: float = Field(0.5, gt=0)
    resolution: int = Field(64, ge=16)
    blob_sigma: float = Field(1.5, gt=0)

    @model_validator(mode="after")
    def check_free_range(self):
        if self.free_frac_min > self.free_frac_max:
            raise ValueError("free_frac_min must not exceed free_frac_max")
        return self

    @property
    def free_frac_range(self) -> Tuple[float, float]:
        return (self.free_frac_min, self.free_frac_max)


class DataConfig(StrictModel):
    train_layouts: int = Field(5, ge=1)
    test_layouts: int = Field(20, ge=1)
    episodes_per_layout: int = Field(200, ge=0)
    steps: int = Field(100, ge=2)
    action_repeat: int = Field(4, ge=1)
    heldout_episodes_per_layout: int = Field(10, ge=0)


class ModelConfig(StrictModel):
    d_z: int = Field(32, ge=1)
    latent_shape: List[int] = Field(default_factory=lambda: [2, 4, 4])
    d_l: int = Field(8, ge=1)
    max_chunk: int = Field(10, ge=1)
    encoder_channels: List[int] = Field(default_factory=lambda: [16, 32, 32])
    encoder_hidden: int = Field(128, ge=1)
    low_hidden: int = Field(128, ge=1)
    high_hidden: int = Field(256, ge=1)
    action_hidden: int = Field(64, ge=1)
    prober_channels: List[int] = Field(default_factory=lambda: [16, 16])

    @model_validator(mode="after")
    def check_latent_shape(self):
        size = 1
        for dim in self.latent_shape:
            size *= dim
        if size != self.d_z:
            raise ValueError(f"latent_shape {self.latent_shape} does not flatten to d_z={self.d_z}")
        if len(self.encoder_channels) != 3:
            raise ValueError("encoder uses exactly three stride-2 conv layers")
        return self


class TrainLowConfig(StrictModel):
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(128, ge=2)
    lr: float = Field(0.018, gt=0)
    pred_T: int = Field(15, ge=1)
    gamma_tf: float = Field(0.0, ge=0)
    gamma_roll: float = Field(1.0, ge=0)
    alpha: float = Field(29.4, ge=0)
    beta: float = Field(17.9, ge=0)
    lambda_vic: float = Field(2.80, ge=0)
    omega: float = Field(4.81, ge=0)
    proprio_coef: float = Field(2.42, ge=0)
    stop_grad_targets: bool = True
    windows_per_trajectory: int = Field(4, ge=1)
    vicreg_roles: Dict[str, str] = Field(
        default_factory=lambda: {
            "alpha": "variance",
            "beta": "covariance",
            "lambda_vic": "invariance",
            "omega": "augmented_variance",
        }
    )

    @field_validator("vicreg_roles")
    @classmethod
    def check_roles(cls, roles):
        if set(roles) != {"alpha", "beta", "lambda_vic", "omega"}:
            raise ValueError("vicreg_roles must map exactly alpha, beta, lambda_vic, omega")
        if sorted(roles.values()) != sorted(VICREG_ROLES):
            raise ValueError(f"vicreg_roles values must be a permutation of {VICREG_ROLES}")
        return roles

    def vicreg_weights(self) -> Dict[str, float]:
        """Term name -> weight under the configured coefficient mapping"""
        return {role: float(getattr(self, coef)) for coef, role in self.vicreg_roles.items()}


class TrainHighConfig(StrictModel):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(128, ge=1)
    lr: float = Field(0.018, gt=0)
    pred_T: int = Field(6, ge=2)
    stride: int = Field(10, ge=1)
    gamma_tf: float = Field(0.0, ge=0)
    gamma_roll: float = Field(1.0, ge=0)
    proprio_coef: float = Field(1.0, ge=0)
    windows_per_trajectory: int = Field(4, ge=1)


class ProberConfig(StrictModel):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    heldout_fraction: float = Field(0.1, ge=0, lt=1)
    max_samples: int = Field(20_000, ge=2)


class MppiConfig(StrictModel):
    noise_sigma: float = Field(5.0, gt=0)
    num_samples: int = Field(250, ge=1)
    temperature: float = Field(0.0025, gt=0)
    horizon: int = Field(200, ge=1)
    action_bound: float = Field(1.0, gt=0)
    num_iters: int = Field(3, ge=0)


class CemConfig(StrictModel):
    num_samples: int = Field(300, ge=1)
    num_elites: int = Field(30, ge=1)
    num_iters: int = Field(30, ge=0)
    var_ema: float = Field(0.0, ge=0, lt=1)
    horizon: int = Field(5, ge=1)
    action_bound: float = Field(1.0, gt=0)
    init_mean: float = 0.0
    init_std: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def check_elites(self):
        if self.num_elites > self.num_samples:
            raise ValueError("num_elites must not exceed num_samples")
        return self


class LevelConfig(StrictModel):
    optimizer: Literal["mppi", "cem"] = "mppi"
    mppi: MppiConfig = Field(default_factory=MppiConfig)
    cem: CemConfig = Field(default_factory=CemConfig)

    @property
    def horizon(self) -> int:
        return self.mppi.horizon if self.optimizer == "mppi" else self.cem.horizon

    @property
    def budget(self) -> int:
        """Energy evaluations per plan"""
        if self.optimizer == "mppi":
            return self.mppi.num_samples * self.mppi.num_iters
        return self.cem.num_samples * self.cem.num_iters

    def with_budget(self, num_samples: int, horizon: Optional[int] = None) -> "LevelConfig":
        """Copy with the active optimizer's sample count (and horizon) replaced; CEM elites are clamped to fit"""
        active = getattr(self, self.optimizer)
        update = {"num_samples": num_samples}
        if horizon is not None:
            update["horizon"] = horizon
        if self.optimizer == "cem":
            update["num_elites"] = min(active.num_elites, num_samples)
        resized = type(active).model_validate({**active.model_dump(), **update})
        return self.model_copy(update={self.optimizer: resized}, deep=True)


class FlatPlannerConfig(StrictModel):
    level: LevelConfig = Field(default_factory=LevelConfig)
    replan_every: int = Field(4, ge=1)


class HierPlannerConfig(StrictModel):
    high: LevelConfig = Field(default_factory=LevelConfig)
    low: LevelConfig = Field(default_factory=LevelConfig)
    replan_every: int = Field(4, ge=1)
    subgoal_epsilon: float = Field(1e-3, ge=0)


class BandConfig(StrictModel):
    d_lo: int = Field(ge=0)
    d_hi: int = Field(ge=0)
    max_steps: int = Field(ge=1)
    flat: FlatPlannerConfig
    hier: HierPlannerConfig

    @model_validator(mode="after")
    def check_band(self):
        if self.d_lo > self.d_hi:
            raise ValueError("band lower bound exceeds upper bound")
        return self


def _mppi(sigma, samples, horizon, temperature=0.0025, bound=1.0):
    return MppiConfig(noise_sigma=sigma, num_samples=samples, temperature=temperature,
                      horizon=horizon, action_bound=bound)


def _band(d_lo, d_hi, max_steps, flat_samples, flat_h, high_samples, high_H, low_samples):
    return BandConfig(
        d_lo=d_lo,
        d_hi=d_hi,
        max_steps=max_steps,
        flat=FlatPlannerConfig(level=LevelConfig(mppi=_mppi(5.0, flat_samples, flat_h))),
        hier=HierPlannerConfig(
            high=LevelConfig(mppi=_mppi(10.0, high_samples, high_H, bound=3.0)),
            low=LevelConfig(mppi=_mppi(5.0, low_samples, 15)),
        ),
    )


def default_bands() -> Dict[str, BandConfig]:
    """Per-band planners from the maze MPPI tables"""
    return {
        "easy": _band(5, 8, 200, 125, 150, 2000, 25, 500),
        "medium": _band(9, 12, 300, 250, 200, 2000, 35, 500),
        "hard": _band(13, 16, 400, 250, 250, 4000, 47, 1000),
    }


def default_cem_reference() -> Dict[str, Dict[str, CemConfig]]:
    """CEM table rows for the non-maze domains, kept as reference values only"""
    rows = {
        "franka": ((20, 15, 2400, 0.75, 6), (22, 15, 3000, 0.65, 2), (12, 5, 800, 0.25, 2)),
        "pusht_d25": ((30, 30, 300, 0.0, 5), (10, 20, 900, 0.0, 2), (10, 30, 300, 0.0, 5)),
        "pusht_d50": ((10, 30, 1200, 0.9, 10), (10, 40, 1500, 0.9, 4), (10, 20, 900, 0.8, 5)),
        "pusht_d75": ((20, 20, 1000, 0.0, 15), (10, 20, 1200, 0.9, 5), (10, 20, 1200, 0.8, 5)),
    }
    out = {}
    for name, levels in rows.items():
        out[name] = {
            level: CemConfig(num_elites=e, num_iters=i, num_samples=s, var_ema=ema, horizon=h)
            for level, (e, i, s, ema, h) in zip(("flat", "high", "low"), levels)
        }
    return out


class PlannerConfig(StrictModel):
    success_threshold: float = Field(0.5, gt=0)
    bands: Dict[str, BandConfig] = Field(default_factory=default_bands)
    cem_reference: Dict[str, Dict[str, CemConfig]] = Field(default_factory=default_cem_reference)

    @field_validator("bands")
    @classmethod
    def check_band_names(cls, bands):
        unknown = set(bands) - set(BAND_NAMES)
        if unknown:
            raise ValueError(f"unknown band names {sorted(unknown)}")
        return bands


class SweepGrid(StrictModel):
    flat_samples: List[int] = Field(default_factory=lambda: [125, 250])
    flat_horizons: List[int] = Field(default_factory=lambda: [150, 200])
    hier_low_samples: List[int] = Field(default_factory=lambda: [250, 500])
    hier_high_samples: List[int] = Field(default_factory=lambda: [1000, 2000])
    hier_high_horizons: List[int] = Field(default_factory=lambda: [25, 35])


class BenchConfig(StrictModel):
    tasks_per_band: int = Field(20, ge=0)
    trials_per_task: int = Field(3, ge=1)
    subgoal_progress_ratio: float = Field(0.5, gt=0)
    horizons: List[int] = Field(default_factory=lambda: [1, 10, 20, 30, 40])
    bootstrap_samples: int = Field(1000, ge=1)
    latent_dims: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    expert_cells: int = Field(5, ge=1)
    max_task_attempts: int = Field(10_000, ge=1)
    default_sweep: SweepGrid = Field(default_factory=SweepGrid)

    @field_validator("latent_dims")
    @classmethod
    def check_latent_dims(cls, dims):
        if any(d < 1 for d in dims):
            raise ValueError("latent action dimensions must be >= 1")
        return dims


class RunConfig(StrictModel):
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)
    env: EnvConfig = Field(default_factory=EnvConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train_low: TrainLowConfig = Field(default_factory=TrainLowConfig)
    train_high: TrainHighConfig = Field(default_factory=TrainHighConfig)
    prober: ProberConfig = Field(default_factory=ProberConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)

    @model_validator(mode="after")
    def check_cross_section(self):
        if self.model.max_chunk < self.train_high.stride:
            raise ValueError("model.max_chunk must cover the high-level stride")
        return self

    def band(self, name: str) -> BandConfig:
        if name not in self.planner.bands:
            raise ConfigError(f"no planner config for band '{name}'")
        return self.planner.bands[name]


def _format_validation_error(exc: ValidationError) -> str:
    first = exc.errors()[0]
    where = ".".join(str(part) for part in first["loc"])
    return f"{where}: {first['msg']}" if where else first["msg"]


def parse_config(document: dict) -> RunConfig:
    """Validate a config document; unknown keys are rejected"""
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load a JSON config file, or the built-in defaults when no path is given"""
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise MissingFileError(f"config file not found: {path}")
    with open(path, "r") as f:
        try:
            document = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    config = parse_config(document)
    logger.debug("Loaded config %s (hash %s)", path, config_hash(config)[:12])
    return config


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")


def canonical_json(document) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonicalized config document"""
    canonical = canonical_json(config.model_dump(mode="json"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(root_seed: int, stage: str) -> int:
    """Split the root seed by stage name, e.g. 'layout/train/3' or 'train/low'"""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def load_environment() -> None:
    """Read `.env` into the process environment without clobbering set values"""
    load_dotenv(override=False)


def resolve_out_dir(flag_value: Optional[str], default: str) -> str:
    if flag_value:
        return flag_value
    return os.getenv("HWM_OUT_DIR") or default


def resolve_data_dir(default: str = "data") -> str:
    return os.getenv("HWM_DATA_DIR") or default


def resolve_workers(flag_value: Optional[int], config: RunConfig) -> int:
    """Flag, then HWM_WORKERS, then config, then available cores"""
    if flag_value is not None:
        workers = flag_value
    elif os.getenv("HWM_WORKERS"):
        try:
            workers = int(os.getenv("HWM_WORKERS"))
        except ValueError as exc:
            raise ConfigError(f"HWM_WORKERS must be an integer, got {os.getenv('HWM_WORKERS')!r}") from exc
    elif config.workers is not None:
        workers = config.workers
    else:
        workers = os.cpu_count() or 1
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    return workers
