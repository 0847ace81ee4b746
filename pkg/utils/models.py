"""Encoder, low/high-level predictors, action encoder, proprio head and prober.

Forward passes run through the shape-checked primitives in `utils.ndcompute`;
`torch.nn` modules only own the parameters.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from utils import ndcompute as nd
from utils.config import ModelConfig, TrainHighConfig, TrainLowConfig
from utils.dataset import Trajectory
from utils.errors import ChunkTooLongError, ShapeError, TrajectoryTooShortError
from utils.maze_env import EnvParams, MazeLayout, Observation, render_batch

logger = logging.getLogger(__name__)

ACTION_DIM = 2
PROPRIO_DIM = 2
STATE_DIM = 4


class MLP(nn.Module):
    def __init__(self, layers_dims: List[int]):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Linear(layers_dims[i], layers_dims[i + 1]) for i in range(len(layers_dims) - 1)
        )

    def forward(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = nd.linear(x, layer.weight, layer.bias)
            if i < last:
                x = nd.relu(x)
        return x

    def zero_output(self):
        """Zero the final layer; a residual predictor then copies its input"""
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()


def build_mlp(layers_dims: List[int]) -> MLP:
    return MLP(layers_dims)


class ConvEncoder(nn.Module):
    """Three stride-2 convs on the image, a linear embedding, then proprio joins before the projection to d_z"""

    def __init__(self, resolution=64, channels=(16, 32, 32), hidden=128, d_z=32):
        super().__init__()
        self.resolution = resolution
        self.d_z = d_z
        in_channels = [3] + list(channels[:-1])
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1) for c_in, c_out in zip(in_channels, channels)
        )
        spatial = resolution // 8
        self.embed = nn.Linear(channels[-1] * spatial * spatial, hidden)
        self.project = nn.Linear(hidden + PROPRIO_DIM, d_z)

    def forward(self, images, proprio):
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.resolution, self.resolution):
            raise ShapeError("encode", images.shape, (3, self.resolution, self.resolution))
        x = images
        for conv in self.convs:
            x = nd.relu(nd.conv2d(x, conv.weight, conv.bias, stride=2, padding=1))
        x = nd.reshape(x, (x.shape[0], -1))
        x = nd.relu(nd.linear(x, self.embed.weight, self.embed.bias))
        x = nd.concat([x, proprio], dim=-1)
        return nd.linear(x, self.project.weight, self.project.bias)


class LowLevelPredictor(nn.Module):
    """z' = z + MLP(z, a), two hidden layers"""

    def __init__(self, d_z=32, hidden=128):
        super().__init__()
        self.d_z = d_z
        self.mlp = build_mlp([d_z + ACTION_DIM, hidden, hidden, d_z])

    def forward(self, z, a):
        if z.shape[-1] != self.d_z or a.shape[-1] != ACTION_DIM or z.shape[:-1] != a.shape[:-1]:
            raise ShapeError("predict_low", z.shape, a.shape)
        return nd.add(z, self.mlp(nd.concat([z, a], dim=-1)))


class ActionEncoder(nn.Module):
    """Zero-padded action chunk plus its normalized length -> latent action"""

    def __init__(self, max_chunk=10, hidden=64, d_l=8):
        super().__init__()
        self.max_chunk = max_chunk
        self.d_l = d_l
        self.mlp = build_mlp([max_chunk * ACTION_DIM + 1, hidden, d_l])

    def forward(self, padded):
        if padded.shape[-1] != self.max_chunk * ACTION_DIM + 1:
            raise ShapeError("encode_action_chunk", padded.shape, (self.max_chunk * ACTION_DIM + 1,))
        return self.mlp(padded)


class HighLevelPredictor(nn.Module):
    """z' = z + MLP(z, l), three hidden layers"""

    def __init__(self, d_z=32, d_l=8, hidden=256):
        super().__init__()
        self.d_z = d_z
        self.d_l = d_l
        self.mlp = build_mlp([d_z + d_l, hidden, hidden, hidden, d_z])

    def forward(self, z, l):
        if z.shape[-1] != self.d_z or l.shape[-1] != self.d_l or z.shape[:-1] != l.shape[:-1]:
            raise ShapeError("predict_high", z.shape, l.shape)
        return nd.add(z, self.mlp(nd.concat([z, l], dim=-1)))


class ProprioHead(nn.Module):
    """Linear readout of (x, y, vx, vy) from a latent"""

    def __init__(self, d_z=32):
        super().__init__()
        self.linear = nn.Linear(d_z, STATE_DIM)

    def forward(self, z):
        return nd.linear(z, self.linear.weight, self.linear.bias)


class Prober(nn.Module):
    """Two conv + max-pool stages over the latent's spatial form, then a linear map to (x, y)"""

    def __init__(self, latent_shape=(2, 4, 4), channels=(16, 16)):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        in_channels = [self.latent_shape[0]] + list(channels[:-1])
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1) for c_in, c_out in zip(in_channels, channels)
        )
        with torch.no_grad():
            flat = self._features(torch.zeros((1,) + self.latent_shape)).shape[-1]
        self.head = nn.Linear(flat, 2)

    def _features(self, z):
        x = nd.reshape(z, (z.shape[0],) + self.latent_shape)
        for conv in self.convs:
            x = nd.relu(nd.conv2d(x, conv.weight, conv.bias, stride=1, padding=1))
            if x.shape[-1] >= 2 and x.shape[-2] >= 2:
                x = F.max_pool2d(x, 2)
        return nd.reshape(x, (x.shape[0], -1))

    def forward(self, z):
        return nd.linear(self._features(z), self.head.weight, self.head.bias)


@dataclass
class WorldModelParams:
    """Every trained module plus the hyperparameters that produced it"""

    model_config: ModelConfig
    encoder: ConvEncoder
    low: LowLevelPredictor
    proprio_head: ProprioHead
    prober: Prober
    train_low: TrainLowConfig = field(default_factory=TrainLowConfig)
    train_high: TrainHighConfig = field(default_factory=TrainHighConfig)
    action_encoder: Optional[ActionEncoder] = None
    high: Optional[HighLevelPredictor] = None
    latent_action_std: Optional[List[float]] = None

    @property
    def d_z(self) -> int:
        return self.model_config.d_z

    @property
    def d_l(self) -> int:
        return self.action_encoder.d_l if self.action_encoder is not None else self.model_config.d_l

    @property
    def has_high(self) -> bool:
        return self.high is not None and self.action_encoder is not None

    def modules(self) -> Dict[str, nn.Module]:
        out = {"encoder": self.encoder, "low": self.low, "proprio_head": self.proprio_head, "prober": self.prober}
        if self.has_high:
            out["action_encoder"] = self.action_encoder
            out["high"] = self.high
        return out

    def named_parameters(self, sections: Sequence[str]) -> Dict[str, torch.Tensor]:
        modules = self.modules()
        out = {}
        for section in sections:
            for name, p in modules[section].named_parameters():
                out[f"{section}.{name}"] = p
        return out

    def low_parameters(self) -> Dict[str, torch.Tensor]:
        return self.named_parameters(("encoder", "low", "proprio_head"))

    def high_parameters(self) -> Dict[str, torch.Tensor]:
        return self.named_parameters(("action_encoder", "high"))

    def eval(self):
        for module in self.modules().values():
            module.eval()
        return self


def build_world_model(model_cfg: ModelConfig, seed: int = 0, resolution: int = 64,
                      train_low: Optional[TrainLowConfig] = None,
                      train_high: Optional[TrainHighConfig] = None) -> WorldModelParams:
    """Fresh low-level modules, initialized deterministically from `seed`"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        encoder = ConvEncoder(resolution, model_cfg.encoder_channels, model_cfg.encoder_hidden, model_cfg.d_z)
        low = LowLevelPredictor(model_cfg.d_z, model_cfg.low_hidden)
        proprio_head = ProprioHead(model_cfg.d_z)
        prober = Prober(model_cfg.latent_shape, model_cfg.prober_channels)
    return WorldModelParams(
        model_config=model_cfg,
        encoder=encoder,
        low=low,
        proprio_head=proprio_head,
        prober=prober,
        train_low=train_low or TrainLowConfig(),
        train_high=train_high or TrainHighConfig(),
    )


def attach_high_level(params: WorldModelParams, seed: int = 0, d_l: Optional[int] = None) -> WorldModelParams:
    """Add a fresh action encoder and high-level predictor to trained low-level params"""
    cfg = params.model_config
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        params.action_encoder = ActionEncoder(cfg.max_chunk, cfg.action_hidden, d_l or cfg.d_l)
        params.high = HighLevelPredictor(cfg.d_z, d_l or cfg.d_l, cfg.high_hidden)
    params.latent_action_std = None
    return params


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


# -- encoder ------------------------------------------------------------------


def encode(obs: Union[Observation, tuple], params: WorldModelParams) -> torch.Tensor:
    """Observation or (images, proprio) -> latent; a single observation gives a (d_z,) vector"""
    images, proprio = (obs.image, obs.proprio) if isinstance(obs, Observation) else obs
    images, proprio = _as_tensor(images), _as_tensor(proprio)
    single = images.dim() == 3
    if single:
        images, proprio = images.unsqueeze(0), proprio.unsqueeze(0)
    z = params.encoder(images, proprio)
    return z[0] if single else z


def encode_states(states, layout: MazeLayout, params: WorldModelParams, env_params: EnvParams = EnvParams(),
                  batch_size: int = 512) -> torch.Tensor:
    """Render and encode (N, 4) states without building a graph"""
    states = np.asarray(states, dtype=np.float32).reshape(-1, STATE_DIM)
    if env_params.resolution != params.encoder.resolution:
        raise ShapeError("encode", (env_params.resolution,), (params.encoder.resolution,))
    out = []
    with torch.no_grad():
        for start in range(0, len(states), batch_size):
            images, proprio = render_batch(states[start:start + batch_size], layout, env_params)
            out.append(params.encoder(torch.from_numpy(images), torch.from_numpy(proprio)))
    if not out:
        return torch.zeros((0, params.d_z))
    return torch.cat(out, dim=0)


# -- low level ----------------------------------------------------------------


def predict_low(z, a, params: WorldModelParams) -> torch.Tensor:
    return params.low(_as_tensor(z), _as_tensor(a))


def rollout_low(z1, actions, params: WorldModelParams) -> torch.Tensor:
    """Autoregressive unroll; actions (..., h, 2) -> latents (..., h, d_z) after each step"""
    z = _as_tensor(z1)
    actions = _as_tensor(actions)
    steps = []
    for t in range(actions.shape[-2]):
        z = params.low(z, actions[..., t, :])
        steps.append(z)
    if not steps:
        return z.new_zeros(z.shape[:-1] + (0, z.shape[-1]))
    return torch.stack(steps, dim=-2)


# -- high level ---------------------------------------------------------------


def pad_action_chunks(chunks: Sequence[np.ndarray], max_chunk: int) -> torch.Tensor:
    """(B, max_chunk * 2 + 1): zero-padded flattened chunk, then length / max_chunk"""
    padded = np.zeros((len(chunks), max_chunk * ACTION_DIM + 1), dtype=np.float32)
    for i, chunk in enumerate(chunks):
        chunk = np.asarray(chunk, dtype=np.float32).reshape(-1, ACTION_DIM)
        if not 1 <= len(chunk) <= max_chunk:
            raise ChunkTooLongError(f"action chunk length {len(chunk)} outside [1, {max_chunk}]")
        padded[i, : chunk.size] = chunk.reshape(-1)
        padded[i, -1] = len(chunk) / max_chunk
    return torch.from_numpy(padded)


def encode_action_chunk(actions, params: WorldModelParams) -> torch.Tensor:
    """One variable-length chunk of primitive actions -> (d_l,) latent action"""
    padded = pad_action_chunks([np.asarray(actions)], params.action_encoder.max_chunk)
    return params.action_encoder(padded)[0]


def encode_action_chunks(chunks: torch.Tensor, params: WorldModelParams) -> torch.Tensor:
    """Fixed-length chunks (..., L, 2) -> latent actions (..., d_l)"""
    chunks = _as_tensor(chunks)
    max_chunk = params.action_encoder.max_chunk
    length = chunks.shape[-2]
    if not 1 <= length <= max_chunk:
        raise ChunkTooLongError(f"action chunk length {length} outside [1, {max_chunk}]")
    flat = chunks.reshape(chunks.shape[:-2] + (length * ACTION_DIM,))
    pad = torch.zeros(chunks.shape[:-2] + ((max_chunk - length) * ACTION_DIM,), dtype=flat.dtype)
    scale = torch.full(chunks.shape[:-2] + (1,), length / max_chunk, dtype=flat.dtype)
    return params.action_encoder(torch.cat([flat, pad, scale], dim=-1))


def predict_high(z, l, params: WorldModelParams) -> torch.Tensor:
    return params.high(_as_tensor(z), _as_tensor(l))


def rollout_high(z1, latent_actions, params: WorldModelParams) -> torch.Tensor:
    """latent actions (..., H, d_l) -> predicted waypoint latents (..., H, d_z)"""
    z = _as_tensor(z1)
    latent_actions = _as_tensor(latent_actions)
    steps = []
    for k in range(latent_actions.shape[-2]):
        z = params.high(z, latent_actions[..., k, :])
        steps.append(z)
    return torch.stack(steps, dim=-2)


# -- prober -------------------------------------------------------------------


def probe(z, params: WorldModelParams) -> torch.Tensor:
    """(..., d_z) -> (..., 2) world position estimate"""
    z = _as_tensor(z)
    single = z.dim() == 1
    out = params.prober(z.unsqueeze(0) if single else z)
    return out[0] if single else out


# -- waypoints ----------------------------------------------------------------


@dataclass
class WaypointBatch:
    indices: np.ndarray
    states: np.ndarray
    action_chunks: np.ndarray
    layout_id: str
    latents: Optional[torch.Tensor] = None
    latent_actions: Optional[torch.Tensor] = None

    @property
    def N(self) -> int:
        return len(self.indices)


def sample_waypoints(traj: Trajectory, N: int = 6, stride: int = 10, start: int = 0) -> WaypointBatch:
    """Fixed-stride waypoints from `start`; chunk k holds the `stride` actions between waypoints k and k+1"""
    if N < 2:
        raise ValueError(f"need at least two waypoints, got N={N}")
    span = (N - 1) * stride
    if start < 0 or start + span > len(traj):
        raise TrajectoryTooShortError(
            f"trajectory of {len(traj)} steps cannot hold {N} waypoints at stride {stride} from {start}"
        )
    indices = start + stride * np.arange(N)
    chunks = np.stack([traj.actions[i:i + stride] for i in indices[:-1]])
    return WaypointBatch(indices=indices, states=traj.states[indices].copy(), action_chunks=chunks,
                         layout_id=traj.layout_id)


def encode_waypoints(batch: WaypointBatch, layout: MazeLayout, params: WorldModelParams,
                     env_params: EnvParams = EnvParams()) -> WaypointBatch:
    """Fill latents (frozen encoder) and latent actions (with gradients) for one waypoint batch"""
    batch.latents = encode_states(batch.states, layout, params, env_params)
    batch.latent_actions = encode_action_chunks(torch.from_numpy(batch.action_chunks), params)
    return batch
