"""Offline trajectory collection and the HWMD dataset container.

File layout (all integers and floats little-endian):

    header   magic "HWMD", u16 version, u16 G, u16 resolution, u16 reserved,
             f32 cell_size, u32 n_layouts, u32 n_trajectories
    layouts  n_layouts x (u16 id length, id bytes, G*G u8 wall flags)
    records  n_trajectories x (u32 payload length, payload)
    payload  u16 id length, id bytes, u32 T, (T+1)*4 f32 states, T*2 f32 actions

Observations are not stored: `render` is a pure function of (state, layout),
so they are re-rendered on demand.
"""

import hashlib
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from utils.config import derive_seed
from utils.errors import DatasetError, MissingFileError
from utils.maze_env import (
    EnvParams,
    EnvState,
    MazeLayout,
    Observation,
    generate_layout,
    render_batch,
    sample_free_position,
    step,
)

logger = logging.getLogger(__name__)

MAGIC = b"HWMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHfII")


@dataclass
class Trajectory:
    """states (T+1, 4) as (x, y, vx, vy); actions (T, 2)"""

    states: np.ndarray
    actions: np.ndarray
    layout_id: str

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32).reshape(-1, 4)
        self.actions = np.asarray(self.actions, dtype=np.float32).reshape(-1, 2)
        if len(self.actions) != len(self.states) - 1:
            raise DatasetError(
                f"trajectory needs len(actions) == len(states) - 1, got {len(self.actions)} and {len(self.states)}"
            )

    def __len__(self):
        return len(self.actions)

    def env_state(self, index: int) -> EnvState:
        return EnvState.from_vector(self.states[index])

    def observations(self, layout: MazeLayout, params: EnvParams = EnvParams()) -> List[Observation]:
        images, proprio = render_batch(self.states, layout, params)
        return [Observation(image=img, proprio=p) for img, p in zip(images, proprio)]


@dataclass
class DatasetBundle:
    trajectories: List[Trajectory]
    layouts: Dict[str, MazeLayout]
    G: int
    resolution: int
    version: int = FORMAT_VERSION


def collect_episode(layout: MazeLayout, steps: int, action_repeat: int, seed: int,
                    params: EnvParams = EnvParams()) -> Trajectory:
    """Random exploration from a uniform free position with a random initial velocity"""
    rng = np.random.default_rng(seed)
    position = sample_free_position(layout, rng)
    velocity = rng.uniform(-params.v_max, params.v_max, size=2).astype(np.float32)
    state = EnvState(position=position, velocity=velocity)

    states = [state.as_vector()]
    actions = []
    action = np.zeros(2, dtype=np.float32)
    for t in range(steps):
        if t % action_repeat == 0:
            action = rng.uniform(-1.0, 1.0, size=2).astype(np.float32)
        state = step(state, action, layout, params)
        actions.append(action.copy())
        states.append(state.as_vector())
    return Trajectory(states=np.stack(states), actions=np.stack(actions), layout_id=layout.layout_id)


def _collect_job(job):
    layout, steps, action_repeat, seed, params = job
    return collect_episode(layout, steps, action_repeat, seed, params)


def collect_dataset(
    layouts: Sequence[MazeLayout],
    episodes_per_layout: int,
    steps: int = 100,
    action_repeat: int = 4,
    seed: int = 0,
    params: EnvParams = EnvParams(),
    workers: int = 1,
) -> List[Trajectory]:
    """Episodes are seeded individually, so sharding across workers does not change the result"""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if action_repeat < 1:
        raise ValueError(f"action_repeat must be >= 1, got {action_repeat}")

    jobs = [
        (layout, steps, action_repeat, derive_seed(seed, f"episode/{layout.layout_id}/{i}"), params)
        for layout in layouts
        for i in range(episodes_per_layout)
    ]
    if not jobs:
        return []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(_collect_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        trajectories = [_collect_job(job) for job in jobs]
    logger.info("Collected %d episodes over %d layouts", len(trajectories), len(layouts))
    return trajectories


def make_layouts(split: str, count: int, env_cfg, root_seed: int) -> List[MazeLayout]:
    """Layouts `{split}-0 .. {split}-{count-1}`, each seeded from ('layout/{split}/{i}')"""
    return [
        generate_layout(
            derive_seed(root_seed, f"layout/{split}/{i}"),
            G=env_cfg.grid_size,
            free_frac_range=env_cfg.free_frac_range,
            max_attempts=env_cfg.max_layout_attempts,
            cell_size=env_cfg.cell_size,
            layout_id=f"{split}-{i}",
        )
        for i in range(count)
    ]


def replay(trajectory: Trajectory, layout: MazeLayout, params: EnvParams = EnvParams()) -> np.ndarray:
    """Re-simulate a trajectory's actions from its first state"""
    state = trajectory.env_state(0)
    states = [state.as_vector()]
    for action in trajectory.actions:
        state = step(state, action, layout, params)
        states.append(state.as_vector())
    return np.stack(states)


class DatasetManager:
    """Reads and writes dataset containers and layout files"""

    def __init__(self, data_dir="data"):
        self.data_dir = data_dir
        self.ensure_data_directory()

    def ensure_data_directory(self):
        os.makedirs(self.data_dir, exist_ok=True)

    def resolve(self, filename):
        if os.path.isabs(filename) or os.path.dirname(filename):
            return filename
        return os.path.join(self.data_dir, filename)

    def save_dataset(self, filename, trajectories: Sequence[Trajectory], layouts: Sequence[MazeLayout],
                     resolution: int) -> str:
        """Write the HWMD container; returns the path written"""
        if not layouts:
            raise DatasetError("a dataset needs at least one layout")
        G = layouts[0].G
        cell_size = layouts[0].cell_size
        if any(layout.G != G or layout.cell_size != cell_size for layout in layouts):
            raise DatasetError("all layouts in a dataset must share G and cell_size")
        known = {layout.layout_id for layout in layouts}
        orphans = {traj.layout_id for traj in trajectories} - known
        if orphans:
            raise DatasetError(f"trajectories reference unknown layouts {sorted(orphans)}")

        path = self.resolve(filename)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, G, resolution, 0, cell_size,
                                 len(layouts), len(trajectories)))
            for layout in layouts:
                f.write(_pack_str(layout.layout_id))
                f.write(layout.grid.astype(np.uint8).tobytes())
            for traj in trajectories:
                payload = b"".join([
                    _pack_str(traj.layout_id),
                    struct.pack("<I", len(traj)),
                    traj.states.astype("<f4").tobytes(),
                    traj.actions.astype("<f4").tobytes(),
                ])
                f.write(struct.pack("<I", len(payload)))
                f.write(payload)
        logger.info("Wrote %d trajectories to %s", len(trajectories), path)
        return path

    def load_dataset(self, filename) -> DatasetBundle:
        path = self.resolve(filename)
        if not os.path.exists(path):
            raise MissingFileError(f"dataset not found: {path}")
        with open(path, "rb") as f:
            raw = f.read()

        reader = ByteReader(raw, path)
        magic, version, G, resolution, _, cell_size, n_layouts, n_traj = reader.unpack(_HEADER)
        if magic != MAGIC:
            raise DatasetError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported format version {version}")

        layouts = {}
        for _ in range(n_layouts):
            layout_id = reader.string()
            grid = np.frombuffer(reader.take(G * G), dtype=np.uint8).reshape(G, G).astype(bool)
            layouts[layout_id] = MazeLayout(grid=grid, cell_size=float(cell_size), layout_id=layout_id)

        trajectories = []
        for _ in range(n_traj):
            (length,) = reader.unpack(struct.Struct("<I"))
            record = ByteReader(reader.take(length), path)
            layout_id = record.string()
            (T,) = record.unpack(struct.Struct("<I"))
            states = np.frombuffer(record.take((T + 1) * 16), dtype="<f4").reshape(T + 1, 4)
            actions = np.frombuffer(record.take(T * 8), dtype="<f4").reshape(T, 2)
            trajectories.append(Trajectory(states=states.copy(), actions=actions.copy(), layout_id=layout_id))
        if reader.remaining:
            raise DatasetError(f"{path}: {reader.remaining} trailing bytes")
        return DatasetBundle(trajectories=trajectories, layouts=layouts, G=G, resolution=resolution, version=version)

    def dataset_digest(self, filename) -> str:
        path = self.resolve(filename)
        sha = hashlib.sha256()
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                sha.update(block)
        return sha.hexdigest()

    def save_layout(self, layout: MazeLayout, filename) -> str:
        path = self.resolve(filename)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            f.write(layout.to_text())
        return path

    def load_layout(self, filename, cell_size=1.0, layout_id=None) -> MazeLayout:
        path = self.resolve(filename)
        if not os.path.exists(path):
            raise MissingFileError(f"layout file not found: {path}")
        with open(path, "r") as f:
            text = f.read()
        if layout_id is None:
            layout_id = os.path.splitext(os.path.basename(path))[0]
        return MazeLayout.from_text(text, cell_size=cell_size, layout_id=layout_id)


def _pack_str(value: str) -> bytes:
    encoded = value.encode("utf-8")
    return struct.pack("<H", len(encoded)) + encoded


class ByteReader:
    """Bounds-checked cursor over a little-endian buffer; overruns raise DatasetError"""

    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.offset = 0
        self.source = source

    @property
    def remaining(self):
        return len(self.raw) - self.offset

    def take(self, n):
        if self.offset + n > len(self.raw):
            raise DatasetError(f"{self.source}: truncated file")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, layout: struct.Struct):
        return layout.unpack(self.take(layout.size))

    def string(self):
        (n,) = self.unpack(struct.Struct("<H"))
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetError(f"{self.source}: bad string at offset {self.offset - n}") from exc
