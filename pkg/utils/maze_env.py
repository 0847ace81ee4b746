"""Point-mass maze: layouts, double-integrator physics, top-down rendering, grid distances.

Coordinates: world (x, y) with x along grid columns and y along grid rows, so
cell (cx, cy) is `grid[cy, cx]`. The image uses the same orientation
(image row <-> y, image column <-> x).
"""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from utils.errors import ConstraintUnsatisfiedError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

F32 = np.float32
NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True, eq=False)
class MazeLayout:
    """Boolean wall grid (True = wall) with an implicit solid outer wall"""

    grid: np.ndarray
    cell_size: float = 1.0
    layout_id: str = ""

    def __post_init__(self):
        grid = np.array(self.grid, dtype=bool, copy=True)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"layout grid must be square, got shape {grid.shape}")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def G(self) -> int:
        return int(self.grid.shape[0])

    @property
    def extent(self) -> float:
        return self.G * self.cell_size

    @property
    def free_fraction(self) -> float:
        return float(1.0 - self.grid.mean())

    def free_cells(self) -> List[Cell]:
        ys, xs = np.nonzero(~self.grid)
        return [(int(cx), int(cy)) for cx, cy in zip(xs, ys)]

    def in_bounds(self, cell: Cell) -> bool:
        cx, cy = cell
        return 0 <= cx < self.G and 0 <= cy < self.G

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.grid[cell[1], cell[0]]

    def cell_of(self, x: float, y: float) -> Cell:
        return (int(np.floor(x / self.cell_size)), int(np.floor(y / self.cell_size)))

    def cell_center(self, cell: Cell) -> np.ndarray:
        return ((np.asarray(cell, dtype=np.float64) + 0.5) * self.cell_size).astype(F32)

    def point_in_wall(self, x: float, y: float) -> bool:
        """True when (x, y) is outside the arena or inside a wall cell"""
        return not self.is_free(self.cell_of(x, y))

    def points_in_wall(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        cx = np.floor(np.asarray(xs) / self.cell_size).astype(np.int64)
        cy = np.floor(np.asarray(ys) / self.cell_size).astype(np.int64)
        inside = (cx >= 0) & (cx < self.G) & (cy >= 0) & (cy < self.G)
        wall = np.ones(np.shape(cx), dtype=bool)
        wall[inside] = self.grid[cy[inside], cx[inside]]
        return wall

    def same_grid(self, other: "MazeLayout") -> bool:
        return self.cell_size == other.cell_size and np.array_equal(self.grid, other.grid)

    def digest(self) -> str:
        return hashlib.sha256(self.grid.astype(np.uint8).tobytes()).hexdigest()

    def to_text(self) -> str:
        """One row of '#'/'.' per grid row"""
        return "\n".join("".join("#" if wall else "." for wall in row) for row in self.grid) + "\n"

    @classmethod
    def from_text(cls, text: str, cell_size: float = 1.0, layout_id: str = "") -> "MazeLayout":
        rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
        if any(set(row) - {"#", "."} for row in rows):
            raise ValueError("layout text may only contain '#' and '.'")
        grid = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
        return cls(grid=grid, cell_size=cell_size, layout_id=layout_id)


@dataclass(frozen=True)
class EnvParams:
    a_scale: float = 0.1
    v_max: float = 0.5
    resolution: int = 64
    blob_sigma: float = 1.5

    @classmethod
    def from_config(cls, env_cfg) -> "EnvParams":
        return cls(a_scale=env_cfg.a_scale, v_max=env_cfg.v_max,
                   resolution=env_cfg.resolution, blob_sigma=env_cfg.blob_sigma)


@dataclass
class EnvState:
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=F32))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=F32).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=F32).reshape(2)

    def as_vector(self) -> np.ndarray:
        """(x, y, vx, vy) as float32"""
        return np.concatenate([self.position, self.velocity]).astype(F32)

    @classmethod
    def from_vector(cls, vector) -> "EnvState":
        vector = np.asarray(vector, dtype=F32)
        return cls(position=vector[:2], velocity=vector[2:4])


@dataclass
class Observation:
    image: np.ndarray
    proprio: np.ndarray


def is_connected(grid: np.ndarray) -> bool:
    """All free cells form one 4-connected component"""
    _, components = ndimage.label(~np.asarray(grid, dtype=bool))
    return components == 1


def generate_layout(
    seed: int,
    G: int = 8,
    free_frac_range: Sequence[float] = (0.5, 0.8),
    max_attempts: int = 10_000,
    cell_size: float = 1.0,
    layout_id: Optional[str] = None,
) -> MazeLayout:
    """Rejection-sample a uniform wall placement until it is connected and within the free range"""
    lo, hi = float(free_frac_range[0]), float(free_frac_range[1])
    if G < 4:
        raise ValueError(f"grid size must be >= 4, got {G}")
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"free fraction range must lie inside (0, 1), got {free_frac_range}")

    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        wall_prob = 1.0 - rng.uniform(lo, hi)
        grid = rng.random((G, G)) < wall_prob
        free = 1.0 - grid.mean()
        if lo <= free <= hi and is_connected(grid):
            logger.debug("layout seed=%d accepted after %d attempts (free=%.2f)", seed, attempt + 1, free)
            return MazeLayout(grid=grid, cell_size=cell_size, layout_id=layout_id or f"seed-{seed}")
    raise ConstraintUnsatisfiedError(
        f"no connected {G}x{G} layout with free fraction in [{lo}, {hi}] after {max_attempts} attempts (seed {seed})"
    )


def step(state: EnvState, action, layout: MazeLayout, params: EnvParams = EnvParams()) -> EnvState:
    """Double integrator with per-axis collision resolution"""
    a = np.clip(np.asarray(action, dtype=F32).reshape(2), F32(-1.0), F32(1.0))
    v_max = F32(params.v_max)
    velocity = np.clip(state.velocity + a * F32(params.a_scale), -v_max, v_max).astype(F32)

    x, y = state.position
    new_x = F32(x + velocity[0])
    if layout.point_in_wall(new_x, y):
        new_x = x
        velocity[0] = F32(0.0)
    new_y = F32(y + velocity[1])
    if layout.point_in_wall(new_x, new_y):
        new_y = y
        velocity[1] = F32(0.0)
    return EnvState(position=np.array([new_x, new_y], dtype=F32), velocity=velocity)


def sample_free_position(layout: MazeLayout, rng: np.random.Generator) -> np.ndarray:
    """Uniform over the free area: pick a free cell, then a point inside it"""
    cells = layout.free_cells()
    cx, cy = cells[rng.integers(len(cells))]
    offset = rng.random(2)
    return ((np.array([cx, cy]) + offset) * layout.cell_size).astype(F32)


@lru_cache(maxsize=64)
def _wall_channel(grid_bytes: bytes, G: int, cell_size: float, resolution: int) -> np.ndarray:
    layout = MazeLayout(grid=np.frombuffer(grid_bytes, dtype=bool).reshape(G, G), cell_size=cell_size)
    centers = _pixel_world_coords(G, cell_size, resolution)
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    channel = layout.points_in_wall(xs, ys).astype(F32)
    channel.setflags(write=False)
    return channel


def _pixel_world_coords(G: int, cell_size: float, resolution: int) -> np.ndarray:
    # the image spans [-cell, (G+1)*cell] so the implicit outer wall is a one-cell ring
    span = (G + 2) * cell_size
    return (np.arange(resolution) + 0.5) / resolution * span - cell_size


def wall_channel(layout: MazeLayout, resolution: int) -> np.ndarray:
    return _wall_channel(layout.grid.tobytes(), layout.G, float(layout.cell_size), int(resolution))


def world_to_pixel(positions: np.ndarray, layout: MazeLayout, resolution: int) -> np.ndarray:
    """Continuous (col, row) pixel coordinates for world positions"""
    span = (layout.G + 2) * layout.cell_size
    return (np.asarray(positions, dtype=np.float64) + layout.cell_size) / span * resolution - 0.5


def render_batch(states: np.ndarray, layout: MazeLayout, params: EnvParams = EnvParams()) -> Tuple[np.ndarray, np.ndarray]:
    """Render (N, 4) state vectors into (N, 3, R, R) images and (N, 2) proprio"""
    states = np.asarray(states, dtype=F32).reshape(-1, 4)
    n, res, sigma = states.shape[0], params.resolution, params.blob_sigma
    images = np.zeros((n, 3, res, res), dtype=F32)
    images[:, 0] = wall_channel(layout, res)

    pix = world_to_pixel(states[:, :2], layout, res)
    grid = np.arange(res, dtype=np.float64)
    dx2 = (grid[None, :] - pix[:, 0:1]) ** 2
    dy2 = (grid[None, :] - pix[:, 1:2]) ** 2
    d2 = dy2[:, :, None] + dx2[:, None, :]
    blob = np.exp(-d2 / (2.0 * sigma**2))
    blob[d2 > (3.0 * sigma) ** 2] = 0.0
    mass = blob.sum(axis=(1, 2), keepdims=True)
    images[:, 1] = (blob / mass * (np.pi * sigma**2)).astype(F32)
    return images, states[:, 2:4].copy()


def render(state: EnvState, layout: MazeLayout, params: EnvParams = EnvParams()) -> Observation:
    images, proprio = render_batch(state.as_vector()[None], layout, params)
    return Observation(image=images[0], proprio=proprio[0])


def distance_map(layout: MazeLayout, source: Cell) -> Dict[Cell, int]:
    """BFS distances in cells from `source` to every reachable free cell"""
    if not layout.is_free(source):
        raise ValueError(f"cell {source} is not free")
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in NEIGHBOURS:
            nxt = (cx + dx, cy + dy)
            if nxt not in dist and layout.is_free(nxt):
                dist[nxt] = dist[(cx, cy)] + 1
                queue.append(nxt)
    return dist


def grid_distance(layout: MazeLayout, a: Cell, b: Cell) -> int:
    a, b = tuple(a), tuple(b)
    if not layout.is_free(b):
        raise ValueError(f"cell {b} is not free")
    dist = distance_map(layout, a)
    if b not in dist:
        raise ValueError(f"cell {b} unreachable from {a}")
    return dist[b]


def shortest_path(layout: MazeLayout, a: Cell, b: Cell) -> List[Cell]:
    """Cells from a to b inclusive along one BFS shortest path"""
    a, b = tuple(a), tuple(b)
    dist = distance_map(layout, b)
    if a not in dist:
        raise ValueError(f"cell {b} unreachable from {a}")
    path = [a]
    while path[-1] != b:
        cx, cy = path[-1]
        # neighbour order is fixed, so ties always resolve the same way
        for dx, dy in NEIGHBOURS:
            nxt = (cx + dx, cy + dy)
            if dist.get(nxt, -1) == dist[(cx, cy)] - 1:
                path.append(nxt)
                break
    return path
