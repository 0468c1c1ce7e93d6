"""Deterministic 2D object-goal navigation world.

The world is a wall-bounded occupancy grid with 0.25 m cells.  The agent is a
point with a continuous position, a heading on the 30 degree lattice and a
camera pitch that Look actions move between -30, 0 and +30 degrees.  Headings
are counter-clockwise from the +x axis; row index grows with y.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import kernels

CELL_SIZE_M = 0.25
SUCCESS_RADIUS_M = 1.0
PATCH_SIZE = 11
PATCH_RADIUS = PATCH_SIZE // 2
RAY_OFFSETS_DEG = (-60, -30, 0, 30, 60)
RAY_MAX_DEPTH_M = 3.0
GOAL_RANGE_CAP_M = 8.0  # reported range when no goal is in sight
# sight lines go to the goal cell centre and to points inset from its corners
_SIGHT_OFFSETS = ((0.5, 0.5), (0.1, 0.1), (0.9, 0.1), (0.1, 0.9), (0.9, 0.9))
VIEW_DIM = 4 + len(RAY_OFFSETS_DEG)

GOAL_CATEGORIES = ("chair", "bed", "plant", "toilet", "tv_monitor", "sofa")


class Action(IntEnum):
    STOP = 0
    MOVE_FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    LOOK_UP = 4
    LOOK_DOWN = 5


N_ACTIONS = len(Action)

_S3 = math.sqrt(3.0) / 2.0
# exact unit vectors for the 12 lattice headings
_COS = (1.0, _S3, 0.5, 0.0, -0.5, -_S3, -1.0, -_S3, -0.5, 0.0, 0.5, _S3)
_SIN = (0.0, 0.5, _S3, 1.0, _S3, 0.5, 0.0, -0.5, -_S3, -1.0, -_S3, -0.5)


def heading_vector(heading_deg: int) -> tuple[float, float]:
    i = (heading_deg // 30) % 12
    return _COS[i], _SIN[i]


def category_index(category: str) -> int:
    try:
        return GOAL_CATEGORIES.index(category)
    except ValueError:
        raise ValueError(f"unknown goal category {category!r}") from None


Cell = tuple[int, int]  # (x_cell, y_cell) == (col, row)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    occupied: np.ndarray  # bool (height, width), indexed [row, col]
    goals: Mapping[str, tuple[Cell, ...]]
    cell_size_m: float = CELL_SIZE_M
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        occ = np.array(self.occupied, dtype=bool)
        occ.setflags(write=False)
        object.__setattr__(self, "occupied", occ)
        goals = {c: tuple((int(x), int(y)) for x, y in self.goals.get(c, ())) for c in GOAL_CATEGORIES}
        unknown = set(self.goals) - set(GOAL_CATEGORIES)
        if unknown:
            raise ValueError(f"unknown goal categories: {sorted(unknown)}")
        object.__setattr__(self, "goals", goals)
        if self.cell_size_m != CELL_SIZE_M:
            raise ValueError(f"cell_size_m must be {CELL_SIZE_M}, got {self.cell_size_m}")
        if occ.ndim != 2 or min(occ.shape) < 3:
            raise ValueError(f"occupancy must be a 2D grid of at least 3x3, got {occ.shape}")
        if not (occ[0].all() and occ[-1].all() and occ[:, 0].all() and occ[:, -1].all()):
            raise ValueError("border cells must all be occupied")
        for cat, cells in goals.items():
            for x, y in cells:
                if not self.in_bounds((x, y)) or occ[y, x]:
                    raise ValueError(f"goal {cat} at {(x, y)} is not a free cell")

    @property
    def width_cells(self) -> int:
        return self.occupied.shape[1]

    @property
    def height_cells(self) -> int:
        return self.occupied.shape[0]

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width_cells and 0 <= y < self.height_cells

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.occupied[cell[1], cell[0]]

    def free_cells(self) -> list[Cell]:
        rows, cols = np.nonzero(~self.occupied)
        return [(int(c), int(r)) for r, c in zip(rows, cols)]

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return np.array_equal(self.occupied, other.occupied) and self.goals == other.goals

    def __hash__(self):
        return hash((self.occupied.tobytes(), self.occupied.shape))

    # -- memoised derived data (the grid itself never changes) --

    def _memo(self, key, build):
        try:
            return self._cache[key]
        except KeyError:
            value = self._cache[key] = build()
            return value

    def distance_field(self, cells: Iterable[Cell]) -> np.ndarray:
        """Geodesic distance (m) from every cell to the nearest of ``cells``."""
        cells = sorted(set(cells))
        if not cells:
            raise ValueError("distance field needs at least one target cell")

        def build():
            xs = np.array([c[0] for c in cells], dtype=np.int64)
            ys = np.array([c[1] for c in cells], dtype=np.int64)
            out = kernels.distance_field(self.occupied, ys, xs)
            out.setflags(write=False)
            return out

        return self._memo(("field", tuple(cells)), build)

    def goal_field(self, category: str) -> np.ndarray:
        return self.distance_field(self.goals[category])

    def success_field(self, goal_cells: Iterable[Cell]) -> np.ndarray:
        """Geodesic distance to the nearest cell within the success radius of a goal."""
        goal_cells = tuple(sorted(set(goal_cells)))

        def build():
            g = self.distance_field(goal_cells)
            rows, cols = np.nonzero(g <= SUCCESS_RADIUS_M + 1e-9)
            return self.distance_field(zip(cols.tolist(), rows.tolist()))

        return self._memo(("success", goal_cells), build)

    def padded(self) -> np.ndarray:
        return self._memo("padded", lambda: np.pad(self.occupied, PATCH_RADIUS, constant_values=True))

    # -- serialisation --

    def to_json(self) -> dict:
        rows = ["".join("#" if v else "." for v in row) for row in self.occupied]
        goals = {c: [list(cell) for cell in self.goals[c]] for c in GOAL_CATEGORIES if self.goals[c]}
        return {"cell_size_m": self.cell_size_m, "rows": rows, "goals": goals}

    @classmethod
    def from_json(cls, data: Mapping) -> "OccupancyGrid":
        rows = data["rows"]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("map rows must be non-empty and equally long")
        bad = set("".join(rows)) - {"#", "."}
        if bad:
            raise ValueError(f"map rows contain unexpected characters {sorted(bad)}")
        occ = np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)
        goals = {c: [tuple(cell) for cell in cells] for c, cells in data.get("goals", {}).items()}
        return cls(occ, goals, float(data.get("cell_size_m", CELL_SIZE_M)))


_MAP_CACHE: dict[tuple, OccupancyGrid] = {}


def save_map(grid: OccupancyGrid, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(grid.to_json(), indent=1) + "\n")


def load_map(path: str | os.PathLike) -> OccupancyGrid:
    st = os.stat(path)
    key = (os.path.abspath(path), st.st_mtime_ns, st.st_size)
    grid = _MAP_CACHE.get(key)
    if grid is None:
        with open(path) as fh:
            grid = OccupancyGrid.from_json(json.load(fh))
        _MAP_CACHE[key] = grid
    return grid


@dataclass(frozen=True)
class Pose:
    x_m: float
    y_m: float
    heading_deg: int = 0
    pitch_deg: int = 0

    @property
    def cell(self) -> Cell:
        return int(math.floor(self.x_m / CELL_SIZE_M)), int(math.floor(self.y_m / CELL_SIZE_M))

    @classmethod
    def at_cell(cls, cell: Cell, heading_deg: int = 0, pitch_deg: int = 0) -> "Pose":
        return cls((cell[0] + 0.5) * CELL_SIZE_M, (cell[1] + 0.5) * CELL_SIZE_M, heading_deg, pitch_deg)

    def to_json(self) -> dict:
        return {"x_m": self.x_m, "y_m": self.y_m, "heading_deg": self.heading_deg, "pitch_deg": self.pitch_deg}

    @classmethod
    def from_json(cls, d: Mapping) -> "Pose":
        return cls(float(d["x_m"]), float(d["y_m"]), int(d["heading_deg"]), int(d["pitch_deg"]))


@dataclass(frozen=True)
class Episode:
    id: str
    map_path: str
    start: Pose
    goal: str
    d_init_m: float
    grid: OccupancyGrid | None = field(default=None, repr=False, compare=False)

    @property
    def goal_cells(self) -> tuple[Cell, ...]:
        return self.grid.goals[self.goal]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "map_path": self.map_path,
            "start": self.start.to_json(),
            "goal": self.goal,
            "d_init_m": self.d_init_m,
        }

    @classmethod
    def from_json(cls, d: Mapping, grid: OccupancyGrid | None = None) -> "Episode":
        return cls(str(d["id"]), str(d["map_path"]), Pose.from_json(d["start"]), str(d["goal"]),
                   float(d["d_init_m"]), grid)


@dataclass(frozen=True)
class StepOutcome:
    pose: Pose
    collided: bool
    stopped: bool


@dataclass(frozen=True, eq=False)
class Observation:
    patch: np.ndarray  # uint8 (121,), row-major 11x11, world aligned
    gps: tuple[float, float]
    compass: float
    prev_action: int | None
    goal: int
    collided_last: bool
    # egocentric view summary: goal visible flag, goal forward/left offsets and
    # grid range (m, capped, the cap when unseen), then depth (m) along each
    # ray in RAY_OFFSETS_DEG
    view: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.patch, other.patch)
            and self.gps == other.gps
            and self.compass == other.compass
            and self.prev_action == other.prev_action
            and self.goal == other.goal
            and self.collided_last == other.collided_last
            and np.array_equal(self.view, other.view)
        )


def step(grid: OccupancyGrid, pose: Pose, action: int) -> StepOutcome:
    action = Action(action)
    if action is Action.STOP:
        return StepOutcome(pose, False, True)
    if action is Action.TURN_LEFT:
        return StepOutcome(Pose(pose.x_m, pose.y_m, (pose.heading_deg + 30) % 360, pose.pitch_deg), False, False)
    if action is Action.TURN_RIGHT:
        return StepOutcome(Pose(pose.x_m, pose.y_m, (pose.heading_deg - 30) % 360, pose.pitch_deg), False, False)
    if action is Action.LOOK_UP:
        return StepOutcome(Pose(pose.x_m, pose.y_m, pose.heading_deg, min(pose.pitch_deg + 30, 30)), False, False)
    if action is Action.LOOK_DOWN:
        return StepOutcome(Pose(pose.x_m, pose.y_m, pose.heading_deg, max(pose.pitch_deg - 30, -30)), False, False)
    ux, uy = heading_vector(pose.heading_deg)
    blocked, x1, y1 = kernels.move_blocked(grid.occupied, pose.x_m, pose.y_m, ux, uy)
    if blocked:
        return StepOutcome(pose, True, False)
    return StepOutcome(Pose(x1, y1, pose.heading_deg, pose.pitch_deg), False, False)


def colliding_actions(grid: OccupancyGrid, pose: Pose) -> frozenset[Action]:
    # only a forward move can change position, so only it can collide
    ux, uy = heading_vector(pose.heading_deg)
    blocked, _, _ = kernels.move_blocked(grid.occupied, pose.x_m, pose.y_m, ux, uy)
    return frozenset({Action.MOVE_FORWARD}) if blocked else frozenset()


def wrap_angle(rad: float) -> float:
    """Wrap to [-pi, pi)."""
    return (rad + math.pi) % (2.0 * math.pi) - math.pi


def observe(
    grid: OccupancyGrid,
    pose: Pose,
    episode: Episode,
    prev_action: int | None,
    collided_last: bool,
) -> Observation:
    cx, cy = pose.cell
    patch = grid.padded()[cy : cy + PATCH_SIZE, cx : cx + PATCH_SIZE].astype(np.uint8).ravel()
    gps = (pose.x_m - episode.start.x_m, pose.y_m - episode.start.y_m)
    compass = wrap_angle(math.radians(pose.heading_deg - episode.start.heading_deg))
    return Observation(
        patch=patch,
        gps=gps,
        compass=compass,
        prev_action=None if prev_action is None else int(prev_action),
        goal=category_index(episode.goal),
        collided_last=bool(collided_last),
        view=egocentric_view(grid, pose, episode.goal),
    )


def egocentric_view(grid: OccupancyGrid, pose: Pose, category: str) -> np.ndarray:
    """Goal sighting plus ray depths, expressed in the agent's heading frame."""
    occ = grid.occupied
    view = np.zeros(VIEW_DIM)
    view[3] = GOAL_RANGE_CAP_M
    best = math.inf
    cx, cy = pose.cell
    for gx, gy in grid.goals[category]:
        # grid range: octile distance between cells, which matches the geodesic
        # whenever the straight cell path is open
        ax, ay = abs(gx - cx), abs(gy - cy)
        rng_m = CELL_SIZE_M * (max(ax, ay) - min(ax, ay) + kernels.SQRT2 * min(ax, ay))
        if rng_m >= best:
            continue
        # goals inside the local patch window are sensed like its occupancy,
        # without a sight line; farther ones need one
        seen = max(ax, ay) <= PATCH_RADIUS or any(
            kernels.line_of_sight(occ, pose.x_m, pose.y_m, (gx + fx) * CELL_SIZE_M, (gy + fy) * CELL_SIZE_M, 0.05)
            for fx, fy in _SIGHT_OFFSETS
        )
        if seen:
            best = rng_m
            tx, ty = (gx + 0.5) * CELL_SIZE_M, (gy + 0.5) * CELL_SIZE_M
            ux, uy = heading_vector(pose.heading_deg)
            dx, dy = tx - pose.x_m, ty - pose.y_m
            view[0] = 1.0
            view[1] = dx * ux + dy * uy
            view[2] = -dx * uy + dy * ux
            view[3] = min(rng_m, GOAL_RANGE_CAP_M)
    for i, off in enumerate(RAY_OFFSETS_DEG):
        ux, uy = heading_vector((pose.heading_deg + off) % 360)
        view[4 + i] = kernels.ray_depth(occ, pose.x_m, pose.y_m, ux, uy, RAY_MAX_DEPTH_M, 0.05)
    return view


def geodesic_distance(grid: OccupancyGrid, from_cell: Cell, to_cells: Iterable[Cell]) -> float:
    if not grid.is_free(from_cell):
        raise ValueError(f"from_cell {from_cell} is not a free cell")
    to_cells = list(to_cells)
    if not to_cells:
        raise ValueError("to_cells must be non-empty")
    return float(grid.distance_field(to_cells)[from_cell[1], from_cell[0]])


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

MIN_ROOM = 7
MAX_ROOM = 16
DOOR_WIDTH = 3


def generate_map(
    width_cells: int = 40,
    height_cells: int = 40,
    obstacle_density: float = 0.15,
    goal_counts: Mapping[str, int] | None = None,
    seed: int = 0,
    max_retries: int = 20,
) -> OccupancyGrid:
    """Rooms split by walls with doorways, furniture blocks, and goal instances.

    Interior walls and furniture together fill ``obstacle_density`` of the
    interior.  Pockets cut off from the largest free region are filled in.
    """
    if width_cells < 10 or height_cells < 10:
        raise ValueError("map must be at least 10x10 cells")
    if not 0.0 <= obstacle_density <= 0.35:
        raise ValueError("obstacle_density must lie in [0, 0.35]")
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        grid = _try_generate(width_cells, height_cells, obstacle_density, goal_counts, rng)
        if grid is not None:
            return grid
    raise RuntimeError(f"map generation failed after {max_retries} attempts (seed={seed})")


def _try_generate(width, height, density, goal_counts, rng):
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    keep_free = np.zeros_like(occ)
    n_interior = (width - 2) * (height - 2)
    budget = int(round(density * n_interior))
    used = 0

    def split(r0, c0, r1, c1):
        nonlocal used
        h, w = r1 - r0 + 1, c1 - c0 + 1
        vertical = w >= h
        span = w if vertical else h
        if span < 2 * MIN_ROOM + 1 or (span <= MAX_ROOM and rng.random() < 0.5):
            return
        length = h if vertical else w
        if used + length > budget:
            return
        pos = int(rng.integers(MIN_ROOM, span - MIN_ROOM))
        door = int(rng.integers(0, max(1, length - DOOR_WIDTH + 1)))
        for k in range(length):
            r, c = (r0 + k, c0 + pos) if vertical else (r0 + pos, c0 + k)
            if door <= k < door + DOOR_WIDTH:
                keep_free[r, c] = True
                if vertical:
                    keep_free[r, c - 1] = keep_free[r, c + 1] = True
                else:
                    keep_free[r - 1, c] = keep_free[r + 1, c] = True
            elif not keep_free[r, c] and not occ[r, c]:
                occ[r, c] = True
                used += 1
        if vertical:
            split(r0, c0, r1, c0 + pos - 1)
            split(r0, c0 + pos + 1, r1, c1)
        else:
            split(r0, c0, r0 + pos - 1, c1)
            split(r0 + pos + 1, c0, r1, c1)

    if budget > 0:
        split(1, 1, height - 2, width - 2)
    tries = 0
    while used < budget and tries < 50 * (budget + 1):
        tries += 1
        bh, bw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        r = int(rng.integers(1, height - 1 - bh + 1))
        c = int(rng.integers(1, width - 1 - bw + 1))
        block = (slice(r, r + bh), slice(c, c + bw))
        if keep_free[block].any():
            continue
        fresh = int((~occ[block]).sum())
        if used + fresh > budget:
            continue
        occ[block] = True
        used += fresh

    labels, n = ndimage.label(~occ)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    occ = labels != int(np.argmax(sizes))

    free = np.argwhere(~occ & ~keep_free)
    rng.shuffle(free)
    goals: dict[str, list[Cell]] = {}
    taken = 0
    for cat in GOAL_CATEGORIES:
        k = int(goal_counts[cat]) if goal_counts and cat in goal_counts else int(rng.integers(1, 4))
        if taken + k > len(free):
            return None
        goals[cat] = [(int(c), int(r)) for r, c in free[taken : taken + k]]
        taken += k
    return OccupancyGrid(occ, goals)


def generate_episode(
    grid: OccupancyGrid,
    category: str,
    seed: int,
    d_min: float = 1.5,
    d_max: float = 8.0,
    episode_id: str | None = None,
    map_path: str = "",
    max_retries: int = 10_000,
) -> Episode:
    if not grid.goals.get(category):
        raise ValueError(f"no {category!r} instance on this map")
    field_ = grid.goal_field(category)
    free = grid.free_cells()
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        cell = free[int(rng.integers(len(free)))]
        heading = int(rng.integers(12)) * 30
        d = float(field_[cell[1], cell[0]])
        if d_min <= d <= d_max:
            eid = episode_id if episode_id is not None else f"ep-{seed}"
            return Episode(eid, map_path, Pose.at_cell(cell, heading, 0), category, d, grid)
    raise RuntimeError(f"no valid start for {category!r} within [{d_min}, {d_max}] m after {max_retries} draws")


def write_episodes(episodes: Sequence[Episode], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json()) + "\n")


def iter_episodes(path: str | os.PathLike, load_grids: bool = True) -> Iterator[Episode]:
    base = Path(path).parent
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                grid = None
                if load_grids:
                    grid = load_map(resolve_map_path(d["map_path"], base))
                yield Episode.from_json(d, grid)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad episode record: {exc}") from exc


def read_episodes(path: str | os.PathLike, load_grids: bool = True) -> list[Episode]:
    return list(iter_episodes(path, load_grids))


def resolve_map_path(map_path: str, base: str | os.PathLike) -> str:
    p = Path(map_path)
    if p.is_absolute():
        return str(p)
    candidate = Path(base) / p
    return str(candidate) if candidate.exists() or not p.exists() else str(p)
