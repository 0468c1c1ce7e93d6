"""Shortest-path expert and the demonstration corpus format."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import kernels
from .kernels import SQRT2
from .gridworld import (
    GOAL_CATEGORIES,
    N_ACTIONS,
    PATCH_SIZE,
    SUCCESS_RADIUS_M,
    VIEW_DIM,
    Action,
    Cell,
    Episode,
    Observation,
    OccupancyGrid,
    Pose,
    generate_episode,
    heading_vector,
    load_map,
    observe,
    resolve_map_path,
    step,
)

log = logging.getLogger(__name__)


class UnreachableGoal(RuntimeError):
    pass


_STEPS = ((1, 0, 1.0), (0, 1, 1.0), (-1, 0, 1.0), (0, -1, 1.0),
          (1, 1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2), (1, -1, SQRT2))


def shortest_path_cells(grid: OccupancyGrid, field_: np.ndarray, cell: Cell, limit: int = 64) -> list[Cell]:
    """Cells of one shortest path down ``field_`` starting after ``cell``."""
    occ = grid.occupied
    path = []
    x, y = cell
    for _ in range(limit):
        here = field_[y, x]
        if here == 0.0:
            break
        best, best_v = None, here
        for dx, dy, w in _STEPS:
            nx, ny = x + dx, y + dy
            if occ[ny, nx] or (dx and dy and (occ[y, nx] or occ[ny, x])):
                continue
            v = field_[ny, nx] + 0.25 * w
            if v < best_v - 1e-9 or (best is None and v <= best_v + 1e-9):
                best, best_v = (nx, ny), v
        if best is None:
            break
        x, y = best
        path.append(best)
    return path


def expert_action(grid: OccupancyGrid, pose: Pose, goal_cells: Iterable[Cell]) -> Action:
    """Steer toward the farthest visible cell of a geodesic shortest path.

    The shortest path to the success region (cells within 1 m geodesic of a
    goal) is pulled taut: the waypoint is its farthest cell whose centre is in
    clear line of sight.  Each lattice heading is tried as a hypothetical
    forward step; the expert picks the non-colliding one that ends closest to
    the waypoint, provided it gets closer at all.  Ties go to fewer turns, then
    to the counter-clockwise side.  The choice is independent of the current
    heading, so successive turns converge on it instead of oscillating.
    """
    goal_cells = tuple(goal_cells)
    occ = grid.occupied
    cx, cy = pose.cell
    d_goal = grid.distance_field(goal_cells)[cy, cx]
    if not math.isfinite(d_goal):
        raise UnreachableGoal(f"no goal reachable from cell {(cx, cy)}")
    if d_goal <= SUCCESS_RADIUS_M + 1e-9:
        return Action.STOP
    field_ = grid.success_field(goal_cells)
    path = shortest_path_cells(grid, field_, (cx, cy))
    if not path:
        raise UnreachableGoal(f"no shortest path from cell {(cx, cy)}")
    wx, wy = (path[0][0] + 0.5) * 0.25, (path[0][1] + 0.5) * 0.25
    for px, py in reversed(path[1:]):
        tx, ty = (px + 0.5) * 0.25, (py + 0.5) * 0.25
        if kernels.line_of_sight(occ, pose.x_m, pose.y_m, tx, ty, 0.02):
            wx, wy = tx, ty
            break
    here = math.hypot(wx - pose.x_m, wy - pose.y_m)
    best = _best_heading(occ, pose, lambda x1, y1: math.hypot(wx - x1, wy - y1), here)
    if best is None:
        # the taut line clips a corner: fall back to descending cell by cell
        best = _best_heading(occ, pose, lambda x1, y1: field_[int(y1 * 4.0), int(x1 * 4.0)], field_[cy, cx])
    if best is None:
        raise UnreachableGoal(f"no progress possible from pose {pose}")
    left, right = best
    if left == 0:
        return Action.MOVE_FORWARD
    return Action.TURN_LEFT if left <= right else Action.TURN_RIGHT


def _best_heading(occ, pose, score, here):
    """(left_turns, right_turns) to the forward step that lowers ``score`` most."""
    best = None
    for k in range(12):
        heading = 30 * k
        ux, uy = heading_vector(heading)
        blocked, x1, y1 = kernels.move_blocked(occ, pose.x_m, pose.y_m, ux, uy)
        if blocked:
            continue
        there = score(x1, y1)
        if not there < here - 1e-9:
            continue
        left = ((heading - pose.heading_deg) // 30) % 12
        right = (12 - left) % 12
        key = (round(float(there), 9), min(left, right), 0 if left <= right else 1)
        if best is None or key < best[0]:
            best = (key, left, right)
    return None if best is None else best[1:]


@dataclass(frozen=True)
class ExpertConfig:
    noise_eps: float = 0.15
    max_steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_eps <= 1.0:
            raise ValueError("noise_eps must lie in [0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass(frozen=True)
class DemoStep:
    observation: Observation
    action: int
    collided: bool


@dataclass
class DemonstrationRecord:
    episode: Episode
    steps: list[DemoStep] = field(default_factory=list)
    success: bool = False

    def __len__(self):
        return len(self.steps)


def rollout_expert(episode: Episode, noise_eps: float, max_steps: int, rng: np.random.Generator) -> DemonstrationRecord:
    grid = episode.grid
    goal_cells = episode.goal_cells
    pose = episode.start
    prev, collided_last = None, False
    rec = DemonstrationRecord(episode)
    for _ in range(max_steps):
        obs = observe(grid, pose, episode, prev, collided_last)
        action = expert_action(grid, pose, goal_cells)
        if rng.random() < noise_eps:
            action = Action(int(rng.integers(1, N_ACTIONS)))
        out = step(grid, pose, action)
        rec.steps.append(DemoStep(obs, int(action), out.collided))
        pose, prev, collided_last = out.pose, int(action), out.collided
        if out.stopped:
            cx, cy = pose.cell
            rec.success = bool(grid.distance_field(goal_cells)[cy, cx] <= SUCCESS_RADIUS_M + 1e-9)
            break
    return rec


def make_episodes(
    maps: Sequence[tuple[str, OccupancyGrid]],
    episodes_per_map: int,
    seed: int,
    prefix: str = "ep",
    d_min: float = 1.5,
    d_max: float = 8.0,
) -> list[Episode]:
    """Episodes spread uniformly over maps, goal categories drawn per episode."""
    out = []
    for mi, (path, grid) in enumerate(maps):
        rng = np.random.default_rng([seed, mi])
        cats = [c for c in GOAL_CATEGORIES if grid.goals[c]]
        for k in range(episodes_per_map):
            cat = cats[int(rng.integers(len(cats)))]
            ep_seed = int(rng.integers(2**31))
            out.append(generate_episode(grid, cat, ep_seed, d_min, d_max, f"{prefix}-{mi:03d}-{k:03d}", path))
    return out


def generate_demonstrations(
    maps: Sequence[tuple[str, OccupancyGrid]] | Sequence[OccupancyGrid],
    episodes_per_map: int,
    config: ExpertConfig,
    episodes: Sequence[Episode] | None = None,
) -> list[DemonstrationRecord]:
    """Expert rollouts with epsilon noise; unreachable episodes are skipped and logged."""
    maps = [m if isinstance(m, tuple) else (f"map-{i:03d}", m) for i, m in enumerate(maps)]
    if episodes is None:
        episodes = make_episodes(maps, episodes_per_map, config.seed, prefix="demo")
    records, skipped = [], 0
    for i, ep in enumerate(episodes):
        rng = np.random.default_rng([config.seed, 7919, i])
        try:
            records.append(rollout_expert(ep, config.noise_eps, config.max_steps, rng))
        except UnreachableGoal as exc:
            skipped += 1
            log.warning("skipping %s: %s", ep.id, exc)
    if skipped:
        log.warning("%d of %d demonstration episodes skipped", skipped, len(episodes))
    return records


# ---------------------------------------------------------------------------
# corpus I/O (JSON Lines: one header line per episode, then one line per step)
# ---------------------------------------------------------------------------


class DemoFormatError(ValueError):
    def __init__(self, path, lineno, field_name, msg):
        self.path, self.lineno, self.field = str(path), lineno, field_name
        super().__init__(f"{path}:{lineno}: field {field_name!r}: {msg}")


def step_to_json(episode_id: str, t: int, s: DemoStep) -> dict:
    o = s.observation
    return {
        "episode_id": episode_id,
        "t": t,
        "patch": o.patch.tolist(),
        "gps": list(o.gps),
        "compass": o.compass,
        "prev_action": o.prev_action,
        "goal": o.goal,
        "collided_last": o.collided_last,
        "view": o.view.tolist(),
        "action": s.action,
        "collided": s.collided,
    }


def write_demos(records: Iterable[DemonstrationRecord], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for rec in records:
            header = {"episode": rec.episode.to_json(), "length": len(rec.steps), "success": rec.success}
            fh.write(json.dumps(header) + "\n")
            for t, s in enumerate(rec.steps):
                fh.write(json.dumps(step_to_json(rec.episode.id, t, s)) + "\n")


def _need(d, key, kind, path, lineno):
    if key not in d:
        raise DemoFormatError(path, lineno, key, "missing")
    v = d[key]
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "num": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }[kind](v)
    if not ok:
        raise DemoFormatError(path, lineno, key, f"expected {kind}, got {type(v).__name__}")
    return v


def parse_step(d: Mapping, path, lineno) -> tuple[str, int, DemoStep]:
    eid = _need(d, "episode_id", "str", path, lineno)
    t = _need(d, "t", "int", path, lineno)
    patch = _need(d, "patch", "list", path, lineno)
    if len(patch) != PATCH_SIZE * PATCH_SIZE or any(v not in (0, 1) or isinstance(v, bool) for v in patch):
        raise DemoFormatError(path, lineno, "patch", "expected 121 entries in {0, 1}")
    gps = _need(d, "gps", "list", path, lineno)
    if len(gps) != 2 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in gps):
        raise DemoFormatError(path, lineno, "gps", "expected two numbers")
    compass = _need(d, "compass", "num", path, lineno)
    if "prev_action" not in d:
        raise DemoFormatError(path, lineno, "prev_action", "missing")
    prev = d["prev_action"]
    if prev is not None and (not isinstance(prev, int) or isinstance(prev, bool) or not 0 <= prev < N_ACTIONS):
        raise DemoFormatError(path, lineno, "prev_action", "expected action index or null")
    goal = _need(d, "goal", "int", path, lineno)
    if not 0 <= goal < len(GOAL_CATEGORIES):
        raise DemoFormatError(path, lineno, "goal", "category index out of range")
    collided_last = _need(d, "collided_last", "bool", path, lineno)
    view = _need(d, "view", "list", path, lineno)
    if len(view) != VIEW_DIM or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in view):
        raise DemoFormatError(path, lineno, "view", f"expected {VIEW_DIM} numbers")
    action = _need(d, "action", "int", path, lineno)
    if not 0 <= action < N_ACTIONS:
        raise DemoFormatError(path, lineno, "action", "action index out of range")
    collided = _need(d, "collided", "bool", path, lineno)
    obs = Observation(
        patch=np.array(patch, dtype=np.uint8),
        gps=(float(gps[0]), float(gps[1])),
        compass=float(compass),
        prev_action=prev,
        goal=goal,
        collided_last=collided_last,
        view=np.array(view, dtype=float),
    )
    return eid, t, DemoStep(obs, action, collided)


def iter_demos(path: str | os.PathLike, load_grids: bool = False) -> Iterator[DemonstrationRecord]:
    """Stream records one episode at a time."""
    base = Path(path).parent
    with open(path) as fh:
        lineno = 0
        while True:
            line = fh.readline()
            lineno += 1
            if not line:
                return
            if not line.strip():
                continue
            header = _load_line(line, path, lineno)
            ep_d = _need(header, "episode", "dict", path, lineno)
            length = _need(header, "length", "int", path, lineno)
            success = _need(header, "success", "bool", path, lineno)
            try:
                grid = load_map(resolve_map_path(ep_d["map_path"], base)) if load_grids else None
                episode = Episode.from_json(ep_d, grid)
            except (KeyError, TypeError, ValueError, OSError) as exc:
                raise DemoFormatError(path, lineno, "episode", str(exc)) from exc
            rec = DemonstrationRecord(episode, [], success)
            for t in range(length):
                line = fh.readline()
                lineno += 1
                if not line:
                    raise DemoFormatError(path, lineno, "t", f"unexpected end of file, expected step {t} of {episode.id}")
                eid, tt, s = parse_step(_load_line(line, path, lineno), path, lineno)
                if eid != episode.id:
                    raise DemoFormatError(path, lineno, "episode_id", f"expected {episode.id!r}, got {eid!r}")
                if tt != t:
                    raise DemoFormatError(path, lineno, "t", f"expected {t}, got {tt}")
                rec.steps.append(s)
            yield rec


def _load_line(line, path, lineno):
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DemoFormatError(path, lineno, "<line>", f"malformed JSON: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise DemoFormatError(path, lineno, "<line>", "expected a JSON object")
    return d


def read_demos(path: str | os.PathLike, load_grids: bool = False) -> list[DemonstrationRecord]:
    return list(iter_demos(path, load_grids))
