"""Episode rollouts, Success / SoftSPL / collision metrics, and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backends import PolicyBackend, episode_seed
from .gridworld import CELL_SIZE_M, SUCCESS_RADIUS_M, Action, Episode, Pose, observe, step

log = logging.getLogger(__name__)

MAX_STEPS = 500
SELECTIONS = ("argmax", "sample")


def softspl(d_init: float, d_T: float, s: float, p: float, clamp: bool = True) -> float:
    """(1 - d_T / d_init) * s / max(s, p), progress factor clamped at 0 unless ``clamp`` is off."""
    if d_init <= 0:
        raise ValueError(f"d_init must be positive, got {d_init}")
    if s <= 0 or p < 0:
        raise ValueError("need s > 0 and p >= 0")
    progress = 1.0 - d_T / d_init
    if clamp:
        progress = max(progress, 0.0)
    return progress * (s / max(s, p))


@dataclass
class EpisodeResult:
    episode_id: str
    seed: int
    success: bool
    softspl: float
    collision_count: int
    steps: int
    path_length_m: float
    d_T_m: float
    d_init_m: float
    fallback_count: int = 0
    error: str | None = None


@dataclass
class Trace:
    """Per-step record of a rollout, filled in when passed to ``run_episode``."""

    poses: list[Pose] = field(default_factory=list)  # pose after each step, start first
    actions: list[int] = field(default_factory=list)
    dists: list[np.ndarray] = field(default_factory=list)
    collided: list[bool] = field(default_factory=list)


def select_action(dist: np.ndarray, selection: str, rng: np.random.Generator | None) -> int:
    if selection == "argmax":
        return int(np.argmax(dist))  # first maximum, i.e. lowest index on ties
    if selection == "sample":
        return int(rng.choice(len(dist), p=dist / dist.sum()))
    raise ValueError(f"unknown selection rule {selection!r}")


def _check_dist(dist) -> np.ndarray:
    d = np.asarray(dist, dtype=float)
    if d.shape != (len(Action),) or not np.isfinite(d).all() or (d < 0).any() or abs(d.sum() - 1.0) > 1e-6:
        raise ValueError(f"backend returned an invalid distribution {d!r}")
    return d


def run_episode(
    backend: PolicyBackend,
    episode: Episode,
    max_steps: int = MAX_STEPS,
    selection: str = "argmax",
    seed: int = 0,
    clamp_softspl: bool = True,
    trace: Trace | None = None,
) -> EpisodeResult:
    """Roll one episode out; backend errors become an error row instead of propagating.

    SoftSPL distances are measured to the success region (cells within the
    success radius of a goal), so an agent that stops on entering the region
    after a shortest path scores 1.
    """
    grid = episode.grid
    if grid is None:
        raise ValueError(f"episode {episode.id}: map not loaded")
    region = grid.success_field(episode.goal_cells)
    goal_field = grid.distance_field(episode.goal_cells)
    rng = np.random.default_rng(episode_seed(seed, episode.id)) if selection == "sample" else None
    if selection not in SELECTIONS:
        raise ValueError(f"unknown selection rule {selection!r}")

    pose = episode.start
    prev, collided_last = None, False
    collisions = forward = steps = 0
    stopped = False
    error = None
    if trace is not None:
        trace.poses.append(pose)
    try:
        backend.reset(episode)
        while steps < max_steps:
            obs = observe(grid, pose, episode, prev, collided_last)
            dist = _check_dist(backend.act(obs, pose=pose))
            action = select_action(dist, selection, rng)
            out = step(grid, pose, action)
            steps += 1
            collisions += int(out.collided)
            if action == Action.MOVE_FORWARD and not out.collided:
                forward += 1
            if trace is not None:
                trace.actions.append(action)
                trace.dists.append(dist)
                trace.collided.append(out.collided)
                trace.poses.append(out.pose)
            pose, prev, collided_last = out.pose, action, out.collided
            if out.stopped:
                stopped = True
                break
    except Exception as exc:  # noqa: BLE001 - a failing backend must not sink the run
        log.warning("episode %s aborted: %s", episode.id, exc)
        error = f"{type(exc).__name__}: {exc}"

    cx, cy = pose.cell
    d_T = float(goal_field[cy, cx])
    success = stopped and error is None and d_T <= SUCCESS_RADIUS_M
    start_cx, start_cy = episode.start.cell
    s = float(region[start_cy, start_cx])
    p = forward * CELL_SIZE_M
    score = softspl(s, float(region[cy, cx]), s, p, clamp_softspl) if s > 0 else float(success)
    return EpisodeResult(
        episode_id=episode.id,
        seed=int(seed),
        success=bool(success),
        softspl=float(score),
        collision_count=collisions,
        steps=steps,
        path_length_m=p,
        d_T_m=d_T,
        d_init_m=float(episode.d_init_m),
        fallback_count=int(getattr(backend, "fallbacks", 0)),
        error=error,
    )


# ---------------------------------------------------------------------------
# multi-seed evaluation and reports
# ---------------------------------------------------------------------------


def _means(rows: Sequence[EpisodeResult]) -> dict:
    n = len(rows)
    if n == 0:
        return {"n": 0, "success_mean": 0.0, "softspl_mean": 0.0, "collision_mean": 0.0}
    return {
        "n": n,
        "success_mean": math.fsum(float(r.success) for r in rows) / n,
        "softspl_mean": math.fsum(r.softspl for r in rows) / n,
        "collision_mean": math.fsum(r.collision_count for r in rows) / n,
    }


@dataclass
class EvalReport:
    config: dict
    per_episode: list[EpisodeResult]

    @property
    def aggregates(self) -> dict:
        agg = _means(self.per_episode)
        agg["errors"] = sum(r.error is not None for r in self.per_episode)
        agg["fallbacks"] = sum(r.fallback_count for r in self.per_episode)
        return agg

    @property
    def per_seed(self) -> list[dict]:
        seeds = sorted({r.seed for r in self.per_episode})
        return [{"seed": s, **_means([r for r in self.per_episode if r.seed == s])} for s in seeds]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "per_episode": [asdict(r) for r in self.per_episode],
            "aggregates": self.aggregates,
            "per_seed": self.per_seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        fields = EpisodeResult.__dataclass_fields__
        rows = []
        for i, row in enumerate(data["per_episode"]):
            missing = set(fields) - set(row)
            if missing:
                raise ValueError(f"per_episode[{i}] lacks {sorted(missing)}")
            rows.append(EpisodeResult(**{k: row[k] for k in fields}))
        return cls(dict(data.get("config", {})), rows)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(EpisodeResult.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.per_episode:
            w.writerow(["" if getattr(r, k) is None else getattr(r, k) for k in names])
        return buf.getvalue()


def evaluate(
    make_backend: Callable[[int], PolicyBackend],
    episodes: Sequence[Episode],
    seeds: Sequence[int] = (0,),
    selection: str = "argmax",
    max_steps: int = MAX_STEPS,
    clamp_softspl: bool = True,
    config: dict | None = None,
) -> EvalReport:
    """Every (seed, episode) pair with a fresh backend per seed; rows ordered by (seed, id)."""
    rows = []
    for seed in seeds:
        backend = make_backend(int(seed))
        try:
            for ep in episodes:
                rows.append(run_episode(backend, ep, max_steps, selection, int(seed), clamp_softspl))
        finally:
            close = getattr(backend, "close", None)
            if close is not None:
                close()
    rows.sort(key=lambda r: (r.seed, r.episode_id))
    echo = {"seeds": [int(s) for s in seeds], "selection": selection, "max_steps": max_steps,
            "clamp_softspl": clamp_softspl, "episodes": len(episodes)}
    echo.update(config or {})
    return EvalReport(echo, rows)
