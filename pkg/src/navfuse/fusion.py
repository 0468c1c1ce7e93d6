"""Fused training targets: teacher distribution mixed with the demonstrated action.

The mixture ``alpha * p_sota + (1 - alpha) * onehot(gt)`` has the probability of
every colliding action zeroed and is then renormalised.  When masking removes
(almost) all mass the target falls back to uniform over the safe actions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import histpolicy as hp
from .expert import DemoFormatError, DemonstrationRecord, DemoStep, _load_line, _need, parse_step, step_to_json
from .gridworld import N_ACTIONS, Pose, colliding_actions, step


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.8
    epsilon_mass: float = 1e-9
    mask: bool = True  # False gives the no-collision-check ablation

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon_mass < 0:
            raise ValueError("epsilon_mass must be non-negative")


def build_target(p_sota, gt_action: int, colliding: Iterable[int], config: FusionConfig = FusionConfig()) -> np.ndarray:
    p = np.asarray(p_sota, dtype=float)
    if p.shape != (N_ACTIONS,):
        raise ValueError(f"p_sota must have {N_ACTIONS} entries")
    blocked = sorted({int(a) for a in colliding})
    if len(blocked) >= N_ACTIONS:
        raise ValueError("every action collides; no valid target exists")
    m = config.alpha * p
    m[int(gt_action)] += 1.0 - config.alpha
    m[blocked] = 0.0
    total = m.sum()
    if total > config.epsilon_mass:
        out = m / total
        out[blocked] = 0.0  # keep exact zeros even if division produced -0.0
        return out
    out = np.ones(N_ACTIONS)
    out[blocked] = 0.0
    return out / out.sum()


def build_targets_batch(p_sota: np.ndarray, gt: np.ndarray, mask: np.ndarray, config: FusionConfig = FusionConfig()) -> np.ndarray:
    """Row-wise ``build_target``; ``mask`` is boolean (n, 6) with True = colliding."""
    p_sota = np.asarray(p_sota, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.all(axis=1).any():
        raise ValueError("every action collides in at least one row")
    n = p_sota.shape[0]
    m = config.alpha * p_sota
    m[np.arange(n), np.asarray(gt)] += 1.0 - config.alpha
    m[mask] = 0.0
    total = m.sum(axis=1, keepdims=True)
    safe = (~mask).astype(float)
    degenerate = total[:, 0] <= config.epsilon_mass
    out = np.where(degenerate[:, None], safe / safe.sum(axis=1, keepdims=True), m / np.where(degenerate[:, None], 1.0, total))
    out[mask] = 0.0
    return out


@dataclass
class TargetRecord:
    episode_id: str
    t: int
    step: DemoStep
    p_sota: np.ndarray
    colliding: tuple[int, ...]
    target: np.ndarray


def replay_poses(record: DemonstrationRecord) -> list[Pose]:
    """Pre-action pose of every step, obtained by re-simulating the demonstration."""
    grid = record.episode.grid
    if grid is None:
        raise ValueError(f"episode {record.episode.id}: map not loaded")
    poses, pose = [], record.episode.start
    for t, s in enumerate(record.steps):
        poses.append(pose)
        out = step(grid, pose, s.action)
        if out.collided != s.collided:
            raise ValueError(f"episode {record.episode.id}: replay diverges from the log at step {t}")
        pose = out.pose
    return poses


def build_target_dataset(
    corpus: Sequence[DemonstrationRecord], params: hp.PolicyParams, config: FusionConfig = FusionConfig()
) -> list[TargetRecord]:
    out = []
    for rec in corpus:
        if not rec.steps:
            continue
        if rec.episode.grid is None:
            raise FileNotFoundError(f"episode {rec.episode.id}: map {rec.episode.map_path!r} is not loaded")
        poses = replay_poses(rec)
        _, dists = hp.run_states(params, hp.raw_matrix(s.observation for s in rec.steps))
        for t, (s, pose, p) in enumerate(zip(rec.steps, poses, dists)):
            coll = tuple(sorted(int(a) for a in colliding_actions(rec.episode.grid, pose))) if config.mask else ()
            out.append(TargetRecord(rec.episode.id, t, s, p, coll, build_target(p, s.action, coll, config)))
    return out


def write_targets(records: Iterable[TargetRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = step_to_json(r.episode_id, r.t, r.step)
            row["p_sota"] = [float(v) for v in r.p_sota]
            row["colliding"] = list(r.colliding)
            row["target"] = [float(v) for v in r.target]
            fh.write(json.dumps(row) + "\n")


def iter_targets(path: str | os.PathLike) -> Iterator[TargetRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            d = _load_line(line, path, lineno)
            ep_id, t, s = parse_step(d, path, lineno)
            dists = {}
            for key in ("p_sota", "target"):
                v = _need(d, key, "list", path, lineno)
                if len(v) != N_ACTIONS:
                    raise DemoFormatError(path, lineno, key, f"expected {N_ACTIONS} numbers")
                dists[key] = np.array(v, dtype=float)
            coll = _need(d, "colliding", "list", path, lineno)
            if any(not isinstance(a, int) or not 0 <= a < N_ACTIONS for a in coll):
                raise DemoFormatError(path, lineno, "colliding", "expected action indices")
            yield TargetRecord(ep_id, t, s, dists["p_sota"], tuple(coll), dists["target"])


def read_targets(path: str | os.PathLike) -> list[TargetRecord]:
    return list(iter_targets(path))
