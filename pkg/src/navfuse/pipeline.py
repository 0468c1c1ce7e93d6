"""File-level pipeline steps shared by the command line and the desk benchmark.

Every artefact refers to maps by a path relative to its own directory, so a
run directory can be moved and two runs with the same seeds write identical
bytes.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import histpolicy as hp
from .backends import ExpertBackend, HistPolicyBackend, RandomBackend, RemoteBackend, RemoteConfig, StudentBackend
from .evalharness import EvalReport, evaluate
from .expert import ExpertConfig, generate_demonstrations, make_episodes, read_demos, write_demos
from .fusion import FusionConfig, build_target_dataset, read_targets, write_targets
from .gridworld import Episode, OccupancyGrid, generate_map, load_map, read_episodes, save_map, write_episodes
from .student import StudentTrainConfig, load_student, save_student, train_student

log = logging.getLogger(__name__)


def gen_maps(out_dir, count: int, seed: int, width: int = 40, height: int = 40, density: float = 0.15) -> list[Path]:
    """Maps ``map-000.json`` ... generated with seeds ``seed, seed + 1, ...``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = out / f"map-{i:03d}.json"
        save_map(generate_map(width, height, density, None, seed + i), p)
        paths.append(p)
    return paths


def load_map_dir(map_dir, relative_to) -> list[tuple[str, OccupancyGrid]]:
    """(path relative to ``relative_to``, grid) for every map file, in name order."""
    files = sorted(Path(map_dir).glob("map-*.json"))
    if not files:
        raise FileNotFoundError(f"no map-*.json files in {map_dir}")
    base = Path(relative_to)
    return [(os.path.relpath(f, base), load_map(f)) for f in files]


def gen_episodes(map_dir, out, per_map: int, seed: int, d_min: float = 1.5, d_max: float = 8.0, prefix: str = "ep") -> list[Episode]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    maps = load_map_dir(map_dir, out.parent)
    eps = make_episodes(maps, per_map, seed, prefix, d_min, d_max)
    write_episodes(eps, out)
    return eps


def gen_demos(map_dir, out, per_map: int, config: ExpertConfig):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    maps = load_map_dir(map_dir, out.parent)
    records = generate_demonstrations(maps, per_map, config)
    write_demos(records, out)
    return records


def train_bc_file(demos_path, out, config: hp.TrainConfig):
    records = read_demos(demos_path)
    params, curve = hp.train_bc(records, config)
    hp.save_params(params, out)
    return params, curve


def build_targets_file(demos_path, bc_path, out, config: FusionConfig):
    records = read_demos(demos_path, load_grids=True)
    targets = build_target_dataset(records, hp.load_params(bc_path), config)
    write_targets(targets, out)
    return targets


def train_student_file(targets_path, bc_path, out, config: StudentTrainConfig):
    params, curve = train_student(read_targets(targets_path), hp.load_params(bc_path), config)
    save_student(params, out)
    return params, curve


BACKENDS = ("expert", "random", "bc", "student", "remote")


def backend_factory(kind: str, bc_path=None, student_path=None, remote: RemoteConfig | None = None):
    """A ``seed -> backend`` callable for ``evaluate``."""
    if kind == "expert":
        return lambda seed: ExpertBackend()
    if kind == "random":
        return lambda seed: RandomBackend(seed)
    if bc_path is None:
        raise ValueError(f"backend {kind!r} needs --bc")
    hist = hp.load_params(bc_path)
    if kind == "bc":
        return lambda seed: HistPolicyBackend(hist)
    if kind == "student":
        if student_path is None:
            raise ValueError("backend 'student' needs --student")
        student = load_student(student_path)
        return lambda seed: StudentBackend(student, hist)
    if kind == "remote":
        if remote is None:
            raise ValueError("backend 'remote' needs an endpoint (--llm-url or NAVFUSE_LLM_URL)")
        return lambda seed: RemoteBackend(remote, hist)
    raise ValueError(f"unknown backend {kind!r}; choose from {BACKENDS}")


# ---------------------------------------------------------------------------
# desk benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    train_maps: int = 150
    eval_maps: int = 50
    width: int = 40
    height: int = 40
    density: float = 0.15
    train_map_seed: int = 1000
    eval_map_seed: int = 5000
    demos_per_map: int = 30
    eval_per_map: int = 10
    episode_seed: int = 99
    noise_eps: float = 0.15
    expert_seed: int = 0
    bc: dict = field(default_factory=dict)  # TrainConfig overrides
    alpha: float = 0.8
    student: dict = field(default_factory=dict)  # StudentTrainConfig overrides (not mode/seed)
    seeds: Sequence[int] = (0, 1, 2)
    selection: str = "argmax"


def run_benchmark(workdir, cfg: BenchConfig = BenchConfig()) -> dict:
    """Maps, demos, BC teacher, three students per seed and their evaluations.

    Returns a summary with per-seed success and collision means; per-step
    timings go to ``timing.json`` so reports stay reproducible.
    """
    wd = Path(workdir)
    wd.mkdir(parents=True, exist_ok=True)
    timing = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timing[name] = round(now - clock, 3)
        clock = now
        log.info("%s done in %.1f s", name, timing[name])

    gen_maps(wd / "maps" / "train", cfg.train_maps, cfg.train_map_seed, cfg.width, cfg.height, cfg.density)
    gen_maps(wd / "maps" / "eval", cfg.eval_maps, cfg.eval_map_seed, cfg.width, cfg.height, cfg.density)
    eval_eps = gen_episodes(wd / "maps" / "eval", wd / "eval_episodes.jsonl", cfg.eval_per_map, cfg.episode_seed, prefix="eval")
    lap("maps")
    gen_demos(wd / "maps" / "train", wd / "demos.jsonl", cfg.demos_per_map,
              ExpertConfig(noise_eps=cfg.noise_eps, seed=cfg.expert_seed))
    lap("demos")
    train_bc_file(wd / "demos.jsonl", wd / "bc.nvf", hp.TrainConfig(**cfg.bc))
    lap("train_bc")
    build_targets_file(wd / "demos.jsonl", wd / "bc.nvf", wd / "targets_fused.jsonl", FusionConfig(alpha=cfg.alpha))
    build_targets_file(wd / "demos.jsonl", wd / "bc.nvf", wd / "targets_nomask.jsonl", FusionConfig(alpha=cfg.alpha, mask=False))
    lap("targets")

    eval_eps = read_episodes(wd / "eval_episodes.jsonl")
    reports = {}
    bc_report = evaluate(backend_factory("bc", wd / "bc.nvf"), eval_eps, list(cfg.seeds), cfg.selection,
                         config={"backend": "bc"})
    bc_report.save(wd / "report_bc.json")
    reports["bc"] = bc_report
    lap("eval_bc")
    for mode, targets in (("fused", "targets_fused.jsonl"), ("direct", "targets_fused.jsonl"),
                          ("fused_nomask", "targets_nomask.jsonl")):
        rows = []
        for seed in cfg.seeds:
            scfg = StudentTrainConfig(**{**cfg.student, "target_mode": mode, "seed": int(seed)})
            spath = wd / f"student_{mode}_s{seed}.nvf"
            train_student_file(wd / targets, wd / "bc.nvf", spath, scfg)
            rep = evaluate(backend_factory("student", wd / "bc.nvf", spath), eval_eps, [int(seed)], cfg.selection)
            rows.extend(rep.per_episode)
        report = EvalReport({"backend": "student", "target_mode": mode, "seeds": [int(s) for s in cfg.seeds],
                             "selection": cfg.selection, "episodes": len(eval_eps)}, rows)
        report.save(wd / f"report_{mode}.json")
        reports[mode] = report
        lap(f"student_{mode}")

    summary = {
        "config": {**asdict(cfg), "seeds": [int(s) for s in cfg.seeds]},
        "results": {name: {"aggregates": r.aggregates, "per_seed": r.per_seed} for name, r in reports.items()},
    }
    with open(wd / "summary.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2) + "\n")
    timing["total"] = round(sum(timing.values()), 3)
    with open(wd / "timing.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(timing, indent=2) + "\n")
    return summary
