"""Command line: ``navfuse <subcommand> [--config file.json] [flags]``.

Each subcommand reads optional settings from a JSON object whose keys are the
long flag names with dashes turned into underscores; flags given on the
command line win.  Exit status is 0 on success, 1 for usage errors and 2 for
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import histpolicy as hp
from . import pipeline
from .backends import RemoteConfig, resolve_llm_url
from .evalharness import SELECTIONS, EvalReport, Trace, evaluate, run_episode
from .expert import ExpertConfig
from .fusion import FusionConfig
from .gridworld import read_episodes
from .render import render_trajectory
from .student import TARGET_MODES, StudentTrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _seeds(text) -> list[int]:
    if isinstance(text, list):
        return [int(s) for s in text]
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# (flag, type, default, help); type "flag" means a boolean switch
COMMANDS = {
    "gen-maps": ("generate random maps", [
        ("--out-dir", str, None, "directory for map-NNN.json files"),
        ("--count", int, 10, "number of maps"),
        ("--seed", int, 0, "seed of the first map (map i uses seed + i)"),
        ("--width", int, 40, "width in cells"),
        ("--height", int, 40, "height in cells"),
        ("--density", float, 0.15, "obstacle density"),
    ]),
    "gen-episodes": ("sample navigation episodes on a map directory", [
        ("--maps", str, None, "map directory"),
        ("--out", str, None, "episode JSONL file"),
        ("--per-map", int, 10, "episodes per map"),
        ("--seed", int, 0, "sampling seed"),
        ("--d-min", float, 1.5, "minimum start-to-goal geodesic distance (m)"),
        ("--d-max", float, 8.0, "maximum start-to-goal geodesic distance (m)"),
        ("--prefix", str, "ep", "episode id prefix"),
    ]),
    "gen-demos": ("roll out the noisy expert into a demonstration corpus", [
        ("--maps", str, None, "map directory"),
        ("--out", str, None, "demonstration JSONL file"),
        ("--per-map", int, 10, "demonstrations per map"),
        ("--noise-eps", float, 0.15, "probability of a random non-stop action"),
        ("--max-steps", int, 500, "step limit per demonstration"),
        ("--seed", int, 0, "seed"),
    ]),
    "train-bc": ("train the recurrent behaviour-cloning policy", [
        ("--demos", str, None, "demonstration JSONL file"),
        ("--out", str, None, "parameter file to write"),
        ("--epochs", int, 40, "training epochs"),
        ("--learning-rate", float, 2e-3, "Adam learning rate"),
        ("--batch-episodes", int, 8, "episodes per update"),
        ("--hidden", int, 64, "GRU hidden size"),
        ("--clip-norm", float, 5.0, "global gradient-norm clip"),
        ("--seed", int, 0, "seed"),
        ("--curve-out", str, None, "optional JSON file for the per-epoch loss"),
    ]),
    "build-targets": ("build fused training targets from demonstrations", [
        ("--demos", str, None, "demonstration JSONL file"),
        ("--bc", str, None, "behaviour-cloning parameter file"),
        ("--out", str, None, "target JSONL file"),
        ("--alpha", float, 0.8, "weight of the policy distribution"),
        ("--no-mask", "flag", False, "skip collision masking (ablation)"),
    ]),
    "train-student": ("train the student policy on targets", [
        ("--targets", str, None, "target JSONL file"),
        ("--bc", str, None, "behaviour-cloning parameter file (frozen)"),
        ("--out", str, None, "student parameter file to write"),
        ("--mode", str, "fused", f"target mode: {', '.join(TARGET_MODES)}"),
        ("--iterations", int, 20000, "training iterations"),
        ("--batch-size", int, 6, "steps per minibatch"),
        ("--learning-rate", float, 1e-3, "Adam learning rate"),
        ("--seed", int, 0, "seed"),
    ]),
    "eval": ("evaluate a backend on episodes", [
        ("--episodes", str, None, "episode JSONL file"),
        ("--backend", str, "bc", f"one of {', '.join(pipeline.BACKENDS)}"),
        ("--bc", str, None, "behaviour-cloning parameter file"),
        ("--student", str, None, "student parameter file"),
        ("--llm-url", str, None, "remote endpoint (default: $NAVFUSE_LLM_URL)"),
        ("--timeout", float, 30.0, "remote request timeout (s)"),
        ("--max-retries", int, 2, "remote retries before falling back"),
        ("--variant", int, 0, "prompt template variant"),
        ("--select", str, "argmax", "action selection: argmax or sample"),
        ("--seeds", _seeds, [0], "comma-separated seeds"),
        ("--max-steps", int, 500, "step limit per episode"),
        ("--limit", int, None, "evaluate only the first N episodes"),
        ("--no-clamp-softspl", "flag", False, "report the unclamped SoftSPL formula"),
        ("--out", str, None, "report JSON file"),
    ]),
    "report": ("export a report's episode rows as CSV", [
        ("--out", str, None, "CSV file (default: stdout)"),
    ]),
    "render": ("draw one episode rollout as SVG", [
        ("--episodes", str, None, "episode JSONL file"),
        ("--episode-id", str, None, "episode to draw (default: first)"),
        ("--backend", str, "expert", f"one of {', '.join(pipeline.BACKENDS)}"),
        ("--bc", str, None, "behaviour-cloning parameter file"),
        ("--student", str, None, "student parameter file"),
        ("--llm-url", str, None, "remote endpoint"),
        ("--seed", int, 0, "seed"),
        ("--out", str, None, "SVG file"),
    ]),
    "bench": ("run the full desk benchmark in a work directory", [
        ("--workdir", str, None, "output directory"),
    ]),
}
REQUIRED = {
    "gen-maps": ["out_dir"], "gen-episodes": ["maps", "out"], "gen-demos": ["maps", "out"],
    "train-bc": ["demos", "out"], "build-targets": ["demos", "bc", "out"],
    "train-student": ["targets", "bc", "out"], "eval": ["episodes", "out"], "render": ["episodes", "out"],
    "bench": ["workdir"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="navfuse", description="Object-navigation toolkit with fused action targets.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file with default values for the flags below")
        if name == "report":
            p.add_argument("report", help="report JSON file")
        for flag, kind, default, h in flags:
            shown = "" if default in (None, False) else f" (default: {default})"
            if kind == "flag":
                p.add_argument(flag, action="store_const", const=True, default=None, help=h)
            else:
                p.add_argument(flag, type=kind, default=None, help=h + shown)
    return parser


def _settings(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    _, flags = COMMANDS[args.command]
    keys = {f.lstrip("-").replace("-", "_"): (kind, default) for f, kind, default, _ in flags}
    values = {k: d for k, (_, d) in keys.items()}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        if args.command == "bench":
            # everything except the flags is a benchmark setting
            values["bench"] = {k: cfg.pop(k) for k in list(cfg) if k not in keys}
        unknown = sorted(set(cfg) - set(keys))
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for k, v in cfg.items():
            kind = keys[k][0]
            values[k] = _seeds(v) if kind is _seeds else v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if args.command == "report":
        values["report"] = args.report
    for key, allowed in (("backend", pipeline.BACKENDS), ("select", SELECTIONS), ("mode", TARGET_MODES)):
        if key in values and values[key] not in allowed:
            raise UsageError(f"{args.command}: --{key} must be one of {', '.join(allowed)}, got {values[key]!r}")
    missing = [k for k in REQUIRED.get(args.command, []) if values.get(k) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return values


def _remote(s) -> RemoteConfig | None:
    url = resolve_llm_url(s.get("llm_url"))
    if url is None:
        return None
    return RemoteConfig(url, s.get("timeout", 30.0), s.get("max_retries", 2), s.get("variant", 0))


def _run(cmd: str, s: dict, out=None) -> None:
    out = out or sys.stdout
    if cmd == "gen-maps":
        paths = pipeline.gen_maps(s["out_dir"], s["count"], s["seed"], s["width"], s["height"], s["density"])
        print(f"wrote {len(paths)} maps to {s['out_dir']}", file=out)
    elif cmd == "gen-episodes":
        eps = pipeline.gen_episodes(s["maps"], s["out"], s["per_map"], s["seed"], s["d_min"], s["d_max"], s["prefix"])
        print(f"wrote {len(eps)} episodes to {s['out']}", file=out)
    elif cmd == "gen-demos":
        recs = pipeline.gen_demos(s["maps"], s["out"], s["per_map"],
                                  ExpertConfig(noise_eps=s["noise_eps"], max_steps=s["max_steps"], seed=s["seed"]))
        print(f"wrote {len(recs)} demonstrations to {s['out']}", file=out)
    elif cmd == "train-bc":
        cfg = hp.TrainConfig(learning_rate=s["learning_rate"], epochs=s["epochs"], batch_episodes=s["batch_episodes"],
                             hidden=s["hidden"], clip_norm=s["clip_norm"], seed=s["seed"])
        _, curve = pipeline.train_bc_file(s["demos"], s["out"], cfg)
        if s["curve_out"]:
            Path(s["curve_out"]).write_text(json.dumps(curve) + "\n", encoding="utf-8")
        print(f"final loss {curve[-1]:.4f}; parameters in {s['out']}", file=out)
    elif cmd == "build-targets":
        recs = pipeline.build_targets_file(s["demos"], s["bc"], s["out"], FusionConfig(alpha=s["alpha"], mask=not s["no_mask"]))
        print(f"wrote {len(recs)} target records to {s['out']}", file=out)
    elif cmd == "train-student":
        cfg = StudentTrainConfig(target_mode=s["mode"], learning_rate=s["learning_rate"], iterations=s["iterations"],
                                 batch_size=s["batch_size"], seed=s["seed"])
        _, curve = pipeline.train_student_file(s["targets"], s["bc"], s["out"], cfg)
        tail = curve[-min(len(curve), 1000):]
        print(f"mean loss over the last {len(tail)} iterations {sum(tail) / max(len(tail), 1):.4f}", file=out)
    elif cmd == "eval":
        episodes = read_episodes(s["episodes"])
        if s["limit"] is not None:
            episodes = episodes[: s["limit"]]
        factory = pipeline.backend_factory(s["backend"], s["bc"], s["student"], _remote(s))
        report = evaluate(factory, episodes, s["seeds"], s["select"], s["max_steps"], not s["no_clamp_softspl"],
                          config={"backend": s["backend"]})
        report.save(s["out"])
        a = report.aggregates
        print(f"success {a['success_mean']:.4f} softspl {a['softspl_mean']:.4f} "
              f"collisions {a['collision_mean']:.4f} over {a['n']} rollouts", file=out)
    elif cmd == "report":
        text = EvalReport.load(s["report"]).to_csv()
        if s["out"]:
            Path(s["out"]).write_text(text, encoding="utf-8")
        else:
            out.write(text)
    elif cmd == "render":
        episodes = read_episodes(s["episodes"])
        pick = [e for e in episodes if s["episode_id"] in (None, e.id)]
        if not pick:
            raise KeyError(f"episode {s['episode_id']!r} not found")
        ep = pick[0]
        backend = pipeline.backend_factory(s["backend"], s["bc"], s["student"], _remote(s))(s["seed"])
        trace = Trace()
        res = run_episode(backend, ep, seed=s["seed"], trace=trace)
        Path(s["out"]).write_text(render_trajectory(ep.grid, trace.poses, trace.collided, ep.start, ep.goal), encoding="utf-8")
        print(f"{ep.id}: success={res.success} steps={res.steps}; drawing in {s['out']}", file=out)
    elif cmd == "bench":
        bench = s.get("bench") or {}
        summary = pipeline.run_benchmark(s["workdir"], pipeline.BenchConfig(**bench))
        json.dump(summary["results"], out, indent=2)
        out.write("\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        settings = _settings(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args.command, settings)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
