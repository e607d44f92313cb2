"""Command-line entry points: run, simulate, analyze, replay, shuffle."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import DEFAULT_WINDOW, analyze, export
from .exceptions import CoevoError
from .runner import EventLog, RunConfig, run_stream
from .state import restore, snapshot
from .tasks import generate, load_stream, shuffle_stream, write_stream

logger = logging.getLogger("coevopool")

ABLATION_FLAGS = ("no_codream", "symmetric_broadcast", "force_voting", "random_team")


def _add_ablations(p: argparse.ArgumentParser) -> None:
    for flag in ABLATION_FLAGS:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true",
                       help=f"enable the {flag} ablation")


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "pool_size", None) is not None:
        overrides["pool_size"] = args.pool_size
    flags = {f: True for f in ABLATION_FLAGS if getattr(args, f, False)}
    if flags:
        overrides["ablations"] = replace(cfg.ablations, **flags)
    return replace(cfg, **overrides) if overrides else cfg


def _snapshot_hook(path, at: int):
    def hook(runner):
        if runner.pool.task_counter == at:
            Path(path).write_bytes(snapshot(runner.pool))
            logger.info("snapshot written at task %d to %s", at, path)
    return hook


def cmd_run(args) -> int:
    cfg = _config(args)
    tasks = load_stream(args.stream)
    hook = _snapshot_hook(args.snapshot_at_path, args.snapshot_at) if args.snapshot_at else None
    with EventLog(args.log) as log:
        result = run_stream(cfg, tasks, log=log, on_task=hook)
    if args.snapshot:
        Path(args.snapshot).write_bytes(snapshot(result.pool))
    print(json.dumps({"tasks": len(tasks), "cumulative_reward": result.cumulative_reward,
                      "roster": len(result.pool.roster)}))
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    stream = generate(args.generator, args.tasks, seed=args.stream_seed)
    if not cfg.sim.niche_ability:
        cfg = replace(cfg, sim=replace(cfg.sim, niche_ability=stream.niche_ability))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stream(stream.tasks, out / "stream.jsonl")
    with EventLog(out / "events.jsonl") as log:
        result = run_stream(cfg, stream.tasks, log=log)
    (out / "pool.snapshot").write_bytes(snapshot(result.pool))
    export(analyze(out / "events.jsonl", args.window), out / "report")
    print(json.dumps({"generator": args.generator, "tasks": len(stream.tasks),
                      "mean_reward": result.cumulative_reward / max(1, len(stream.tasks)),
                      "roster": len(result.pool.roster), "out": str(out)}))
    return 0


def cmd_analyze(args) -> int:
    report = analyze(args.log, args.window)
    paths = export(report, args.out, args.format)
    print(json.dumps({"tasks": report.n_tasks, "unique_anchors": report.unique_anchors,
                      "mean_spec_index": report.mean_spec_index, "files": [str(p) for p in paths]}))
    return 0


def cmd_replay(args) -> int:
    cfg = _config(args)
    pool = restore(Path(args.snapshot).read_bytes())
    tasks = load_stream(args.stream)
    remaining = tasks if args.no_skip else tasks[pool.task_counter:]
    with EventLog(args.log, append=args.append) as log:
        result = run_stream(cfg, remaining, pool=pool, log=log)
    if args.snapshot_out:
        Path(args.snapshot_out).write_bytes(snapshot(result.pool))
    print(json.dumps({"resumed_at": len(tasks) - len(remaining), "tasks": len(remaining),
                      "cumulative_reward": result.cumulative_reward}))
    return 0


def cmd_shuffle(args) -> int:
    tasks = load_stream(args.stream)
    write_stream(shuffle_stream(tasks, args.seed), args.out)
    print(json.dumps({"tasks": len(tasks), "seed": args.seed, "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coevopool", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a config over a JSONL task stream")
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--stream", required=True, help="JSONL task stream")
    p.add_argument("--log", required=True, help="event log to write")
    p.add_argument("--snapshot", help="write the final pool snapshot here")
    p.add_argument("--snapshot-at", type=int, default=0, help="also snapshot after this many tasks")
    p.add_argument("--snapshot-at-path", default="pool.at.snapshot", help="where --snapshot-at writes")
    p.add_argument("--seed", type=int)
    p.add_argument("--pool-size", type=int)
    _add_ablations(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="generate a synthetic stream and run it in sim mode")
    p.add_argument("--generator", required=True, choices=["hard_math", "hard_code", "aflow", "mixed", "transfer"])
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON or YAML run config")
    p.add_argument("--tasks", type=int, help="stream length (generator default otherwise)")
    p.add_argument("--seed", type=int, help="pool seed")
    p.add_argument("--stream-seed", type=int, default=0, help="generator seed")
    p.add_argument("--pool-size", type=int)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    _add_ablations(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="compute report files from an event log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("replay", help="resume from a snapshot over the rest of a stream")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--stream", required=True, help="full stream; tasks already done are skipped")
    p.add_argument("--log", required=True)
    p.add_argument("--config", help="JSON or YAML run config (must match the original run)")
    p.add_argument("--no-skip", action="store_true", help="treat --stream as the remaining tasks only")
    p.add_argument("--append", action="store_true", help="append to an existing log")
    p.add_argument("--snapshot-out", help="write the final pool snapshot here")
    _add_ablations(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("shuffle", help="write a seeded permutation of a stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shuffle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CoevoError, OSError) as exc:
        print(f"coevopool {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
