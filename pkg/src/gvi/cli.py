"""``gvi`` command line: run-tabular, run-deep, certify-bounds, gen-maze, print-config.

Exit status is 0 on success, 1 when a run finishes but a bound is violated
(or the resulting soundness check fails), and 2 on invalid input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from gvi.config import (
    PRESETS,
    ExperimentConfig,
    config_to_json,
    load_config,
    preset,
    with_overrides,
)
from gvi.exceptions import GviError

EXIT_OK, EXIT_UNSOUND, EXIT_INVALID = 0, 1, 2


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _add_config_flags(p: argparse.ArgumentParser, with_source: bool = True) -> None:
    if with_source:
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", type=Path, help="experiment config (JSON)")
        src.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment config")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", type=_seed_list, help="comma-separated seed list, e.g. 0,1,2")
    p.add_argument("--out", help="output directory (default: the config's 'out')")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config value by dotted key, e.g. schedule.alpha1=4 (repeatable)")


def _resolve(args) -> ExperimentConfig:
    if getattr(args, "config", None) is not None:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None) is not None:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig()
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    elif args.seeds is not None:
        overrides.append(f"seeds={args.seeds}")
    if args.out is not None:
        cfg = cfg.model_copy(update={"out": args.out})
    return with_overrides(cfg, overrides) if overrides else cfg


def _cmd_print_config(args) -> int:
    sys.stdout.write(config_to_json(_resolve(args)))
    return EXIT_OK


def _cmd_run_tabular(args) -> int:
    from gvi.harness import run_tabular

    cfg = _resolve(args)
    result = run_tabular(cfg)
    for label, traces in result.traces.items():
        gaps = [t.gaps[-1] for t in traces.values()]
        print(f"{label}: {len(traces)} seeds, final gap mean {sum(gaps) / len(gaps):.3e}, "
              f"bound violations {result.violations[label]}")
    print(f"wrote {result.root}")
    return EXIT_UNSOUND if result.total_violations else EXIT_OK


def _cmd_run_deep(args) -> int:
    from gvi.harness import deep_statistics, run_deep

    cfg = _resolve(args)
    result = run_deep(cfg, resume=args.resume)
    for label, logs in result.logs.items():
        stats = deep_statistics(logs)
        print(f"{label}: {len(logs)} seeds, last-third return {stats['final_third_mean']:.1f} "
              f"(seed std {stats['final_third_std']:.1f}), mean TD max {stats['td_max_mean']:.3g}")
    print(f"wrote {result.root}")
    return EXIT_OK


def _cmd_certify(args) -> int:
    from gvi.harness import certify_bounds

    report = certify_bounds(args.paths, slack=args.slack)
    print(report.summary())
    for row in report.rows:
        if row[3] or row[6]:
            print(f"  {row[0]}: {row[3]} violations of the dynamic bound, {row[6]} of the constant one")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(out)
    return EXIT_UNSOUND if report.violations else EXIT_OK


def _cmd_gen_maze(args) -> int:
    from gvi.envs.maze import MazeSpec, build_maze

    cfg = _resolve(args)
    env = cfg.env
    if env.kind != "maze":
        raise GviError(f"gen-maze needs env.kind=maze, got {env.kind!r}")
    seed = cfg.seeds[0] if env.maze_seed is None else env.maze_seed
    maze = build_maze(MazeSpec(width=env.width, height=env.height, success_prob=env.success_prob,
                               slip_prob=env.slip_prob, goal_reward=env.goal_reward, horizon=env.horizon,
                               gamma=env.gamma, wall_density=env.wall_density, rng_seed=seed))
    print(maze.render())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"maze_seed_{seed}.json"
        path.write_text(maze.layout_json() + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gvi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-tabular", help="run tabular schemes and write traces, bounds and aggregates")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run_tabular)

    p = sub.add_parser("run-deep", help="train deep agents and write learning curves")
    _add_config_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints")
    p.set_defaults(func=_cmd_run_deep)

    p = sub.add_parser("certify-bounds", help="check recorded gaps against the error-propagation bounds")
    p.add_argument("paths", nargs="+", help="trace files or directories searched for *.trace.json")
    p.add_argument("--out", help="write the per-run soundness table to this CSV")
    p.add_argument("--slack", type=float, default=1e-9)
    p.set_defaults(func=_cmd_certify)

    p = sub.add_parser("gen-maze", help="generate and print a maze layout")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_gen_maze)

    p = sub.add_parser("print-config", help="print the resolved config with its parameter sources")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_print_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GviError, ValueError) as err:
        print(f"gvi {args.command}: error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
