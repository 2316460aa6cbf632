"""Command line entry point: train, evaluate, replay and report."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .env import ConfigError, ScenarioConfig
from .harness import MODES, RunConfig, evaluate, replay, train, write_lines
from .nn import ContractError, TrainingDivergence

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

TRAIN_FIELDS = ("iteration", "episodes", "win_rate", "mean_length", "league_size", "loss_entropy", "wall_clock")


def _scenario(name):
    if name is None:
        return None
    if name == "tiny":
        return ScenarioConfig.tiny()
    if name == "default":
        return ScenarioConfig()
    raise ConfigError(f"unknown scenario {name!r}; use 'tiny' or 'default'")


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_train(args):
    if args.config and args.smoke:
        raise ConfigError("--config and --smoke are exclusive")
    cfg = RunConfig.load(args.config) if args.config else RunConfig.smoke() if args.smoke else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.parallel is not None:
        cfg.parallel_envs = args.parallel
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.scenario is not None:
        cfg.scenario = _scenario(args.scenario)
    cfg.validate()
    print("\t".join(TRAIN_FIELDS), flush=True)
    for rec in train(cfg, resume=args.resume):
        print("\t".join(_fmt(rec[k]) for k in TRAIN_FIELDS), flush=True)
    print(f"# checkpoint\t{os.path.join(cfg.output_dir, 'checkpoint')}")


def cmd_evaluate(args):
    res = evaluate(args.source, mode=args.mode, episodes=args.episodes, seed=args.seed or 0,
                   scenario=_scenario(args.scenario), parallel_envs=args.parallel or 64,
                   greedy=not args.sample, interval=args.interval)
    keys = ("source", "mode", "episodes", "wins", "win_rate", "ci_low", "ci_high", "seed", "interval")
    print("\t".join(keys))
    print("\t".join(_fmt(res[k]) for k in keys))


def cmd_replay(args):
    lines = replay(args.source, seed=args.seed or 0, scenario=_scenario(args.scenario), greedy=not args.sample)
    if args.out:
        write_lines(args.out, lines)
    else:
        sys.stdout.write("".join(ln + "\n" for ln in lines))


def cmd_report(args):
    from .report import render

    out = args.out or os.path.dirname(os.path.abspath(args.metrics))
    for name, path in render(args.metrics, out).items():
        print(f"{name}\t{path}")


def build_parser():
    p = argparse.ArgumentParser(prog="phlrl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="YAML run configuration")
    t.add_argument("--smoke", action="store_true", help="tiny-scenario run of under 2,000 episodes")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (metrics and checkpoint)")
    t.add_argument("--parallel", type=int, help="environments stepped in lockstep")
    t.add_argument("--iterations", type=int)
    t.add_argument("--scenario", choices=("tiny", "default"))
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="win rate against the scripted opponent")
    e.add_argument("source", help="checkpoint directory, 'scripted' or 'random'")
    e.add_argument("--mode", choices=MODES, default="pure")
    e.add_argument("--episodes", type=int, default=320)
    e.add_argument("--seed", type=int)
    e.add_argument("--parallel", type=int)
    e.add_argument("--scenario", choices=("tiny", "default"))
    e.add_argument("--sample", action="store_true", help="sample actions instead of greedy")
    e.add_argument("--interval", type=int, help="decision interval (default: the checkpoint's, else 1)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("replay", help="export one episode as line-delimited JSON")
    r.add_argument("source", help="checkpoint directory, 'scripted', 'random' or a recorded replay file")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--scenario", choices=("tiny", "default"))
    r.add_argument("--sample", action="store_true")
    r.set_defaults(func=cmd_replay)

    s = sub.add_parser("report", help="render figures and a CSV summary from metrics.jsonl")
    s.add_argument("metrics")
    s.add_argument("--out", help="directory for the figures (default: next to the metrics)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
