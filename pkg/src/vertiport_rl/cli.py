"""Command-line front end.

Subcommands cover the whole workflow: train a policy, evaluate any agent
over a batch of seeded episodes, compare evaluation reports, check gradients
against finite differences, and replay a recorded episode bit for bit.
Every run leaves a resolved_config.json next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import (ConfigError, ScenarioConfig, config_from_dict, config_hash,
                     config_to_dict, default_config_dict)


def _load_config(path) -> ScenarioConfig:
    if path is None:
        return config_from_dict(default_config_dict())
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


def _write_resolved_config(out_dir: str, config: ScenarioConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = config_to_dict(config)
    payload["config_hash"] = config_hash(config)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def _cmd_train(args) -> int:
    from .agents import train
    from .plots import plot_training_curves

    config = _load_config(args.config)
    _write_resolved_config(args.out, config)
    summary = train(config, args.out, seed=args.seed, total_steps=args.steps,
                    workers=args.workers, resume=args.resume, echo=print)
    log_path = os.path.join(args.out, "training_log.csv")
    if summary["episodes_done"] > 0:
        figure = plot_training_curves(
            log_path, os.path.join(args.out, "figures", "training_curves.png"))
        print(f"training curves: {figure}")
    print(f"trained {summary['global_step']} steps over {summary['episodes_done']} "
          f"episodes ({summary['updates']} updates); outputs in {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .agents import make_agent
    from .harness import (build_report, record_action_distribution, run_case_study,
                          snapshot_episode, write_report)
    from .plots import plot_action_distribution, plot_metric_bars

    config = _load_config(args.config)
    noise = args.noise == "on"
    kind = args.agent
    if kind is None:
        if args.checkpoint is None:
            print("pick an agent with --agent or give --checkpoint", file=sys.stderr)
            return 2
        kind = "grl"
    agent = make_agent(kind, config, args.checkpoint)

    results, aggregates = run_case_study(config, agent, args.episodes,
                                         seed_base=args.seed, noise=noise,
                                         workers=args.workers)
    report = build_report(kind, config, noise, results, aggregates)
    _write_resolved_config(args.out, config)
    paths = write_report(args.out, report, results)

    figures_dir = os.path.join(args.out, "figures")
    plot_metric_bars(report, os.path.join(figures_dir, "metrics.png"))
    distribution = record_action_distribution(
        config, agent, episodes=min(5, args.episodes), seed_base=args.seed, noise=noise)
    with open(os.path.join(args.out, "actions.json"), "w", encoding="utf-8") as fh:
        json.dump(distribution, fh, indent=2)
    plot_action_distribution(distribution, os.path.join(figures_dir, "actions.png"),
                             title=f"{kind} action usage")
    if args.snapshot:
        snapshot_episode(config, agent, args.seed, noise,
                         os.path.join(args.out, "snapshot.json"))

    for field in ("total_reward", "good_takeoffs", "good_landings", "collisions"):
        cell = report["metrics"][field]
        print(f"{kind} {field}: {cell['mean']:.3f} +/- {cell['std']:.3f} "
              f"over {cell['n']} episodes")
    print(f"report: {paths['report']}")
    return 0


def _cmd_compare(args) -> int:
    from .harness import compare_reports, load_report, write_comparison
    from .plots import plot_metric_bars

    reports = [load_report(p) for p in args.reports]
    comparison = compare_reports(reports)
    print(comparison["table"])
    print(f"best by mean total reward: {comparison['best']}")
    path = write_comparison(args.out, comparison)
    plot_metric_bars(reports, os.path.join(args.out, "figures", "comparison.png"))
    print(f"comparison table: {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .policy import policy_gradient_check

    config = _load_config(args.config)
    worst = 0.0
    for k in range(args.seeds):
        seed = args.seed + k
        err = policy_gradient_check(config, seed, n_coords=args.coords)
        worst = max(worst, err)
        print(f"seed {seed}: max relative gradient error {err:.3e}")
    if worst > args.tolerance:
        print(f"FAIL: worst error {worst:.3e} exceeds {args.tolerance:.1e}")
        return 1
    print(f"OK: worst error {worst:.3e} within {args.tolerance:.1e}")
    return 0


def _cmd_replay(args) -> int:
    from .harness import replay_snapshot

    matched, message = replay_snapshot(args.snapshot)
    print(message)
    return 0 if matched else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vertiport-rl",
        description="Train, evaluate, and inspect vertiport traffic agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run policy optimization")
    p.add_argument("--config", help="scenario JSON (defaults built in)")
    p.add_argument("--steps", type=int, help="override total environment steps")
    p.add_argument("--seed", type=int, help="root seed (defaults to the config seed)")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--resume", action="store_true", help="continue from saved state")
    p.add_argument("--workers", type=int, default=1, help="parallel simulators")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="run a seeded batch of episodes")
    p.add_argument("--config", help="scenario JSON (defaults built in)")
    p.add_argument("--agent", choices=("fcfs", "random", "grl"))
    p.add_argument("--checkpoint", help="trained weights (implies --agent grl)")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--noise", choices=("on", "off"), default="off",
                   help="inject operational uncertainty")
    p.add_argument("--seed", type=int, default=1000, help="first episode seed")
    p.add_argument("--out", default="runs/eval", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="episode parallelism")
    p.add_argument("--snapshot", action="store_true",
                   help="also record a replayable first-episode trace")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="rank evaluation reports on shared seeds")
    p.add_argument("--reports", nargs="+", required=True,
                   help="two or more report.json paths")
    p.add_argument("--out", default="runs/compare", help="output directory")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of the policy gradient")
    p.add_argument("--config", help="scenario JSON (defaults built in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds to check")
    p.add_argument("--coords", type=int, default=30, help="sampled coordinates per seed")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("replay", help="re-run a recorded episode and verify it")
    p.add_argument("--snapshot", required=True, help="snapshot JSON from evaluate")
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
