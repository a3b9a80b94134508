"""Episode execution, multi-seed case studies, and cross-agent comparison.

The harness emits numbers, not pictures: per-episode metric rows, aggregate
tables, and JSON reports that downstream tooling (including the plotting
helpers) consumes.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import multiprocessing
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .agents import make_agent
from .config import ScenarioConfig, config_from_dict, config_hash, config_to_dict
from .env import make_env

METRIC_FIELDS = ("total_reward", "mean_battery", "good_takeoffs", "good_landings",
                 "mean_delay_hours", "collisions", "near_misses",
                 "battery_depletions", "congestion_events")

# Ranking direction when two agents are compared on a single metric.
LOWER_IS_BETTER = frozenset({"mean_delay_hours", "collisions", "near_misses",
                             "battery_depletions", "congestion_events"})

# Keeps agent-internal draws (the random baseline) independent of the
# simulator's own stream for the same episode seed.
_AGENT_RNG_TAG = 0xA6E27


@dataclass(frozen=True)
class EpisodeMetrics:
    seed: int
    noise: bool
    total_reward: float
    mean_battery: float
    good_takeoffs: int
    good_landings: int
    mean_delay_hours: float
    collisions: int
    near_misses: int
    battery_depletions: int
    congestion_events: int
    decisions: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_episode(config: ScenarioConfig, agent, seed: int, noise: bool = False,
                record_trace: bool = False):
    """Play one full day and fold it into EpisodeMetrics.

    With ``record_trace`` every decision becomes a JSON-ready record; traces
    from the same (config, agent, seed, noise) triple are bit-identical.
    """
    env = make_env(config, noise=noise)
    env.reset(int(seed))
    agent.begin_episode(np.random.default_rng(
        np.random.SeedSequence((int(seed), _AGENT_RNG_TAG))))

    total = 0.0
    trace = [] if record_trace else None
    while True:
        action = agent.act(env)
        _obs, reward, terms, done, info = env.step(action)
        total += reward
        if record_trace:
            trace.append({
                "step": info["clock_step"],
                "evtol": info["evtol"],
                "action": info["action"],
                "action_name": info["action_name"],
                "reward": reward,
                "terms": terms.as_dict(),
                "battery": info["battery"],
                "delays": info["delays"],
                "collisions": info["collisions"],
                "conflict_dmin": info["conflict_dmin"],
            })
        if done:
            break

    stats = env.episode_stats()
    metrics = EpisodeMetrics(
        seed=int(seed),
        noise=bool(noise),
        total_reward=float(total),
        mean_battery=float(stats["mean_battery"]),
        good_takeoffs=int(stats["good_takeoffs"]),
        good_landings=int(stats["good_landings"]),
        mean_delay_hours=float(stats["mean_delay_minutes"]) / 60.0,
        collisions=int(stats["collisions"]),
        near_misses=int(stats["near_misses"]),
        battery_depletions=int(stats["battery_depletions"]),
        congestion_events=int(stats["congestion_events"]),
        decisions=int(stats["decisions"]),
    )
    return metrics, trace


def _episode_job(args):
    config, kind, checkpoint, seed, noise = args
    agent = make_agent(kind, config, checkpoint)
    metrics, _ = run_episode(config, agent, seed, noise=noise)
    return metrics


def run_case_study(config: ScenarioConfig, agent, episodes: int, seed_base: int = 0,
                   noise: bool = False, workers: int = 1):
    """Evaluate one agent over ``episodes`` consecutive seeds.

    Returns (per-episode metrics, aggregate table).  Parallel execution
    shards by episode, so the result does not depend on ``workers``.
    """
    seeds = [seed_base + i for i in range(int(episodes))]
    if workers > 1:
        checkpoint = getattr(agent, "checkpoint", None)
        if agent.name == "grl" and checkpoint is None:
            raise ValueError("parallel runs need a checkpoint-backed learned agent")
        jobs = [(config, agent.name, checkpoint, s, noise) for s in seeds]
        with multiprocessing.Pool(processes=int(workers)) as pool:
            results = pool.map(_episode_job, jobs)
    else:
        results = []
        for s in seeds:
            metrics, _ = run_episode(config, agent, s, noise=noise)
            results.append(metrics)
    return results, aggregate_metrics(results)


def aggregate_metrics(results) -> dict:
    """Population mean and spread for each metric over a result list."""
    table = {}
    for field in METRIC_FIELDS:
        values = np.array([getattr(m, field) for m in results], dtype=np.float64)
        table[field] = {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=0)),
            "n": len(results),
        }
    return table


# -- reports ----------------------------------------------------------------

def build_report(agent_name: str, config: ScenarioConfig, noise: bool,
                 results, aggregates: dict) -> dict:
    return {
        "agent": agent_name,
        "config_hash": config_hash(config),
        "noise": bool(noise),
        "seeds": [m.seed for m in results],
        "episodes": len(results),
        "metrics": aggregates,
    }


def write_report(out_dir: str, report: dict, results) -> dict:
    """Write report.json plus the two delimited views; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "metric", "mean", "std", "n", "noise", "config_hash"])
        for field in METRIC_FIELDS:
            cell = report["metrics"][field]
            writer.writerow([report["agent"], field, f"{cell['mean']:.6f}",
                             f"{cell['std']:.6f}", cell["n"],
                             int(report["noise"]), report["config_hash"]])

    episodes_path = os.path.join(out_dir, "episodes.csv")
    with open(episodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "noise"] + list(METRIC_FIELDS) + ["decisions"])
        for m in results:
            row = [m.seed, int(m.noise)]
            row += [getattr(m, field) for field in METRIC_FIELDS]
            row.append(m.decisions)
            writer.writerow(row)

    return {"report": report_path, "metrics": metrics_path, "episodes": episodes_path}


def load_report(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def compare_reports(reports) -> dict:
    """Rank evaluation reports that share a config, seed list, and noise flag.

    Raises ValueError when the runs are not comparable.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    first = reports[0]
    for other in reports[1:]:
        if other["config_hash"] != first["config_hash"]:
            raise ValueError(
                f"reports mix configs: {other['config_hash']} vs {first['config_hash']}")
        if other["noise"] != first["noise"]:
            raise ValueError("reports mix noisy and clean evaluations")
        if list(other["seeds"]) != list(first["seeds"]):
            raise ValueError("reports were run on different seed lists")

    ranked = sorted(reports, key=lambda r: -r["metrics"]["total_reward"]["mean"])
    return {
        "ranked": [r["agent"] for r in ranked],
        "best": ranked[0]["agent"],
        "table": _comparison_table(ranked),
        "rows": _comparison_rows(ranked),
    }


def _comparison_table(reports) -> str:
    names = [r["agent"] for r in reports]
    width = max(len("metric"), max(len(f) for f in METRIC_FIELDS))
    cols = [max(len(n), 18) for n in names]
    lines = ["  ".join(["metric".ljust(width)] + [n.rjust(c) for n, c in zip(names, cols)])]
    for field in METRIC_FIELDS:
        cells = []
        for r, c in zip(reports, cols):
            cell = r["metrics"][field]
            cells.append(f"{cell['mean']:.3f} +/- {cell['std']:.3f}".rjust(c))
        lines.append("  ".join([field.ljust(width)] + cells))
    return "\n".join(lines)


def _comparison_rows(reports):
    rows = []
    for r in reports:
        for field in METRIC_FIELDS:
            cell = r["metrics"][field]
            rows.append([r["agent"], field, f"{cell['mean']:.6f}", f"{cell['std']:.6f}",
                         cell["n"], int(r["noise"]), r["config_hash"]])
    return rows


def write_comparison(out_dir: str, comparison: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "comparison.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "metric", "mean", "std", "n", "noise", "config_hash"])
        writer.writerows(comparison["rows"])
    return path


# -- action usage -----------------------------------------------------------

def record_action_distribution(config: ScenarioConfig, agent, episodes: int = 5,
                               seed_base: int = 0, noise: bool = False) -> dict:
    """How often the agent picks each action, pooled over several episodes."""
    counts: dict = {}
    for i in range(int(episodes)):
        _, trace = run_episode(config, agent, seed_base + i, noise=noise,
                               record_trace=True)
        for record in trace:
            name = record["action_name"]
            counts[name] = counts.get(name, 0) + 1
    total = sum(counts.values())
    percent = {name: 100.0 * c / total for name, c in counts.items()}
    return {"counts": counts, "percent": percent, "total": total}


# -- deterministic replay ---------------------------------------------------

def snapshot_episode(config: ScenarioConfig, agent, seed: int, noise: bool,
                     path: str) -> dict:
    """Record one episode, with enough context to re-run it bit for bit."""
    metrics, trace = run_episode(config, agent, seed, noise=noise, record_trace=True)
    payload = {
        "config": config_to_dict(config),
        "agent": agent.name,
        "checkpoint": getattr(agent, "checkpoint", None),
        "seed": int(seed),
        "noise": bool(noise),
        "metrics": metrics.as_dict(),
        "trace": trace,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    return payload


def replay_snapshot(path: str):
    """Re-run a snapshot and check the new trace against the recorded one.

    Returns (matched, message).
    """
    with open(path, "r", encoding="utf-8") as fh:
        stored = json.load(fh)
    config = config_from_dict(stored["config"])
    agent = make_agent(stored["agent"], config, stored.get("checkpoint"))
    metrics, trace = run_episode(config, agent, stored["seed"],
                                 noise=stored["noise"], record_trace=True)

    fresh = json.loads(json.dumps({"metrics": metrics.as_dict(), "trace": trace}))
    if fresh["trace"] != stored["trace"]:
        for i, (a, b) in enumerate(zip(fresh["trace"], stored["trace"])):
            if a != b:
                return False, f"trace diverges at decision {i}: {a} vs {b}"
        return False, (f"trace length changed: {len(fresh['trace'])} vs "
                       f"{len(stored['trace'])}")
    if fresh["metrics"] != stored["metrics"]:
        return False, f"metrics diverge: {fresh['metrics']} vs {stored['metrics']}"
    return True, f"replay of {len(stored['trace'])} decisions matched exactly"
