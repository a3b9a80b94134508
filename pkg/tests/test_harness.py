"""Case-study harness: episode metrics, reports, comparisons, and replay."""
from __future__ import annotations

import json

import numpy as np
import pytest

from vertiport_rl.agents import FcfsAgent, GrlAgent, RandomAgent
from vertiport_rl.config import config_from_dict, config_hash, default_config_dict
from vertiport_rl.env import ActionSpace
from vertiport_rl.harness import (METRIC_FIELDS, EpisodeMetrics, aggregate_metrics,
                                  build_report, compare_reports, load_report,
                                  record_action_distribution, replay_snapshot,
                                  run_case_study, run_episode, snapshot_episode,
                                  write_comparison, write_report)
from vertiport_rl.policy import GrlPolicy


@pytest.fixture()
def config():
    return config_from_dict(default_config_dict())


def test_run_episode_metrics_and_trace(config):
    metrics, trace = run_episode(config, FcfsAgent(), seed=3, record_trace=True)
    assert metrics.seed == 3 and metrics.noise is False
    assert np.isfinite(metrics.total_reward)
    assert len(trace) == metrics.decisions

    # every record's terms recombine into its reward, and the records sum to
    # the episode total
    w = config.reward_weights
    keys = ("takeoff", "landing", "battery", "delay", "safety")
    for record in trace:
        recombined = sum(wi * record["terms"][k] for wi, k in zip(w, keys))
        assert record["reward"] == pytest.approx(recombined, abs=1e-12)
    assert sum(r["reward"] for r in trace) == pytest.approx(metrics.total_reward,
                                                            abs=1e-9)

    steps = [r["step"] for r in trace]
    assert steps == sorted(steps)
    assert steps[-1] == config.episode_steps  # clock reading after the last step


def test_run_episode_without_trace(config):
    metrics, trace = run_episode(config, FcfsAgent(), seed=3)
    assert trace is None
    again, _ = run_episode(config, FcfsAgent(), seed=3)
    assert metrics == again  # same seed, same day


def _metrics(seed, total, **overrides):
    base = dict(seed=seed, noise=False, total_reward=total, mean_battery=70.0,
                good_takeoffs=10, good_landings=10, mean_delay_hours=0.5,
                collisions=0, near_misses=2, battery_depletions=0,
                congestion_events=1, decisions=1400)
    base.update(overrides)
    return EpisodeMetrics(**base)


def test_aggregate_metrics_hand_check():
    results = [_metrics(0, 10.0, collisions=1), _metrics(1, 20.0, collisions=3)]
    table = aggregate_metrics(results)
    assert table["total_reward"]["mean"] == 15.0
    assert table["total_reward"]["std"] == 5.0  # population spread
    assert table["collisions"]["mean"] == 2.0
    assert table["collisions"]["n"] == 2

    single = aggregate_metrics([_metrics(0, 7.5)])
    assert single["total_reward"]["std"] == 0.0
    assert single["total_reward"]["n"] == 1


def test_case_study_is_worker_count_invariant(config):
    agent = FcfsAgent()
    serial, serial_table = run_case_study(config, agent, episodes=2, seed_base=5)
    parallel, parallel_table = run_case_study(config, agent, episodes=2,
                                              seed_base=5, workers=2)
    assert serial == parallel
    assert serial_table == parallel_table
    assert [m.seed for m in serial] == [5, 6]


def test_parallel_grl_needs_a_checkpoint_path(config):
    agent = GrlAgent(GrlPolicy(config, np.random.default_rng(0)))
    with pytest.raises(ValueError, match="checkpoint"):
        run_case_study(config, agent, episodes=2, workers=2)


def test_report_roundtrip(config, tmp_path):
    results, table = run_case_study(config, FcfsAgent(), episodes=2, seed_base=0)
    report = build_report("fcfs", config, False, results, table)
    assert report["config_hash"] == config_hash(config)
    assert report["seeds"] == [0, 1]
    paths = write_report(str(tmp_path), report, results)
    assert load_report(paths["report"]) == report

    with open(paths["metrics"]) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "agent,metric,mean,std,n,noise,config_hash"
    assert len(lines) == 1 + len(METRIC_FIELDS)

    with open(paths["episodes"]) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 1 + len(results)
    assert lines[1].startswith("0,0,")


def test_compare_reports_ranks_and_validates(config):
    def report_for(name, reward):
        results = [_metrics(0, reward), _metrics(1, reward + 2.0)]
        return build_report(name, config, False, results,
                            aggregate_metrics(results))

    weak = report_for("random", -100.0)
    strong = report_for("fcfs", 50.0)
    comparison = compare_reports([weak, strong])
    assert comparison["best"] == "fcfs"
    assert comparison["ranked"] == ["fcfs", "random"]
    assert "total_reward" in comparison["table"]
    assert len(comparison["rows"]) == 2 * len(METRIC_FIELDS)

    with pytest.raises(ValueError, match="at least two"):
        compare_reports([weak])

    noisy = report_for("fcfs", 50.0)
    noisy["noise"] = True
    with pytest.raises(ValueError, match="noisy"):
        compare_reports([weak, noisy])

    other_seeds = report_for("fcfs", 50.0)
    other_seeds["seeds"] = [7, 8]
    with pytest.raises(ValueError, match="seed"):
        compare_reports([weak, other_seeds])

    other_config = report_for("fcfs", 50.0)
    other_config["config_hash"] = "feedfeedfeedfeed"
    with pytest.raises(ValueError, match="mix configs"):
        compare_reports([weak, other_config])


def test_write_comparison_rows(config, tmp_path):
    results = [_metrics(0, 1.0), _metrics(1, 2.0)]
    a = build_report("fcfs", config, False, results, aggregate_metrics(results))
    b = build_report("random", config, False, results, aggregate_metrics(results))
    path = write_comparison(str(tmp_path), compare_reports([a, b]))
    with open(path) as fh:
        lines = fh.read().splitlines()
    assert len(lines) == 1 + 2 * len(METRIC_FIELDS)


def test_action_distribution_uses_real_action_names(config):
    agent = RandomAgent()
    dist = record_action_distribution(config, agent, episodes=1, seed_base=2)
    space = ActionSpace(config.n_ports, config.n_hover_spots)
    valid = {space.name(a) for a in range(space.n_actions)}
    assert set(dist["counts"]) <= valid
    assert sum(dist["counts"].values()) == dist["total"]
    assert sum(dist["percent"].values()) == pytest.approx(100.0, abs=1e-9)


def test_snapshot_replays_exactly(config, tmp_path):
    path = str(tmp_path / "snapshot.json")
    payload = snapshot_episode(config, FcfsAgent(), seed=4, noise=False, path=path)
    assert payload["agent"] == "fcfs"
    assert payload["checkpoint"] is None
    matched, message = replay_snapshot(path)
    assert matched, message
    assert "matched exactly" in message


def test_replay_flags_a_tampered_trace(config, tmp_path):
    path = str(tmp_path / "snapshot.json")
    snapshot_episode(config, FcfsAgent(), seed=4, noise=False, path=path)
    with open(path) as fh:
        stored = json.load(fh)
    stored["trace"][50]["reward"] += 1.0
    with open(path, "w") as fh:
        json.dump(stored, fh)
    matched, message = replay_snapshot(path)
    assert not matched
    assert "decision 50" in message


def test_replay_flags_changed_metrics(config, tmp_path):
    path = str(tmp_path / "snapshot.json")
    snapshot_episode(config, FcfsAgent(), seed=4, noise=False, path=path)
    with open(path) as fh:
        stored = json.load(fh)
    stored["metrics"]["good_takeoffs"] += 1
    with open(path, "w") as fh:
        json.dump(stored, fh)
    matched, message = replay_snapshot(path)
    assert not matched
    assert "metrics diverge" in message
