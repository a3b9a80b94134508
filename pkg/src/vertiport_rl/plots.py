"""Figure rendering for training logs, case studies, and action usage.

Everything draws through the Agg backend straight to files; nothing here
opens a window.  The harness stays figure-free, these helpers consume its
CSV and report output.
"""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import METRIC_FIELDS


def _ensure_dir(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def _read_training_log(log_path: str) -> dict:
    columns: dict = {}
    with open(log_path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            for key, value in row.items():
                columns.setdefault(key, []).append(value)
    return columns


def _floats(values, episodes):
    """Parse a column that may hold blanks (episodes before the first update)."""
    xs, ys = [], []
    for e, v in zip(episodes, values):
        if v != "":
            xs.append(e)
            ys.append(float(v))
    return xs, ys


def plot_training_curves(log_path: str, out_path: str, window: int = 10) -> str:
    """Four-panel training summary from the per-episode CSV log."""
    cols = _read_training_log(log_path)
    episodes = [int(e) for e in cols["episode"]]
    rewards = [float(r) for r in cols["total_reward"]]

    fig, axes = plt.subplots(2, 2, figsize=(11, 7))

    ax = axes[0, 0]
    ax.plot(episodes, rewards, color="#9ecae1", label="episode")
    if len(rewards) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(rewards, kernel, mode="valid")
        ax.plot(episodes[window - 1:], smooth, color="#08519c",
                label=f"rolling mean ({window})")
    ax.set_xlabel("episode")
    ax.set_ylabel("total reward")
    ax.legend()

    ax = axes[0, 1]
    for column, color in (("policy_loss", "#d95f02"), ("value_loss", "#7570b3")):
        xs, ys = _floats(cols[column], episodes)
        if xs:
            ax.plot(xs, ys, color=color, label=column.replace("_", " "))
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.legend()

    ax = axes[1, 0]
    xs, ys = _floats(cols["entropy"], episodes)
    if xs:
        ax.plot(xs, ys, color="#1b9e77", label="entropy")
    xs, ys = _floats(cols["clip_fraction"], episodes)
    if xs:
        ax.plot(xs, ys, color="#e7298a", linestyle="--", label="clip fraction")
    ax.set_xlabel("episode")
    ax.legend()

    ax = axes[1, 1]
    ax.plot(episodes, [float(v) for v in cols["good_takeoffs"]], label="good takeoffs")
    ax.plot(episodes, [float(v) for v in cols["good_landings"]], label="good landings")
    ax.plot(episodes, [float(v) for v in cols["collisions"]], label="collisions")
    ax.set_xlabel("episode")
    ax.set_ylabel("count")
    ax.legend()

    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_metric_bars(reports, out_path: str) -> str:
    """One panel per metric, one bar per agent, whiskers at one deviation.

    Works for a single report or a whole comparison.
    """
    if isinstance(reports, dict):
        reports = [reports]
    names = [r["agent"] for r in reports]
    rows = 3
    cols = (len(METRIC_FIELDS) + rows - 1) // rows
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 7.5))
    flat = axes.ravel()
    palette = plt.get_cmap("tab10")

    for k, field in enumerate(METRIC_FIELDS):
        ax = flat[k]
        means = [r["metrics"][field]["mean"] for r in reports]
        stds = [r["metrics"][field]["std"] for r in reports]
        xs = np.arange(len(reports))
        ax.bar(xs, means, yerr=stds, capsize=4,
               color=[palette(i % 10) for i in range(len(reports))])
        ax.set_xticks(xs)
        ax.set_xticklabels(names, rotation=20)
        ax.set_title(field.replace("_", " "), fontsize=10)
    for k in range(len(METRIC_FIELDS), len(flat)):
        flat[k].axis("off")

    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_action_distribution(distribution: dict, out_path: str, title: str = "") -> str:
    """Horizontal bars of action usage percentages."""
    percent = distribution["percent"]
    names = sorted(percent, key=lambda n: -percent[n])
    values = [percent[n] for n in names]

    fig, ax = plt.subplots(figsize=(7, 0.45 * len(names) + 1.5))
    ys = np.arange(len(names))
    ax.barh(ys, values, color="#4292c6")
    ax.set_yticks(ys)
    ax.set_yticklabels(names)
    ax.invert_yaxis()
    ax.set_xlabel("share of decisions (%)")
    if title:
        ax.set_title(title)
    for y, v in zip(ys, values):
        ax.text(v, y, f" {v:.1f}%", va="center", fontsize=8)

    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
