"""Vertiport traffic control: deterministic simulator, graph-RL agent, baselines."""

__version__ = "0.1.0"
