"""Scenario configuration: schema, validation, seeding, and the config hash.

A scenario file is a flat JSON object.  Every key is checked; unknown keys are
rejected so that typos fail loudly instead of silently falling back to
defaults.  ``config_hash`` covers the structural fields (layout, dynamics,
reward shaping, network sizes) so that checkpoints and evaluation reports can
be matched to the world they were produced in.  Seed and noise settings are
deliberately excluded from the hash: the same world evaluated under a
different seed is still the same world.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


class ConfigError(ValueError):
    """Raised when a scenario config fails validation."""


@dataclass(frozen=True)
class PortSpec:
    kind: str  # "normal" or "charging"
    x: float
    y: float


@dataclass(frozen=True)
class UncertaintySpec:
    p_wind: float = 0.05
    p_port_fail: float = 0.05
    p_takeoff_fail: float = 0.05
    enabled: bool = False  # runtime toggle, not part of the scenario file


@dataclass(frozen=True)
class PpoConfig:
    max_timesteps: int = 300_000
    learning_rate: float = 1e-5
    discount: float = 1.0
    n_steps: int = 20_000
    batch_size: int = 10_000
    epochs_per_update: int = 10
    entropy_coef: float = 0.001
    value_coef: float = 0.5
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95


@dataclass(frozen=True)
class NetworkConfig:
    gcn_hidden: int = 64
    fusion_hidden: tuple = (128, 64)
    policy_hidden: tuple = (64, 32, 32)
    value_hidden: tuple = (32,)
    connectivity: str = "complete"  # "complete" or "self" (isolated nodes, for ablation)


@dataclass(frozen=True)
class ScenarioConfig:
    n_evtols: int
    ports: tuple
    hover_spots: tuple
    destinations: tuple
    cruise_speed: float
    minutes_per_step: float
    episode_steps: int
    airspace_entry_radius: float
    reward_weights: tuple
    battery_threshold: float
    separation_threshold: float
    collision_threshold: float
    uncertainty: UncertaintySpec
    seed: int
    ppo: PpoConfig = field(default_factory=PpoConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    @property
    def n_ports(self) -> int:
        return len(self.ports)

    @property
    def n_hover_spots(self) -> int:
        return len(self.hover_spots)

    @property
    def n_destinations(self) -> int:
        return len(self.destinations)

    @property
    def world_extent(self) -> float:
        """Largest coordinate magnitude in the layout, used to normalize positions."""
        coords = [abs(p.x) for p in self.ports] + [abs(p.y) for p in self.ports]
        coords += [abs(c) for xy in self.hover_spots for c in xy]
        coords += [abs(c) for xy in self.destinations for c in xy]
        return max(coords) if coords else 1.0

    def with_noise(self, enabled: bool) -> "ScenarioConfig":
        unc = UncertaintySpec(
            p_wind=self.uncertainty.p_wind,
            p_port_fail=self.uncertainty.p_port_fail,
            p_takeoff_fail=self.uncertainty.p_takeoff_fail,
            enabled=enabled,
        )
        return ScenarioConfig(**{**self.__dict__, "uncertainty": unc})

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(**{**self.__dict__, "seed": seed})


def _ring(radius: float, count: int) -> list:
    pts = []
    for k in range(count):
        angle = 2.0 * math.pi * k / count
        pts.append((radius * math.cos(angle), radius * math.sin(angle)))
    return pts


def default_config_dict() -> dict:
    """Built-in scenario: 3 ports, 7 hover spots on a ring, 5 destinations."""
    return {
        "n_evtols": 4,
        "ports": [
            {"kind": "normal", "x": 0.0, "y": 0.0},
            {"kind": "normal", "x": 6.0, "y": 0.0},
            {"kind": "charging", "x": 3.0, "y": 5.0},
        ],
        "hover_spots": [[round(x, 10), round(y, 10)] for x, y in _ring(12.0, 7)],
        "destinations": [[round(x, 10), round(y, 10)] for x, y in _ring(60.0, 5)],
        "cruise_speed": 4.0,
        "minutes_per_step": 1.0,
        "episode_steps": 1440,
        "airspace_entry_radius": 15.0,
        "reward_weights": [0.3, 0.3, 0.35, 0.1, 0.35],
        "battery_threshold": 30.0,
        "separation_threshold": 3.0,
        "collision_threshold": 1.0,
        "uncertainty": {"p_wind": 0.05, "p_port_fail": 0.05, "p_takeoff_fail": 0.05},
        "seed": 0,
    }


_TOP_LEVEL_KEYS = {
    "n_evtols", "ports", "hover_spots", "destinations", "cruise_speed",
    "minutes_per_step", "episode_steps", "airspace_entry_radius",
    "reward_weights", "battery_threshold", "separation_threshold",
    "collision_threshold", "uncertainty", "seed", "ppo", "network",
}
_UNCERTAINTY_KEYS = {"p_wind", "p_port_fail", "p_takeoff_fail"}
_PPO_KEYS = {
    "max_timesteps", "learning_rate", "discount", "n_steps", "batch_size",
    "epochs_per_update", "entropy_coef", "value_coef", "clip_ratio", "gae_lambda",
}
_NETWORK_KEYS = {"gcn_hidden", "fusion_hidden", "policy_hidden", "value_hidden", "connectivity"}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_number(d: dict, key: str, lo=None, hi=None, integer=False) -> None:
    _require(key in d, f"{key}: missing required field")
    v = d[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)
    _require(ok, f"{key}: expected a finite number, got {v!r}")
    if integer:
        _require(float(v) == int(v), f"{key}: expected an integer, got {v!r}")
    if lo is not None:
        _require(v >= lo, f"{key}: must be >= {lo}, got {v}")
    if hi is not None:
        _require(v <= hi, f"{key}: must be <= {hi}, got {v}")


def _xy_pairs(d: dict, key: str) -> list:
    _require(key in d, f"{key}: missing required field")
    raw = d[key]
    _require(isinstance(raw, (list, tuple)), f"{key}: expected a list of [x, y] pairs")
    pts = []
    for i, item in enumerate(raw):
        ok = isinstance(item, (list, tuple)) and len(item) == 2
        _require(ok, f"{key}[{i}]: expected an [x, y] pair")
        x, y = item
        for c in (x, y):
            _require(
                isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c),
                f"{key}[{i}]: coordinates must be finite numbers",
            )
        pts.append((float(x), float(y)))
    return pts


def config_from_dict(data: dict) -> ScenarioConfig:
    """Validate a raw dict (parsed scenario JSON) and build a ScenarioConfig."""
    _require(isinstance(data, dict), "scenario config must be a JSON object")
    unknown = set(data) - _TOP_LEVEL_KEYS
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")

    _check_number(data, "n_evtols", lo=1, integer=True)
    _check_number(data, "cruise_speed", lo=1e-9)
    _check_number(data, "minutes_per_step", lo=1e-9)
    _check_number(data, "episode_steps", lo=1, integer=True)
    _check_number(data, "airspace_entry_radius", lo=1e-9)
    _check_number(data, "battery_threshold", lo=0.0, hi=100.0)
    _check_number(data, "separation_threshold", lo=0.0)
    _check_number(data, "collision_threshold", lo=0.0)
    _check_number(data, "seed", lo=0, integer=True)

    _require("ports" in data, "ports: missing required field")
    _require(isinstance(data["ports"], (list, tuple)) and data["ports"],
             "ports: expected a non-empty list")
    ports = []
    for i, p in enumerate(data["ports"]):
        _require(isinstance(p, dict), f"ports[{i}]: expected an object")
        extra = set(p) - {"kind", "x", "y"}
        _require(not extra, f"ports[{i}]: unknown keys {sorted(extra)}")
        _require(p.get("kind") in ("normal", "charging"),
                 f"ports[{i}].kind: expected 'normal' or 'charging', got {p.get('kind')!r}")
        for c in ("x", "y"):
            _require(
                isinstance(p.get(c), (int, float)) and not isinstance(p.get(c), bool)
                and math.isfinite(p[c]),
                f"ports[{i}].{c}: expected a finite number",
            )
        ports.append(PortSpec(kind=p["kind"], x=float(p["x"]), y=float(p["y"])))

    hover_spots = _xy_pairs(data, "hover_spots")
    _require(hover_spots, "hover_spots: expected at least one spot")
    destinations = _xy_pairs(data, "destinations")
    _require(destinations, "destinations: expected at least one destination")

    _require("reward_weights" in data, "reward_weights: missing required field")
    weights = data["reward_weights"]
    _require(isinstance(weights, (list, tuple)) and len(weights) == 5,
             f"reward_weights: expected 5 entries, got {len(weights) if isinstance(weights, (list, tuple)) else weights!r}")
    for i, w in enumerate(weights):
        _require(isinstance(w, (int, float)) and not isinstance(w, bool) and math.isfinite(w),
                 f"reward_weights[{i}]: expected a finite number")

    _require("uncertainty" in data, "uncertainty: missing required field")
    unc = data["uncertainty"]
    _require(isinstance(unc, dict), "uncertainty: expected an object")
    extra = set(unc) - _UNCERTAINTY_KEYS
    _require(not extra, f"uncertainty: unknown keys {sorted(extra)}")
    for k in _UNCERTAINTY_KEYS:
        _check_number(unc, k, lo=0.0, hi=1.0)

    ppo_kwargs = {}
    if "ppo" in data:
        _require(isinstance(data["ppo"], dict), "ppo: expected an object")
        extra = set(data["ppo"]) - _PPO_KEYS
        _require(not extra, f"ppo: unknown keys {sorted(extra)}")
        ppo_kwargs = dict(data["ppo"])
    ppo = PpoConfig(**ppo_kwargs)
    _require(ppo.n_steps >= 1 and ppo.batch_size >= 1,
             "ppo: n_steps and batch_size must be positive")
    _require(ppo.n_steps % ppo.batch_size == 0,
             f"ppo: batch_size {ppo.batch_size} must divide n_steps {ppo.n_steps}")
    _require(0.0 < ppo.clip_ratio < 1.0, f"ppo.clip_ratio: must be in (0, 1), got {ppo.clip_ratio}")
    _require(0.0 <= ppo.gae_lambda <= 1.0, f"ppo.gae_lambda: must be in [0, 1], got {ppo.gae_lambda}")
    _require(0.0 <= ppo.discount <= 1.0, f"ppo.discount: must be in [0, 1], got {ppo.discount}")
    _require(ppo.learning_rate > 0, f"ppo.learning_rate: must be positive, got {ppo.learning_rate}")

    net_kwargs: dict = {}
    if "network" in data:
        _require(isinstance(data["network"], dict), "network: expected an object")
        extra = set(data["network"]) - _NETWORK_KEYS
        _require(not extra, f"network: unknown keys {sorted(extra)}")
        net_kwargs = dict(data["network"])
        for k in ("fusion_hidden", "policy_hidden", "value_hidden"):
            if k in net_kwargs:
                net_kwargs[k] = tuple(int(v) for v in net_kwargs[k])
    network = NetworkConfig(**net_kwargs)
    _require(network.gcn_hidden >= 1, "network.gcn_hidden: must be positive")
    for k in ("fusion_hidden", "policy_hidden", "value_hidden"):
        sizes = getattr(network, k)
        _require(all(isinstance(s, int) and s >= 1 for s in sizes),
                 f"network.{k}: sizes must be positive integers")
    _require(network.connectivity in ("complete", "self"),
             f"network.connectivity: expected 'complete' or 'self', got {network.connectivity!r}")

    cfg = ScenarioConfig(
        n_evtols=int(data["n_evtols"]),
        ports=tuple(ports),
        hover_spots=tuple(hover_spots),
        destinations=tuple(destinations),
        cruise_speed=float(data["cruise_speed"]),
        minutes_per_step=float(data["minutes_per_step"]),
        episode_steps=int(data["episode_steps"]),
        airspace_entry_radius=float(data["airspace_entry_radius"]),
        reward_weights=tuple(float(w) for w in weights),
        battery_threshold=float(data["battery_threshold"]),
        separation_threshold=float(data["separation_threshold"]),
        collision_threshold=float(data["collision_threshold"]),
        uncertainty=UncertaintySpec(
            p_wind=float(unc["p_wind"]),
            p_port_fail=float(unc["p_port_fail"]),
            p_takeoff_fail=float(unc["p_takeoff_fail"]),
        ),
        seed=int(data["seed"]),
        ppo=ppo,
        network=network,
    )
    _validate_layout(cfg)
    return cfg


def _validate_layout(cfg: ScenarioConfig) -> None:
    # Layout geometry rules: pads inside the controlled airspace, destinations outside,
    # no two pads on the same coordinates.
    r = cfg.airspace_entry_radius
    pads = [(p.x, p.y) for p in cfg.ports] + list(cfg.hover_spots)
    for i, (x, y) in enumerate(pads):
        _require(math.hypot(x, y) <= r,
                 f"layout: pad {i} at ({x}, {y}) lies outside the airspace radius {r}")
    for i, (x, y) in enumerate(cfg.destinations):
        _require(math.hypot(x, y) > r,
                 f"destinations[{i}]: ({x}, {y}) must lie outside the airspace radius {r}")
    seen = {}
    for i, xy in enumerate(pads):
        _require(xy not in seen, f"layout: pads {seen.get(xy)} and {i} share coordinates {xy}")
        seen[xy] = i
    _require(len(set(cfg.destinations)) == len(cfg.destinations),
             "destinations: coordinates must be distinct")


def default_config() -> ScenarioConfig:
    return config_from_dict(default_config_dict())


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Resolved config as a plain dict, suitable for snapshots and hashing."""
    return {
        "n_evtols": cfg.n_evtols,
        "ports": [{"kind": p.kind, "x": p.x, "y": p.y} for p in cfg.ports],
        "hover_spots": [list(xy) for xy in cfg.hover_spots],
        "destinations": [list(xy) for xy in cfg.destinations],
        "cruise_speed": cfg.cruise_speed,
        "minutes_per_step": cfg.minutes_per_step,
        "episode_steps": cfg.episode_steps,
        "airspace_entry_radius": cfg.airspace_entry_radius,
        "reward_weights": list(cfg.reward_weights),
        "battery_threshold": cfg.battery_threshold,
        "separation_threshold": cfg.separation_threshold,
        "collision_threshold": cfg.collision_threshold,
        "uncertainty": {
            "p_wind": cfg.uncertainty.p_wind,
            "p_port_fail": cfg.uncertainty.p_port_fail,
            "p_takeoff_fail": cfg.uncertainty.p_takeoff_fail,
        },
        "seed": cfg.seed,
        "ppo": {k: getattr(cfg.ppo, k) for k in sorted(_PPO_KEYS)},
        "network": {
            "gcn_hidden": cfg.network.gcn_hidden,
            "fusion_hidden": list(cfg.network.fusion_hidden),
            "policy_hidden": list(cfg.network.policy_hidden),
            "value_hidden": list(cfg.network.value_hidden),
            "connectivity": cfg.network.connectivity,
        },
    }


def config_hash(cfg: ScenarioConfig) -> str:
    """Hex digest over the structural fields (no seed, no noise toggle, no PPO schedule)."""
    d = config_to_dict(cfg)
    for key in ("seed", "uncertainty", "ppo"):
        d.pop(key, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# Named child streams hanging off one root seed.  Every consumer of randomness
# pulls from exactly one of these, so runs are reproducible bit for bit.
STREAM_NAMES = ("env", "policy_init", "rollout", "rrelu")


def seed_streams(seed: int) -> dict:
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAM_NAMES, children)}


def episode_seed_sequence(seed: int, episode: int) -> np.random.SeedSequence:
    """Stable per-episode entropy for training environments."""
    return np.random.SeedSequence(entropy=(int(seed), 0x5EED, int(episode)))
