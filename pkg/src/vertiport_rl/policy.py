"""Actor-critic network over the two vertiport graphs.

Aircraft and pad graphs pass through separate two-layer graph-convolution
encoders.  The fused summary (mean aircraft embedding, mean pad embedding,
and the embedding of the aircraft being commanded) feeds a shared trunk,
then a masked policy head and a scalar value head.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import nn
from .config import ScenarioConfig
from .env import EVTOL_FEATURES, PORT_FEATURES, ActionSpace, Observation


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _linear(params: nn.ParamStore, name: str, x, training: bool, rng,
            activate: bool = True) -> nn.Tensor:
    out = nn.add_rowvec(nn.matmul(x, params[f"{name}_w"]), params[f"{name}_b"])
    if activate:
        out = nn.rrelu(out, training=training, rng=rng)
    return out


class GrlPolicy:
    """Graph-encoder policy and value function sharing one fused trunk."""

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator):
        self.config = config
        self.space = ActionSpace(config.n_ports, config.n_hover_spots)
        net = config.network
        self.params = nn.ParamStore()
        self._shapes: dict[str, tuple[int, int]] = {}

        hidden = net.gcn_hidden
        self._add(rng, "evtol_gcn1", EVTOL_FEATURES, hidden)
        self._add(rng, "evtol_gcn2", hidden, hidden)
        self._add(rng, "pad_gcn1", PORT_FEATURES, hidden)
        self._add(rng, "pad_gcn2", hidden, hidden)

        width = 3 * hidden
        for i, out in enumerate(net.fusion_hidden, start=1):
            self._add(rng, f"fusion{i}", width, out)
            width = out
        trunk = width
        for i, out in enumerate(net.policy_hidden, start=1):
            self._add(rng, f"policy{i}", width, out)
            width = out
        self._add(rng, "policy_out", width, self.space.n_actions)
        width = trunk
        for i, out in enumerate(net.value_hidden, start=1):
            self._add(rng, f"value{i}", width, out)
            width = out
        self._add(rng, "value_out", width, 1)
        self._n_fusion = len(net.fusion_hidden)
        self._n_policy = len(net.policy_hidden)
        self._n_value = len(net.value_hidden)

    def _add(self, rng: np.random.Generator, name: str, fan_in: int, fan_out: int) -> None:
        self.params.add(f"{name}_w", xavier_uniform(rng, fan_in, fan_out))
        self.params.add(f"{name}_b", np.zeros((1, fan_out)))
        self._shapes[f"{name}_w"] = (fan_in, fan_out)
        self._shapes[f"{name}_b"] = (1, fan_out)

    @property
    def n_actions(self) -> int:
        return self.space.n_actions

    def param_shapes(self) -> dict:
        return dict(self._shapes)

    def load_state(self, store: nn.ParamStore) -> None:
        """Copy parameter values in from another store with identical layout."""
        for name, shape in self._shapes.items():
            if name not in store:
                raise ValueError(f"missing parameter {name} in loaded state")
            value = store[name].value
            if value.shape != shape:
                raise ValueError(
                    f"parameter {name}: loaded shape {value.shape}, expected {shape}")
            self.params[name].value[...] = value

    def _encode(self, nodes: np.ndarray, adjacency: np.ndarray, prefix: str,
                training: bool, rng) -> nn.Tensor:
        h = nn.gcn_layer_forward(nodes, adjacency, self.params[f"{prefix}_gcn1_w"],
                                 self.params[f"{prefix}_gcn1_b"], training=training, rng=rng)
        return nn.gcn_layer_forward(h, adjacency, self.params[f"{prefix}_gcn2_w"],
                                    self.params[f"{prefix}_gcn2_b"], training=training, rng=rng)

    def forward(self, obs: Observation, mask: np.ndarray, training: bool = False,
                rng: Optional[np.random.Generator] = None):
        """Returns (log_probs 1 x n_actions, value 1 x 1) as graph nodes."""
        evtol_emb = self._encode(obs.evtol_nodes, obs.evtol_adjacency, "evtol", training, rng)
        pad_emb = self._encode(obs.port_nodes, obs.port_adjacency, "pad", training, rng)
        fused = nn.concat_cols([
            nn.mean_rows(evtol_emb),
            nn.mean_rows(pad_emb),
            nn.take_row(evtol_emb, obs.selected),
        ])
        x = fused
        for i in range(1, self._n_fusion + 1):
            x = _linear(self.params, f"fusion{i}", x, training, rng)
        trunk = x
        for i in range(1, self._n_policy + 1):
            x = _linear(self.params, f"policy{i}", x, training, rng)
        logits = _linear(self.params, "policy_out", x, training, rng, activate=False)
        log_probs = nn.masked_log_softmax(logits, mask)
        x = trunk
        for i in range(1, self._n_value + 1):
            x = _linear(self.params, f"value{i}", x, training, rng)
        value = _linear(self.params, "value_out", x, training, rng, activate=False)
        return log_probs, value


class BanditPolicy:
    """Stateless single-situation policy: free logits plus a free value.

    Shares the forward interface with GrlPolicy so the optimization loop can
    be exercised on a problem whose correct answer is known in closed form.
    """

    def __init__(self, n_actions: int, rng: np.random.Generator):
        self.params = nn.ParamStore()
        self.params.add("logits", rng.normal(0.0, 0.01, size=(1, n_actions)))
        self.params.add("value", np.zeros((1, 1)))
        self.n_actions = n_actions

    def param_shapes(self) -> dict:
        return {"logits": (1, self.n_actions), "value": (1, 1)}

    def load_state(self, store: nn.ParamStore) -> None:
        for name, shape in self.param_shapes().items():
            self.params[name].value[...] = store[name].value.reshape(shape)

    def forward(self, obs, mask, training: bool = False, rng=None):
        log_probs = nn.masked_log_softmax(self.params["logits"], mask)
        return log_probs, self.params["value"]


def sample_action(log_probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an action index from a 1-row log-probability matrix."""
    p = np.exp(log_probs[0])
    p = np.where(np.isfinite(log_probs[0]), p, 0.0)
    p = p / p.sum()
    return int(rng.choice(len(p), p=p))


def greedy_action(log_probs: np.ndarray) -> int:
    return int(np.argmax(log_probs[0]))


def fresh_policy(config: ScenarioConfig, init_rng: np.random.Generator) -> GrlPolicy:
    return GrlPolicy(config, init_rng)


def policy_from_checkpoint(path: str, config: ScenarioConfig) -> GrlPolicy:
    """Rebuild a policy for ``config`` and load trained weights from ``path``."""
    from .config import config_hash

    policy = GrlPolicy(config, np.random.default_rng(0))
    store, _meta = nn.load_checkpoint(path, expected_config_hash=config_hash(config),
                                      expected_shapes=policy.param_shapes())
    policy.load_state(store)
    return policy


def policy_gradient_check(config: ScenarioConfig, seed: int, n_coords: int = 30,
                          h: float = 1e-5) -> float:
    """Compare the full network's analytic gradient against central differences.

    A fresh policy looks at a mid-episode observation; the loss mixes the
    chosen log-probability, the squared value, and the entropy so every head
    contributes.  Coordinates are sampled across all parameters.  Returns the
    worst relative error.
    """
    from .config import episode_seed_sequence, seed_streams
    from .env import make_env

    streams = seed_streams(seed)
    policy = GrlPolicy(config, streams["policy_init"])
    rng = streams["rollout"]

    env = make_env(config, noise=False)
    env.reset(episode_seed_sequence(seed, 0))
    for _ in range(int(rng.integers(3, 12))):
        if env.done:
            break
        feasible = np.flatnonzero(env.current_mask())
        env.step(int(rng.choice(feasible)))
    if env.done:
        env.reset(episode_seed_sequence(seed, 1))
    obs = env.observe()
    mask = env.current_mask()
    action = int(np.flatnonzero(mask)[0])

    def build_loss():
        log_probs, value = policy.forward(obs, mask, training=False)
        picked = nn.gather(log_probs, action)
        entropy = nn.entropy_from_log_probs(log_probs, mask)
        return nn.add(nn.add(picked, nn.scale(nn.square(value), 0.5)),
                      nn.scale(entropy, 0.1))

    sizes = [(name, policy.params[name].value.size) for name in policy.params.names()]
    total = sum(size for _, size in sizes)
    flat_ids = rng.choice(total, size=min(n_coords, total), replace=False)
    coords = []
    for flat in sorted(int(i) for i in flat_ids):
        for name, size in sizes:
            if flat < size:
                coords.append((name, flat))
                break
            flat -= size
    return nn.finite_difference_check(build_loss, policy.params, coords, h=h)
