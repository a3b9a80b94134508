"""Decision makers and the training loop.

Three agents share one tiny interface (``begin_episode`` then ``act``): the
learned policy run greedily, a first-come-first-served dispatcher, and a
uniform-random feasible agent.  Training uses clipped-surrogate policy
optimization over rollouts collected from the simulator.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .config import (PpoConfig, ScenarioConfig, config_hash, episode_seed_sequence,
                     seed_streams)
from .env import VertiportEnv, make_env
from .policy import BanditPolicy, GrlPolicy, greedy_action, sample_action
from .world import EvtolStatus, GROUNDED_STATUSES, PlanKind, PortKind

LOG_COLUMNS = ("episode", "steps", "total_reward", "policy_loss", "value_loss",
               "entropy", "clip_fraction", "mean_battery", "good_takeoffs",
               "good_landings", "mean_delay_hours", "collisions")


# -- evaluation-time agents -------------------------------------------------

class RandomAgent:
    """Uniform draw over the feasible actions."""

    name = "random"

    def __init__(self):
        self._rng: Optional[np.random.Generator] = None

    def begin_episode(self, rng: Optional[np.random.Generator] = None) -> None:
        if rng is None:
            raise ValueError("random agent needs a generator at episode start")
        self._rng = rng

    def act(self, env: VertiportEnv) -> int:
        feasible = np.flatnonzero(env.current_mask())
        return int(self._rng.choice(feasible))


class FcfsAgent:
    """First-come-first-served dispatcher.

    Departures run in scheduled order, one release per minute.  Arrivals land
    in the order they entered the airspace (earlier landing deadline first),
    taking a charging pad when below the charge threshold and a normal pad
    otherwise.  Aircraft sitting on a charger stay until charged back up.
    """

    name = "fcfs"

    def __init__(self, charge_threshold: float = 60.0):
        self.charge_threshold = charge_threshold

    def begin_episode(self, rng: Optional[np.random.Generator] = None) -> None:
        pass

    def act(self, env: VertiportEnv) -> int:
        state = env.state
        space = env.space
        mask = env.current_mask()
        ev = state.evtols[env.acting_index]

        if ev.status in GROUNDED_STATUSES:
            if self._must_keep_charging(state, ev):
                return space.STAY
            plan = ev.plan
            now = state.clock.now
            if plan is None or plan.kind is not PlanKind.TAKEOFF \
                    or now < plan.scheduled_minute or not mask[space.TAKEOFF]:
                return space.STAY
            ready = [e for e in state.evtols
                     if e.status in GROUNDED_STATUSES
                     and e.plan is not None and e.plan.kind is PlanKind.TAKEOFF
                     and now >= e.plan.scheduled_minute
                     and not self._must_keep_charging(state, e)]
            head = min(ready, key=lambda e: (e.plan.scheduled_minute, e.id))
            return space.TAKEOFF if head.id == ev.id else space.STAY

        if ev.status is EvtolStatus.HOVERING:
            waiting = [e for e in state.evtols if e.status is EvtolStatus.HOVERING]
            head = min(waiting, key=self._entry_order)
            if head.id != ev.id:
                return space.STAY
            choice = self._choose_port(state, ev, mask, space)
            return space.STAY if choice is None else choice

        if mask[space.continue_id]:
            return space.continue_id
        return space.STAY

    def _must_keep_charging(self, state, ev) -> bool:
        if ev.status is not EvtolStatus.CHARGING:
            return False
        return ev.battery < self.charge_threshold

    @staticmethod
    def _entry_order(ev):
        deadline = math.inf
        if ev.plan is not None and ev.plan.kind is PlanKind.LANDING \
                and ev.plan.scheduled_minute is not None:
            deadline = ev.plan.scheduled_minute
        return (deadline, ev.id)

    def _choose_port(self, state, ev, mask, space) -> Optional[int]:
        free = [(i, state.ports[i]) for i in range(space.n_ports)
                if mask[space.first_port_action + i]]
        if not free:
            return None
        prefer = PortKind.CHARGING if ev.battery < self.charge_threshold else PortKind.NORMAL
        pool = [(i, p) for i, p in free if p.kind is prefer] or free
        i, _ = min(pool, key=lambda item: (
            math.hypot(item[1].position[0] - ev.position[0],
                       item[1].position[1] - ev.position[1]), item[0]))
        return space.first_port_action + i


class GrlAgent:
    """Trained policy run greedily (highest log-probability action)."""

    name = "grl"

    def __init__(self, policy: GrlPolicy):
        self.policy = policy

    def begin_episode(self, rng: Optional[np.random.Generator] = None) -> None:
        pass

    def act(self, env: VertiportEnv) -> int:
        log_probs, _ = self.policy.forward(env.observe(), env.current_mask(), training=False)
        return greedy_action(log_probs.value)


def make_agent(kind: str, config: ScenarioConfig, checkpoint: Optional[str] = None):
    if kind == "random":
        return RandomAgent()
    if kind == "fcfs":
        return FcfsAgent()
    if kind == "grl":
        if checkpoint is None:
            raise ValueError("the learned agent needs a checkpoint path")
        from .policy import policy_from_checkpoint
        agent = GrlAgent(policy_from_checkpoint(checkpoint, config))
        agent.checkpoint = checkpoint  # lets worker processes rebuild the agent
        return agent
    raise ValueError(f"unknown agent kind: {kind!r}")


# -- advantage estimation ---------------------------------------------------

def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                last_value: float, discount: float, lam: float):
    """Generalized advantage estimates plus value targets for one trajectory
    segment.

    ``dones[t]`` marks step t as the last of its episode; the bootstrap value
    for the segment's open tail is ``last_value``.  Returns (advantages,
    returns) with returns = advantages + values.
    """
    n = len(rewards)
    advantages = np.zeros(n)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            next_value = 0.0
            not_done = 0.0
        else:
            next_value = values[t + 1] if t + 1 < n else last_value
            not_done = 1.0
        delta = rewards[t] + discount * next_value * not_done - values[t]
        gae = delta + discount * lam * not_done * gae
        advantages[t] = gae
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


# -- clipped-surrogate update ----------------------------------------------

def ppo_update(policy, optimizer: nn.Adam, batch: dict, cfg: PpoConfig,
               perm_rng: np.random.Generator,
               rrelu_rng: Optional[np.random.Generator]) -> dict:
    """One optimization pass over a collected buffer.

    Gradients accumulate per sample (scaled by 1/minibatch) so the engine
    never needs batched graph nodes.  Raises RuntimeError if any minibatch
    produces a non-finite loss.
    """
    n = len(batch["action"])
    pg_sum = 0.0
    vf_sum = 0.0
    ent_sum = 0.0
    clip_hits = 0
    count = 0
    for epoch in range(cfg.epochs_per_update):
        order = perm_rng.permutation(n)
        for mb_index, start in enumerate(range(0, n, cfg.batch_size)):
            chosen_rows = order[start:start + cfg.batch_size]
            b = len(chosen_rows)
            policy.params.zero_grads()
            mb_pg = 0.0
            mb_vf = 0.0
            mb_ent = 0.0
            for j in chosen_rows:
                log_probs, value = policy.forward(batch["obs"][j], batch["mask"][j],
                                                  training=True, rng=rrelu_rng)
                chosen = nn.gather(log_probs, int(batch["action"][j]))
                ratio = nn.exp_of(nn.add_scalar(chosen, -float(batch["log_prob"][j])))
                adv = float(batch["advantage"][j])
                surrogate = nn.minimum(
                    nn.scale(ratio, adv),
                    nn.scale(nn.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), adv))
                pg_loss = nn.scale(surrogate, -1.0)
                value_err = nn.add_scalar(value, -float(batch["return"][j]))
                value_loss = nn.square(value_err)
                entropy = nn.entropy_from_log_probs(log_probs, batch["mask"][j])
                loss = nn.add(nn.add(pg_loss, nn.scale(value_loss, cfg.value_coef)),
                              nn.scale(entropy, -cfg.entropy_coef))
                nn.backward(nn.scale(loss, 1.0 / b), accumulate=True)
                mb_pg += pg_loss.value[0, 0]
                mb_vf += value_loss.value[0, 0]
                mb_ent += entropy.value[0, 0]
                if abs(ratio.value[0, 0] - 1.0) > cfg.clip_ratio:
                    clip_hits += 1
            if not (math.isfinite(mb_pg) and math.isfinite(mb_vf) and math.isfinite(mb_ent)):
                raise RuntimeError(
                    f"non-finite loss in epoch {epoch} minibatch {mb_index}")
            optimizer.step()
            pg_sum += mb_pg
            vf_sum += mb_vf
            ent_sum += mb_ent
            count += b
    return {
        "policy_loss": pg_sum / count,
        "value_loss": vf_sum / count,
        "entropy": ent_sum / count,
        "clip_fraction": clip_hits / count,
    }


# -- training loop ----------------------------------------------------------

@dataclass
class _Segment:
    obs: list = field(default_factory=list)
    mask: list = field(default_factory=list)
    action: list = field(default_factory=list)
    log_prob: list = field(default_factory=list)
    value: list = field(default_factory=list)
    reward: list = field(default_factory=list)
    done: list = field(default_factory=list)


def _write_json(payload: dict, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_optimizer(optimizer: nn.Adam, path: str) -> None:
    payload = {
        "t": optimizer.t,
        "m": {k: v.ravel().tolist() for k, v in optimizer.m.items()},
        "v": {k: v.ravel().tolist() for k, v in optimizer.v.items()},
    }
    _write_json(payload, path)


def _load_optimizer(optimizer: nn.Adam, path: str) -> None:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    optimizer.t = int(payload["t"])
    for k in optimizer.m:
        optimizer.m[k] = np.array(payload["m"][k]).reshape(optimizer.m[k].shape)
        optimizer.v[k] = np.array(payload["v"][k]).reshape(optimizer.v[k].shape)


def train(config: ScenarioConfig, out_dir: str, seed: Optional[int] = None,
          total_steps: Optional[int] = None, workers: int = 1, resume: bool = False,
          echo: Optional[Callable[[str], None]] = None) -> dict:
    """Run policy optimization and leave checkpoints plus a per-episode log
    under ``out_dir``.

    Noise injection stays off while training; it is an evaluation condition.
    ``workers`` simulators are stepped round-robin in process, so results
    depend only on the seed and the worker count.
    """
    cfg = config.ppo
    seed = config.seed if seed is None else int(seed)
    total_steps = cfg.max_timesteps if total_steps is None else int(total_steps)
    workers = max(1, int(workers))
    os.makedirs(out_dir, exist_ok=True)

    streams = seed_streams(seed)
    policy = GrlPolicy(config, streams["policy_init"])
    optimizer = nn.Adam(policy.params, learning_rate=cfg.learning_rate)
    rollout_rng = streams["rollout"]
    rrelu_rng = streams["rrelu"]
    chash = config_hash(config)

    log_path = os.path.join(out_dir, "training_log.csv")
    state_path = os.path.join(out_dir, "training_state.json")
    optimizer_path = os.path.join(out_dir, "optimizer_state.json")
    last_path = os.path.join(out_dir, "checkpoint_last.json")
    best_path = os.path.join(out_dir, "checkpoint_best.json")

    global_step = 0
    episode_index = 0
    update_index = 0
    episodes_done = 0
    best_avg: Optional[float] = None
    episode_rewards: list[float] = []
    last_stats: dict = {}

    if resume:
        if not os.path.exists(state_path):
            raise ValueError(f"no training state under {out_dir}; start without resume")
        with open(state_path, "r", encoding="utf-8") as fh:
            snap = json.load(fh)
        if snap["config_hash"] != chash:
            raise ValueError(
                f"training state config hash {snap['config_hash']} does not match "
                f"current {chash}")
        if snap["seed"] != seed:
            raise ValueError(f"training state was seeded with {snap['seed']}, not {seed}")
        global_step = int(snap["global_step"])
        episode_index = int(snap["episode_index"])
        update_index = int(snap["update_index"])
        episodes_done = int(snap["episodes_done"])
        best_avg = snap["best_avg"]
        episode_rewards = [float(r) for r in snap["episode_rewards"]]
        rollout_rng.bit_generator.state = snap["rollout_state"]
        rrelu_rng.bit_generator.state = snap["rrelu_state"]
        store, _ = nn.load_checkpoint(last_path, expected_config_hash=chash,
                                      expected_shapes=policy.param_shapes())
        policy.load_state(store)
        _load_optimizer(optimizer, optimizer_path)

    log_fh = open(log_path, "a" if resume else "w", newline="", encoding="utf-8")
    writer = csv.writer(log_fh)
    if not resume:
        writer.writerow(LOG_COLUMNS)

    envs = [make_env(config, noise=False) for _ in range(workers)]
    observations = []
    env_episode = []
    for env in envs:
        observations.append(env.reset(episode_seed_sequence(seed, episode_index)))
        env_episode.append(episode_index)
        episode_index += 1
    ep_reward = [0.0] * workers
    ep_steps = [0] * workers

    def finish_episode(i: int) -> None:
        nonlocal episode_index, episodes_done
        stats = envs[i].episode_stats()
        episode_rewards.append(ep_reward[i])
        episodes_done += 1
        writer.writerow([
            env_episode[i], ep_steps[i], f"{ep_reward[i]:.6f}",
            _fmt(last_stats.get("policy_loss")), _fmt(last_stats.get("value_loss")),
            _fmt(last_stats.get("entropy")), _fmt(last_stats.get("clip_fraction")),
            f"{stats['mean_battery']:.4f}", stats["good_takeoffs"], stats["good_landings"],
            f"{stats['mean_delay_minutes'] / 60.0:.4f}", stats["collisions"],
        ])
        log_fh.flush()
        observations[i] = envs[i].reset(episode_seed_sequence(seed, episode_index))
        env_episode[i] = episode_index
        episode_index += 1
        ep_reward[i] = 0.0
        ep_steps[i] = 0

    try:
        while global_step < total_steps:
            budget = min(cfg.n_steps, total_steps - global_step)
            segments = [_Segment() for _ in range(workers)]
            collected = 0
            while collected < budget:
                for i, env in enumerate(envs):
                    if collected >= budget:
                        break
                    obs = observations[i]
                    mask = env.current_mask()
                    log_probs, value = policy.forward(obs, mask, training=False)
                    action = sample_action(log_probs.value, rollout_rng)
                    next_obs, reward, _terms, done, _info = env.step(action)
                    seg = segments[i]
                    seg.obs.append(obs)
                    seg.mask.append(mask.copy())
                    seg.action.append(action)
                    seg.log_prob.append(float(log_probs.value[0, action]))
                    seg.value.append(float(value.value[0, 0]))
                    seg.reward.append(float(reward))
                    seg.done.append(done)
                    ep_reward[i] += reward
                    ep_steps[i] += 1
                    collected += 1
                    if done:
                        finish_episode(i)
                    else:
                        observations[i] = next_obs

            flat_obs = []
            flat_mask = []
            flat_action = []
            flat_logp = []
            flat_value = []
            advantage_parts = []
            return_parts = []
            for i, seg in enumerate(segments):
                if not seg.reward:
                    continue
                if seg.done[-1]:
                    last_value = 0.0
                else:
                    _, tail = policy.forward(observations[i], envs[i].current_mask(),
                                             training=False)
                    last_value = float(tail.value[0, 0])
                adv, ret = compute_gae(np.array(seg.reward), np.array(seg.value),
                                       np.array(seg.done, dtype=bool), last_value,
                                       cfg.discount, cfg.gae_lambda)
                flat_obs.extend(seg.obs)
                flat_mask.extend(seg.mask)
                flat_action.extend(seg.action)
                flat_logp.extend(seg.log_prob)
                flat_value.extend(seg.value)
                advantage_parts.append(adv)
                return_parts.append(ret)

            batch = {
                "obs": flat_obs,
                "mask": flat_mask,
                "action": np.array(flat_action, dtype=np.int64),
                "log_prob": np.array(flat_logp),
                "value": np.array(flat_value),
                "advantage": normalize_advantages(np.concatenate(advantage_parts)),
                "return": np.concatenate(return_parts),
            }
            last_stats = ppo_update(policy, optimizer, batch, cfg, rollout_rng, rrelu_rng)
            update_index += 1
            global_step += collected

            nn.save_checkpoint(policy.params, last_path, chash,
                               meta={"global_step": global_step})
            if episode_rewards:
                avg = float(np.mean(episode_rewards[-10:]))
                if best_avg is None or avg > best_avg:
                    best_avg = avg
                    nn.save_checkpoint(policy.params, best_path, chash,
                                       meta={"global_step": global_step,
                                             "avg_reward": avg})
            if update_index % 5 == 0:
                nn.save_checkpoint(
                    policy.params,
                    os.path.join(out_dir, f"checkpoint_step_{global_step}.json"),
                    chash, meta={"global_step": global_step})
            _save_optimizer(optimizer, optimizer_path)
            _write_json({
                "seed": seed,
                "config_hash": chash,
                "global_step": global_step,
                "episode_index": episode_index,
                "update_index": update_index,
                "episodes_done": episodes_done,
                "best_avg": best_avg,
                "episode_rewards": episode_rewards[-50:],
                "rollout_state": rollout_rng.bit_generator.state,
                "rrelu_state": rrelu_rng.bit_generator.state,
            }, state_path)
            if echo is not None:
                echo(f"update {update_index}: {global_step}/{total_steps} steps, "
                     f"{episodes_done} episodes, "
                     f"policy loss {last_stats['policy_loss']:+.4f}, "
                     f"entropy {last_stats['entropy']:.4f}")
    finally:
        log_fh.close()

    return {
        "global_step": global_step,
        "updates": update_index,
        "episodes_done": episodes_done,
        "best_avg": best_avg,
        "episode_rewards": episode_rewards,
        "out_dir": out_dir,
    }


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


# -- closed-form optimization check ----------------------------------------

def run_bandit_training(n_actions: int = 3, favored: int = 1, updates: int = 60,
                        seed: int = 0, learning_rate: float = 0.005,
                        n_steps: int = 256, batch_size: int = 128,
                        epochs: int = 4) -> list:
    """Optimize a free-logit policy on a one-situation problem where only
    ``favored`` pays.  Returns P(favored) after each update.

    This runs the exact buffer, advantage, and update code used for the full
    policy, so a broken optimizer shows up here in seconds.
    """
    root = np.random.SeedSequence(seed)
    init_seq, rollout_seq, perm_seq = root.spawn(3)
    policy = BanditPolicy(n_actions, np.random.default_rng(init_seq))
    optimizer = nn.Adam(policy.params, learning_rate=learning_rate)
    rollout_rng = np.random.default_rng(rollout_seq)
    perm_rng = np.random.default_rng(perm_seq)
    cfg = PpoConfig(max_timesteps=updates * n_steps, learning_rate=learning_rate,
                    n_steps=n_steps, batch_size=batch_size, epochs_per_update=epochs)
    mask = np.ones(n_actions, dtype=bool)

    history = []
    for _ in range(updates):
        log_probs, value = policy.forward(None, mask)
        actions = []
        log_prob_taken = []
        rewards = []
        for _ in range(n_steps):
            a = sample_action(log_probs.value, rollout_rng)
            actions.append(a)
            log_prob_taken.append(float(log_probs.value[0, a]))
            rewards.append(1.0 if a == favored else 0.0)
        rewards = np.array(rewards)
        values = np.full(n_steps, float(value.value[0, 0]))
        advantages, returns = compute_gae(rewards, values,
                                          np.ones(n_steps, dtype=bool), 0.0,
                                          cfg.discount, cfg.gae_lambda)
        batch = {
            "obs": [None] * n_steps,
            "mask": [mask] * n_steps,
            "action": np.array(actions, dtype=np.int64),
            "log_prob": np.array(log_prob_taken),
            "value": values,
            "advantage": normalize_advantages(advantages),
            "return": returns,
        }
        ppo_update(policy, optimizer, batch, cfg, perm_rng, rrelu_rng=None)
        after, _ = policy.forward(None, mask)
        history.append(float(np.exp(after.value[0, favored])))
    return history
