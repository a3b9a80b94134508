"""MDP wrapper around the world: actions, masks, rewards, observations.

One env.step() applies one action for the currently selected aircraft and
advances the world one minute.  If afterwards nobody is eligible to act
(everyone is in transit beyond the airspace), the world keeps ticking
without actions until someone is, still consuming the episode budget.

Rewards score the acting aircraft only.  The five terms:
  takeoff   +5 departing inside the slot window with enough battery, -5 for
            a departure violating either, 0 when no departure happened
  landing   same idea at touchdown; landing early is fine
  battery   5 * level/100 above the reserve threshold, else -5
  delay     -5 + 10 * exp(-delay_minutes)
  safety    0 with no predicted conflict; -5 ignoring one; +5 holding
            against one
The total is the weighted sum; with the default weights it stays in [-7, 7].
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ScenarioConfig, UncertaintySpec, episode_seed_sequence
from . import world as W
from .separation import KinematicTrack, ConflictReport, detect_conflicts, is_collision


class MaskViolationError(RuntimeError):
    """An action forbidden by the current mask was applied."""


@dataclass(frozen=True)
class ActionSpace:
    """Integer action ids, sized by the pad counts.

    0 stay, 1 takeoff, then one landing action per port, one move per hover
    spot, then continue-previous-movement and hold-against-conflict.
    """
    n_ports: int
    n_hover_spots: int

    STAY = 0
    TAKEOFF = 1

    @property
    def n_actions(self) -> int:
        return 4 + self.n_ports + self.n_hover_spots

    @property
    def first_port_action(self) -> int:
        return 2

    @property
    def first_hover_action(self) -> int:
        return 2 + self.n_ports

    @property
    def continue_id(self) -> int:
        return 2 + self.n_ports + self.n_hover_spots

    @property
    def avoid_id(self) -> int:
        return self.continue_id + 1

    def port_index(self, action: int) -> Optional[int]:
        if self.first_port_action <= action < self.first_hover_action:
            return action - self.first_port_action
        return None

    def hover_index(self, action: int) -> Optional[int]:
        if self.first_hover_action <= action < self.continue_id:
            return action - self.first_hover_action
        return None

    def name(self, action: int) -> str:
        if action == self.STAY:
            return "stay"
        if action == self.TAKEOFF:
            return "takeoff"
        p = self.port_index(action)
        if p is not None:
            return f"land_port_{p}"
        h = self.hover_index(action)
        if h is not None:
            return f"hover_spot_{h}"
        if action == self.continue_id:
            return "continue"
        if action == self.avoid_id:
            return "avoid"
        raise ValueError(f"action id out of range: {action}")


@dataclass(frozen=True)
class RewardTerms:
    takeoff: float
    landing: float
    battery: float
    delay: float
    safety: float
    total: float

    def as_dict(self) -> dict:
        return {
            "takeoff": self.takeoff,
            "landing": self.landing,
            "battery": self.battery,
            "delay": self.delay,
            "safety": self.safety,
        }


@dataclass
class Observation:
    """Graph snapshot handed to policies. Arrays are frozen copies."""
    evtol_nodes: np.ndarray      # n_evtols x 12
    port_nodes: np.ndarray       # (n_ports + n_hover_spots) x 6
    evtol_adjacency: np.ndarray  # degree-normalized, self-loop augmented
    port_adjacency: np.ndarray
    selected: int


def battery_coefficient(battery: float, threshold: float) -> float:
    if battery >= threshold:
        return 5.0 * battery / 100.0
    return -5.0


def delay_coefficient(delay_minutes: float) -> float:
    return -5.0 + 10.0 * math.exp(-delay_minutes)


def safety_coefficient(has_conflict: bool, held_against_it: bool) -> float:
    if not has_conflict:
        return 0.0
    return 5.0 if held_against_it else -5.0


def punctuality_coefficient(event_happened: bool, on_time: bool, battery_ok: bool) -> float:
    if not event_happened:
        return 0.0
    return 5.0 if (on_time and battery_ok) else -5.0


def compute_mask(state: W.WorldState, ev: W.Evtol, space: ActionSpace) -> np.ndarray:
    """Feasible actions for this aircraft in this state. At least one is always set."""
    mask = np.zeros(space.n_actions, dtype=bool)
    mask[space.STAY] = True

    grounded = ev.status in W.GROUNDED_STATUSES
    airborne = ev.airborne
    inside = state.inside_airspace(ev.position)

    if grounded and ev.plan.kind == W.PlanKind.TAKEOFF:
        mask[space.TAKEOFF] = True
    if airborne and inside:
        for port in state.ports:
            if port.occupied_by is None:
                mask[space.first_port_action + port.id] = True
    if airborne:
        for spot in state.hover_spots:
            if spot.occupied_by is None:
                mask[space.first_hover_action + spot.id] = True
        mask[space.avoid_id] = True
    if ev.target is not None:
        mask[space.continue_id] = True
    return mask


@dataclass
class ActionEffect:
    took_off: bool = False
    takeoff_failed: bool = False
    takeoff_event: Optional[W.TakeoffEvent] = None
    held: bool = False


def apply_action(state: W.WorldState, ev: W.Evtol, action: int, space: ActionSpace,
                 mask: np.ndarray, uncertainty: UncertaintySpec,
                 rng: np.random.Generator) -> ActionEffect:
    """Decode and apply one action. The mask is enforced, not assumed."""
    if action < 0 or action >= space.n_actions:
        raise MaskViolationError(f"action {action} out of range 0..{space.n_actions - 1}")
    if not mask[action]:
        raise MaskViolationError(
            f"action {space.name(action)} is masked for evtol {ev.id} in status {ev.status.name}")

    effect = ActionEffect()
    if action == space.STAY:
        if ev.status in W.EN_ROUTE_STATUSES:
            ev.hold_step = True
            effect.held = True
        return effect

    if action == space.TAKEOFF:
        if uncertainty.enabled and rng.random() < uncertainty.p_takeoff_fail:
            effect.takeoff_failed = True
            return effect
        now = state.clock.now
        effect.took_off = True
        effect.takeoff_event = W.TakeoffEvent(
            evtol_id=ev.id, minute=now,
            scheduled_minute=ev.plan.scheduled_minute, battery=ev.battery)
        W.release_claims(state, ev)
        dest = state.destinations[ev.plan.destination_id]
        ev.status = W.EvtolStatus.EN_ROUTE_OUTBOUND
        ev.target = dest.copy()
        ev.target_kind = W.TARGET_DESTINATION
        ev.target_id = ev.plan.destination_id
        return effect

    port_idx = space.port_index(action)
    if port_idx is not None:
        port = state.ports[port_idx]
        W.release_claims(state, ev)
        port.occupied_by = ev.id
        ev.status = W.EvtolStatus.EN_ROUTE_INTERNAL
        ev.target = port.position.copy()
        ev.target_kind = W.TARGET_PORT
        ev.target_id = port.id
        return effect

    hover_idx = space.hover_index(action)
    if hover_idx is not None:
        spot = state.hover_spots[hover_idx]
        W.release_claims(state, ev)
        spot.occupied_by = ev.id
        ev.status = W.EvtolStatus.EN_ROUTE_INTERNAL
        ev.target = spot.position.copy()
        ev.target_kind = W.TARGET_HOVER
        ev.target_id = spot.id
        return effect

    if action == space.continue_id:
        return effect

    # Hold against a conflict: zero velocity for this step, the leg resumes next step.
    ev.hold_step = True
    effect.held = True
    return effect


def inject_uncertainty(state: W.WorldState, uncertainty: UncertaintySpec,
                       rng: np.random.Generator) -> None:
    """Roll this step's wind and charger failures. No draws when disabled."""
    state.wind_factors = {}
    state.port_failures = set()
    if not uncertainty.enabled:
        return
    for ev in state.evtols:
        if ev.status in W.EN_ROUTE_STATUSES:
            if rng.random() < uncertainty.p_wind:
                if rng.random() < 0.5:
                    state.wind_factors[ev.id] = 0.0
                else:
                    state.wind_factors[ev.id] = float(rng.uniform(0.25, 0.75))
    for ev in state.evtols:
        if ev.status == W.EvtolStatus.CHARGING:
            if rng.random() < uncertainty.p_port_fail:
                state.port_failures.add(ev.id)


def conflict_snapshot(state: W.WorldState, ev: W.Evtol,
                      threshold: float) -> list:
    """Conflicts the acting aircraft faces right now, from nominal leg tracks."""
    if ev.status not in W.EN_ROUTE_STATUSES:
        return []
    vel = W.nominal_velocity(state, ev)
    subject = KinematicTrack(x=float(ev.position[0]), y=float(ev.position[1]),
                             vx=float(vel[0]), vy=float(vel[1]))
    others = []
    for other in state.evtols:
        if other.id == ev.id or other.status not in W.EN_ROUTE_STATUSES:
            continue
        ovel = W.nominal_velocity(state, other)
        others.append((other.id, KinematicTrack(
            x=float(other.position[0]), y=float(other.position[1]),
            vx=float(ovel[0]), vy=float(ovel[1]))))
    return detect_conflicts(ev.id, subject, others, threshold)


def compute_reward(weights: tuple, ev: W.Evtol, action: int, space: ActionSpace,
                   effect: ActionEffect, landing_credit: Optional[bool],
                   conflicts: list, battery_threshold: float) -> RewardTerms:
    """Score one acting step from its events and the conflict snapshot."""
    took_off = effect.takeoff_event is not None
    on_time = battery_ok = False
    if took_off:
        evn = effect.takeoff_event
        on_time = abs(evn.minute - evn.scheduled_minute) <= W.ON_TIME_SLACK
        battery_ok = evn.battery > battery_threshold
    takeoff_term = punctuality_coefficient(took_off, on_time, battery_ok)

    landing_term = 0.0
    if landing_credit is not None:
        landing_term = 5.0 if landing_credit else -5.0

    battery_term = battery_coefficient(ev.battery, battery_threshold)
    delay_term = delay_coefficient(ev.delay_minutes)
    safety_term = safety_coefficient(bool(conflicts), action == space.avoid_id)

    total = (weights[0] * takeoff_term + weights[1] * landing_term
             + weights[2] * battery_term + weights[3] * delay_term
             + weights[4] * safety_term)
    return RewardTerms(takeoff=takeoff_term, landing=landing_term,
                       battery=battery_term, delay=delay_term,
                       safety=safety_term, total=total)


def _normalize_adjacency_dense(a: np.ndarray) -> np.ndarray:
    # Local copy of the symmetric degree normalization so observations do not
    # depend on the learning stack. a carries no self-loops here.
    a_hat = a + np.eye(a.shape[0])
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_adjacency(n: int, connectivity: str) -> np.ndarray:
    if connectivity == "self":
        base = np.zeros((n, n))
    else:
        base = np.ones((n, n)) - np.eye(n)
    out = _normalize_adjacency_dense(base)
    out.setflags(write=False)
    return out


EVTOL_FEATURES = 12  # battery, 7 status slots, delay, x, y, schedule offset
PORT_FEATURES = 6    # availability, 3 kind slots, x, y
_N_STATUSES = len(W.EvtolStatus)


class VertiportEnv:
    """Single-agent MDP over the vertiport world."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.space = ActionSpace(n_ports=config.n_ports, n_hover_spots=config.n_hover_spots)
        self.state: Optional[W.WorldState] = None
        self.acting_index = 0
        self._done = True
        self._evtol_adjacency = build_adjacency(config.n_evtols, config.network.connectivity)
        self._port_adjacency = build_adjacency(
            config.n_ports + config.n_hover_spots, config.network.connectivity)
        self.counters: dict = {}
        self._battery_accum = 0.0
        self._delay_accum = 0.0

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed) -> Observation:
        if isinstance(seed, np.random.SeedSequence):
            rng = np.random.default_rng(seed)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
        self.state = W.init_world(self.config, rng)
        self._done = False
        self.counters = {
            "collisions": 0, "near_misses": 0, "good_takeoffs": 0,
            "good_landings": 0, "bad_takeoffs": 0, "bad_landings": 0,
            "decisions": 0, "fast_forward_steps": 0,
        }
        self._battery_accum = 0.0
        self._delay_accum = 0.0
        self.acting_index = self._select_from(0)
        if self.acting_index < 0:
            # Nobody eligible at step 0: tick until someone is.
            self._fast_forward()
        return self.observe()

    @property
    def done(self) -> bool:
        return self._done

    def current_mask(self) -> np.ndarray:
        self._require_active()
        return compute_mask(self.state, self.state.evtols[self.acting_index], self.space)

    def _require_active(self) -> None:
        if self.state is None:
            raise RuntimeError("reset() must be called before using the environment")
        if self._done:
            raise RuntimeError("episode is done; call reset() before stepping again")

    # -- stepping ----------------------------------------------------------

    def step(self, action: int):
        """Apply one action. Returns (obs, reward, terms, done, info)."""
        self._require_active()
        state = self.state
        ev = state.evtols[self.acting_index]
        mask = compute_mask(state, ev, self.space)

        conflicts = conflict_snapshot(state, ev, self.config.separation_threshold)
        effect = apply_action(state, ev, action, self.space, mask,
                              self.config.uncertainty, state.rng)

        collisions_before = self.counters["collisions"]
        self._world_step()

        landing_credit = None
        if ev.pending_landings:
            landing_credit = bool(ev.pending_landings.pop(0))

        terms = compute_reward(self.config.reward_weights, ev, action, self.space,
                               effect, landing_credit, conflicts,
                               self.config.battery_threshold)

        self.counters["decisions"] += 1
        self.counters["near_misses"] += len(conflicts)
        if terms.takeoff > 0:
            self.counters["good_takeoffs"] += 1
        elif terms.takeoff < 0:
            self.counters["bad_takeoffs"] += 1
        if terms.landing > 0:
            self.counters["good_landings"] += 1
        elif terms.landing < 0:
            self.counters["bad_landings"] += 1

        fast_forwarded = 0
        if state.clock.exhausted:
            self._done = True
        else:
            nxt = self._select_from(self.acting_index + 1)
            if nxt >= 0:
                self.acting_index = nxt
            else:
                fast_forwarded = self._fast_forward()

        info = {
            "clock_step": state.clock.step,
            "evtol": ev.id,
            "action": int(action),
            "action_name": self.space.name(int(action)),
            "good_takeoff": terms.takeoff > 0,
            "good_landing": terms.landing > 0,
            "takeoff_failed": effect.takeoff_failed,
            "collisions": self.counters["collisions"] - collisions_before,
            "conflict_dmin": min((c.d_min for c in conflicts), default=None),
            "n_conflicts": len(conflicts),
            "fast_forward_steps": fast_forwarded,
            "battery": [e.battery for e in state.evtols],
            "delays": [e.delay_minutes for e in state.evtols],
        }
        return self.observe(), terms.total, terms, self._done, info

    def _world_step(self) -> None:
        """One minute of world time: weather, motion, batteries, schedules, scoring."""
        state = self.state
        inject_uncertainty(state, self.config.uncertainty, state.rng)
        landings, _ = W.advance_kinematics(state)
        W.update_batteries(state)
        state.clock.step += 1
        W.update_delays(state, state.clock.now)

        for event in landings:
            landed = state.evtols[event.evtol_id]
            event.battery = landed.battery
            on_time = event.deadline is None or event.minute <= event.deadline + W.ON_TIME_SLACK
            good = on_time and event.battery > self.config.battery_threshold
            landed.pending_landings.append(good)

        n = len(state.evtols)
        for i in range(n):
            a = state.evtols[i]
            if not a.airborne:
                continue
            for j in range(i + 1, n):
                b = state.evtols[j]
                if not b.airborne:
                    continue
                if is_collision(a.position, b.position, self.config.collision_threshold):
                    self.counters["collisions"] += 1

        self._battery_accum += sum(e.battery for e in state.evtols) / n
        self._delay_accum += sum(e.delay_minutes for e in state.evtols) / n

    def _eligible(self, ev: W.Evtol) -> bool:
        if ev.status in (W.EvtolStatus.IDLE_GROUND, W.EvtolStatus.CHARGING,
                         W.EvtolStatus.HOVERING, W.EvtolStatus.EN_ROUTE_INTERNAL):
            return True
        if ev.status == W.EvtolStatus.AT_DESTINATION:
            return False
        return self.state.inside_airspace(ev.position)

    def _select_from(self, start: int) -> int:
        """Round-robin scan for the next controllable aircraft; -1 if none."""
        n = len(self.state.evtols)
        for offset in range(n):
            idx = (start + offset) % n
            if self._eligible(self.state.evtols[idx]):
                return idx
        return -1

    def _fast_forward(self) -> int:
        """Tick the world until someone is eligible or the episode ends."""
        ticks = 0
        while not self.state.clock.exhausted:
            nxt = self._select_from(self.acting_index + 1)
            if nxt >= 0:
                self.acting_index = nxt
                break
            self._world_step()
            ticks += 1
        if self.state.clock.exhausted:
            self._done = True
        self.counters["fast_forward_steps"] += ticks
        return ticks

    # -- observations ------------------------------------------------------

    def observe(self) -> Observation:
        state = self.state
        cfg = self.config
        extent = cfg.world_extent
        now = state.clock.now

        nodes = np.zeros((len(state.evtols), EVTOL_FEATURES))
        for i, ev in enumerate(state.evtols):
            nodes[i, 0] = ev.battery / 100.0
            nodes[i, 1 + int(ev.status)] = 1.0
            nodes[i, 8] = min(1.0, ev.delay_minutes / 60.0)
            nodes[i, 9] = float(np.clip(ev.position[0] / extent, -1.0, 1.0))
            nodes[i, 10] = float(np.clip(ev.position[1] / extent, -1.0, 1.0))
            sched = ev.plan.scheduled_minute
            offset = 0.0 if sched is None else (sched - now) / 60.0
            nodes[i, 11] = float(np.clip(offset, -1.0, 1.0))

        pads = np.zeros((cfg.n_ports + cfg.n_hover_spots, PORT_FEATURES))
        for port in state.ports:
            row = port.id
            pads[row, 0] = 1.0 if port.occupied_by is None else 0.0
            pads[row, 1 + int(port.kind)] = 1.0  # 1 normal, 2 charging
            pads[row, 4] = float(np.clip(port.position[0] / extent, -1.0, 1.0))
            pads[row, 5] = float(np.clip(port.position[1] / extent, -1.0, 1.0))
        for spot in state.hover_spots:
            row = cfg.n_ports + spot.id
            pads[row, 0] = 1.0 if spot.occupied_by is None else 0.0
            pads[row, 3] = 1.0
            pads[row, 4] = float(np.clip(spot.position[0] / extent, -1.0, 1.0))
            pads[row, 5] = float(np.clip(spot.position[1] / extent, -1.0, 1.0))

        nodes.setflags(write=False)
        pads.setflags(write=False)
        return Observation(
            evtol_nodes=nodes,
            port_nodes=pads,
            evtol_adjacency=self._evtol_adjacency,
            port_adjacency=self._port_adjacency,
            selected=self.acting_index,
        )

    # -- episode aggregates ------------------------------------------------

    def episode_stats(self) -> dict:
        """Aggregates the harness folds into per-episode metrics."""
        steps = max(1, self.state.clock.step)
        return {
            "mean_battery": self._battery_accum / steps,
            "mean_delay_minutes": self._delay_accum / steps,
            "collisions": self.counters["collisions"],
            "near_misses": self.counters["near_misses"],
            "good_takeoffs": self.counters["good_takeoffs"],
            "good_landings": self.counters["good_landings"],
            "battery_depletions": self.state.battery_depletions,
            "congestion_events": self.state.congestion_events,
            "decisions": self.counters["decisions"],
            "fast_forward_steps": self.counters["fast_forward_steps"],
        }


def make_env(config: ScenarioConfig, noise: Optional[bool] = None) -> VertiportEnv:
    if noise is not None:
        config = config.with_noise(noise)
    return VertiportEnv(config)
