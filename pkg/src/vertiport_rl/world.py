"""Discrete-time vertiport world: pads, aircraft, schedules, batteries.

One step is one simulated minute.  All aircraft move every step (motion is
asynchronous with respect to who is being commanded); the environment layer
decides which aircraft receives an action.  All randomness comes through the
generator handed to each function, so a (config, seed) pair fully determines
the trajectory.

Battery model, per step:
  cruising      -0.5 per meter actually flown
  hovering      -2   (any airborne aircraft that did not move)
  ground idle   -4
  charging pad  +10  (overrides the idle drain while the charger works)
Levels clamp to [0, 100]; hitting 0 airborne is counted, not terminal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np

from .config import ScenarioConfig

CRUISE_DRAIN_PER_METER = 0.5
HOVER_DRAIN = 2.0
IDLE_DRAIN = 4.0
CHARGE_GAIN = 10.0

# Takeoff slots are drawn 10..20 minutes after the plan is issued; both the
# takeoff slot and the landing deadline carry a 5 minute grace window.
PLAN_DELAY_MIN = 10
PLAN_DELAY_MAX = 20
ON_TIME_SLACK = 5.0
LANDING_ALLOWANCE = 15.0


class PortKind(IntEnum):
    NORMAL = 0
    CHARGING = 1


class PlanKind(IntEnum):
    TAKEOFF = 0
    LANDING = 1


class EvtolStatus(IntEnum):
    IDLE_GROUND = 0
    CHARGING = 1
    HOVERING = 2
    EN_ROUTE_INTERNAL = 3
    EN_ROUTE_OUTBOUND = 4
    AT_DESTINATION = 5
    EN_ROUTE_INBOUND = 6


AIRBORNE_STATUSES = frozenset({
    EvtolStatus.HOVERING,
    EvtolStatus.EN_ROUTE_INTERNAL,
    EvtolStatus.EN_ROUTE_OUTBOUND,
    EvtolStatus.EN_ROUTE_INBOUND,
})
EN_ROUTE_STATUSES = frozenset({
    EvtolStatus.EN_ROUTE_INTERNAL,
    EvtolStatus.EN_ROUTE_OUTBOUND,
    EvtolStatus.EN_ROUTE_INBOUND,
})
GROUNDED_STATUSES = frozenset({EvtolStatus.IDLE_GROUND, EvtolStatus.CHARGING})

# Target tags: what the current leg is flying toward.
TARGET_PORT = "port"
TARGET_HOVER = "hover"
TARGET_DESTINATION = "destination"
TARGET_RETURN = "return"  # inbound toward the vertiport, pad not yet assigned


@dataclass
class FlightPlan:
    kind: PlanKind
    scheduled_minute: Optional[float]  # takeoff slot; landing deadline once airspace is entered
    destination_id: Optional[int]
    issued_minute: float


@dataclass
class Port:
    id: int
    kind: PortKind
    position: np.ndarray
    occupied_by: Optional[int] = None  # occupant or inbound reservation


@dataclass
class HoverSpot:
    id: int
    position: np.ndarray
    occupied_by: Optional[int] = None


@dataclass
class Evtol:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    battery: float
    status: EvtolStatus
    plan: FlightPlan
    delay_minutes: float = 0.0
    target: Optional[np.ndarray] = None
    target_kind: Optional[str] = None
    target_id: Optional[int] = None
    hold_step: bool = False          # zero velocity for the current step only
    moved_distance: float = 0.0      # meters flown during the last world step
    pending_landings: list = field(default_factory=list)  # completed, not yet credited

    @property
    def airborne(self) -> bool:
        return self.status in AIRBORNE_STATUSES


@dataclass
class SimClock:
    step: int = 0
    minutes_per_step: float = 1.0
    episode_steps: int = 1440

    @property
    def now(self) -> float:
        return self.step * self.minutes_per_step

    @property
    def exhausted(self) -> bool:
        return self.step >= self.episode_steps


@dataclass
class TakeoffEvent:
    evtol_id: int
    minute: float
    scheduled_minute: float
    battery: float


@dataclass
class LandingEvent:
    evtol_id: int
    minute: float
    deadline: Optional[float]
    port_id: int
    battery: float = 0.0  # filled in after the step's battery update


@dataclass
class WorldState:
    config: ScenarioConfig
    clock: SimClock
    evtols: list
    ports: list
    hover_spots: list
    destinations: list
    rng: np.random.Generator
    battery_depletions: int = 0
    congestion_events: int = 0
    wind_factors: dict = field(default_factory=dict)  # evtol id -> speed factor, this step only
    port_failures: set = field(default_factory=set)   # evtol ids whose charger failed this step

    @property
    def airspace_radius(self) -> float:
        return self.config.airspace_entry_radius

    def inside_airspace(self, position: np.ndarray) -> bool:
        return float(np.hypot(position[0], position[1])) <= self.airspace_radius


def generate_takeoff_plan(now_minute: float, n_destinations: int, rng: np.random.Generator) -> FlightPlan:
    """Fresh outbound plan: slot 10..20 minutes out, uniform destination."""
    offset = int(rng.integers(PLAN_DELAY_MIN, PLAN_DELAY_MAX + 1))
    dest = int(rng.integers(0, n_destinations))
    return FlightPlan(
        kind=PlanKind.TAKEOFF,
        scheduled_minute=now_minute + offset,
        destination_id=dest,
        issued_minute=now_minute,
    )


def init_world(config: ScenarioConfig, rng: np.random.Generator) -> WorldState:
    """Fresh world at step 0.

    Every aircraft starts full, already climbing out toward a drawn
    destination (launch points are spread over the hover ring so nobody
    starts co-located).  Pads are all free.
    """
    clock = SimClock(step=0, minutes_per_step=config.minutes_per_step,
                     episode_steps=config.episode_steps)
    ports = [
        Port(id=i, kind=PortKind.CHARGING if p.kind == "charging" else PortKind.NORMAL,
             position=np.array([p.x, p.y], dtype=float))
        for i, p in enumerate(config.ports)
    ]
    spots = [HoverSpot(id=i, position=np.array(xy, dtype=float))
             for i, xy in enumerate(config.hover_spots)]
    destinations = [np.array(xy, dtype=float) for xy in config.destinations]

    evtols = []
    for i in range(config.n_evtols):
        plan = generate_takeoff_plan(0.0, len(destinations), rng)
        launch = spots[i % len(spots)].position.copy()
        target = destinations[plan.destination_id]
        direction = _unit(target - launch)
        evtols.append(Evtol(
            id=i,
            position=launch,
            velocity=direction * config.cruise_speed,
            battery=100.0,
            status=EvtolStatus.EN_ROUTE_OUTBOUND,
            plan=plan,
            target=target.copy(),
            target_kind=TARGET_DESTINATION,
            target_id=plan.destination_id,
        ))

    return WorldState(config=config, clock=clock, evtols=evtols, ports=ports,
                      hover_spots=spots, destinations=destinations, rng=rng)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.hypot(vec[0], vec[1]))
    if norm == 0.0:
        return np.zeros(2)
    return vec / norm


def release_claims(state: WorldState, ev: Evtol) -> None:
    """Drop any pad currently held or reserved by this aircraft."""
    for port in state.ports:
        if port.occupied_by == ev.id:
            port.occupied_by = None
    for spot in state.hover_spots:
        if spot.occupied_by == ev.id:
            spot.occupied_by = None


def free_hover_spot(state: WorldState, near: np.ndarray) -> Optional[HoverSpot]:
    """Closest unclaimed hover spot, ties broken by id."""
    best = None
    best_d = None
    for spot in state.hover_spots:
        if spot.occupied_by is not None:
            continue
        d = float(np.hypot(*(spot.position - near)))
        if best is None or d < best_d - 1e-12 or (abs(d - best_d) <= 1e-12 and spot.id < best.id):
            best, best_d = spot, d
    return best


def _touchdown(state: WorldState, ev: Evtol, port: Port, minute: float) -> LandingEvent:
    deadline = ev.plan.scheduled_minute if ev.plan.kind == PlanKind.LANDING else None
    release_claims(state, ev)
    port.occupied_by = ev.id
    ev.position = port.position.copy()
    ev.velocity = np.zeros(2)
    ev.status = EvtolStatus.CHARGING if port.kind == PortKind.CHARGING else EvtolStatus.IDLE_GROUND
    ev.target = None
    ev.target_kind = None
    ev.target_id = None
    # A new outbound plan is issued the moment the aircraft is on the ground.
    ev.plan = generate_takeoff_plan(minute, len(state.destinations), state.rng)
    return LandingEvent(evtol_id=ev.id, minute=minute, deadline=deadline, port_id=port.id)


def advance_kinematics(state: WorldState) -> tuple[list, list]:
    """Move every aircraft one step along its leg.

    Returns (landing_events, arrival notes are folded into status changes).
    The step being advanced ends at minute clock.now + minutes_per_step; all
    events are stamped with that end minute.
    """
    cfg = state.config
    end_minute = state.clock.now + cfg.minutes_per_step
    landings = []

    for ev in state.evtols:
        ev.moved_distance = 0.0

        if ev.status == EvtolStatus.AT_DESTINATION:
            # Immediate turnaround: head home, pad assignment happens at entry.
            ev.status = EvtolStatus.EN_ROUTE_INBOUND
            ev.target = np.zeros(2)
            ev.target_kind = TARGET_RETURN
            ev.target_id = None

        if ev.status == EvtolStatus.EN_ROUTE_INBOUND and ev.target is None:
            # Held at the airspace boundary waiting for a pad; retry each step.
            spot = free_hover_spot(state, ev.position)
            if spot is not None:
                spot.occupied_by = ev.id
                ev.target = spot.position.copy()
                ev.target_kind = TARGET_HOVER
                ev.target_id = spot.id

        if ev.hold_step:
            ev.hold_step = False
            ev.velocity = np.zeros(2)
            continue
        if ev.status not in EN_ROUTE_STATUSES or ev.target is None:
            ev.velocity = np.zeros(2)
            continue

        factor = state.wind_factors.get(ev.id, 1.0)
        step_reach = cfg.cruise_speed * factor * cfg.minutes_per_step
        offset = ev.target - ev.position
        remaining = float(np.hypot(offset[0], offset[1]))

        if step_reach <= 0.0:
            ev.velocity = np.zeros(2)
            continue

        if remaining <= step_reach:
            ev.position = ev.target.copy()
            ev.moved_distance = remaining
            ev.velocity = np.zeros(2)
            landings.extend(_arrive(state, ev, end_minute))
        else:
            direction = offset / remaining
            ev.position = ev.position + direction * step_reach
            ev.moved_distance = step_reach
            ev.velocity = direction * cfg.cruise_speed * factor
            if ev.target_kind == TARGET_RETURN and state.inside_airspace(ev.position):
                _enter_airspace(state, ev, end_minute)

    return landings, []


def _arrive(state: WorldState, ev: Evtol, minute: float) -> list:
    """Aircraft reached its leg target; apply the status transition."""
    if ev.target_kind == TARGET_PORT:
        port = state.ports[ev.target_id]
        return [_touchdown(state, ev, port, minute)]
    if ev.target_kind == TARGET_HOVER:
        ev.status = EvtolStatus.HOVERING
        ev.target = None
        ev.target_kind = None
        ev.target_id = None
        return []
    if ev.target_kind == TARGET_DESTINATION:
        ev.status = EvtolStatus.AT_DESTINATION
        ev.target = None
        ev.target_kind = None
        # The return deadline starts counting at airspace entry, so the plan
        # carries no schedule yet.
        ev.plan = FlightPlan(kind=PlanKind.LANDING, scheduled_minute=None,
                             destination_id=ev.plan.destination_id, issued_minute=minute)
        ev.target_id = None
        return []
    # TARGET_RETURN: reached the return point in one hop (tiny layouts where
    # the entry radius is under one step of travel). Run the entry logic here.
    _enter_airspace(state, ev, minute)
    return []


def _enter_airspace(state: WorldState, ev: Evtol, minute: float) -> None:
    """Inbound aircraft crossed the entry radius: fix the deadline, claim a pad."""
    ev.plan.scheduled_minute = minute + LANDING_ALLOWANCE
    spot = free_hover_spot(state, ev.position)
    if spot is None:
        # No pad free: hold here. Counted once per blocked entry.
        ev.target = None
        ev.target_kind = None
        ev.target_id = None
        ev.velocity = np.zeros(2)
        state.congestion_events += 1
        return
    spot.occupied_by = ev.id
    ev.target = spot.position.copy()
    ev.target_kind = TARGET_HOVER
    ev.target_id = spot.id


def update_battery(ev: Evtol, distance_this_step: float, on_charging_port: bool) -> float:
    """New battery percentage after one step of the current activity."""
    if on_charging_port:
        delta = CHARGE_GAIN
    elif distance_this_step > 0.0:
        delta = -CRUISE_DRAIN_PER_METER * distance_this_step
    elif ev.status in AIRBORNE_STATUSES:
        delta = -HOVER_DRAIN
    else:
        delta = -IDLE_DRAIN
    return float(min(100.0, max(0.0, ev.battery + delta)))


def update_batteries(state: WorldState) -> None:
    for ev in state.evtols:
        charging = ev.status == EvtolStatus.CHARGING and ev.id not in state.port_failures
        before = ev.battery
        ev.battery = update_battery(ev, ev.moved_distance, charging)
        if before > 0.0 and ev.battery == 0.0 and ev.airborne:
            state.battery_depletions += 1


def accrue_delay(ev: Evtol, now_minute: float) -> float:
    """Minutes past the end of the active schedule window.

    Takeoff plans accrue while the aircraft is still on the ground; the
    moment it departs the slot is moot.  Landing deadlines accrue only once
    set (airspace entry) and clear at touchdown, when a fresh plan arrives.
    """
    plan = ev.plan
    if plan.kind == PlanKind.TAKEOFF:
        if ev.status in GROUNDED_STATUSES and plan.scheduled_minute is not None:
            return max(0.0, now_minute - (plan.scheduled_minute + ON_TIME_SLACK))
        return 0.0
    if plan.scheduled_minute is None:
        return 0.0
    return max(0.0, now_minute - (plan.scheduled_minute + ON_TIME_SLACK))


def update_delays(state: WorldState, now_minute: float) -> None:
    for ev in state.evtols:
        ev.delay_minutes = accrue_delay(ev, now_minute)


def nominal_velocity(state: WorldState, ev: Evtol) -> np.ndarray:
    """Velocity the aircraft flies its current leg with, ignoring holds and wind."""
    if ev.status in EN_ROUTE_STATUSES and ev.target is not None:
        return _unit(ev.target - ev.position) * state.config.cruise_speed
    return np.zeros(2)
