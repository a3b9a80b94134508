"""Environment contract: masks, rewards, uncertainty, and step invariants."""
from __future__ import annotations

import math

import numpy as np
import pytest

import vertiport_rl.world as W
from vertiport_rl.config import UncertaintySpec, config_from_dict, default_config_dict
from vertiport_rl.env import (ActionSpace, MaskViolationError, VertiportEnv,
                              apply_action, battery_coefficient, compute_mask,
                              compute_reward, conflict_snapshot, delay_coefficient,
                              inject_uncertainty, make_env, punctuality_coefficient,
                              safety_coefficient)


@pytest.fixture()
def config():
    return config_from_dict(default_config_dict())


@pytest.fixture()
def space(config):
    return ActionSpace(config.n_ports, config.n_hover_spots)


# -- action space -----------------------------------------------------------

def test_action_ids_and_names(space):
    assert space.n_actions == 14
    assert space.STAY == 0 and space.TAKEOFF == 1
    assert space.first_port_action == 2
    assert space.first_hover_action == 5
    assert space.continue_id == 12
    assert space.avoid_id == 13
    assert space.name(0) == "stay"
    assert space.name(1) == "takeoff"
    assert space.name(2) == "land_port_0"
    assert space.name(4) == "land_port_2"
    assert space.name(5) == "hover_spot_0"
    assert space.name(11) == "hover_spot_6"
    assert space.name(12) == "continue"
    assert space.name(13) == "avoid"
    with pytest.raises(ValueError):
        space.name(14)


# -- reward coefficients ----------------------------------------------------

def test_battery_coefficient_piecewise():
    assert battery_coefficient(100.0, 30.0) == 5.0
    assert battery_coefficient(50.0, 30.0) == 2.5
    assert battery_coefficient(80.0, 30.0) == 4.0
    assert battery_coefficient(30.0, 30.0) == pytest.approx(1.5)  # threshold included
    assert battery_coefficient(29.0, 30.0) == -5.0
    assert battery_coefficient(0.0, 30.0) == -5.0


def test_delay_coefficient_decay():
    assert delay_coefficient(0.0) == 5.0
    assert delay_coefficient(math.log(10.0)) == pytest.approx(-4.0, abs=1e-9)
    assert delay_coefficient(1.0) == pytest.approx(-5.0 + 10.0 / math.e, abs=1e-12)
    assert delay_coefficient(1e9) == pytest.approx(-5.0)


def test_safety_and_punctuality_coefficients():
    assert safety_coefficient(False, False) == 0.0
    assert safety_coefficient(False, True) == 0.0
    assert safety_coefficient(True, False) == -5.0
    assert safety_coefficient(True, True) == 5.0
    assert punctuality_coefficient(False, True, True) == 0.0
    assert punctuality_coefficient(True, True, True) == 5.0
    assert punctuality_coefficient(True, False, True) == -5.0
    assert punctuality_coefficient(True, True, False) == -5.0


def test_weighted_total_worked_example(config, space):
    # Departing on time at 80% battery with no delay and no conflict:
    # 0.3*5 + 0.35*4 + 0.1*5 = 3.4.
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.battery = 80.0
    ev.delay_minutes = 0.0
    from vertiport_rl.env import ActionEffect
    effect = ActionEffect(took_off=True, takeoff_event=W.TakeoffEvent(
        evtol_id=0, minute=12.0, scheduled_minute=14.0, battery=80.0))
    terms = compute_reward(config.reward_weights, ev, space.TAKEOFF, space, effect,
                           landing_credit=None, conflicts=[],
                           battery_threshold=config.battery_threshold)
    assert terms.takeoff == 5.0
    assert terms.battery == 4.0
    assert terms.delay == 5.0
    assert terms.landing == 0.0 and terms.safety == 0.0
    assert terms.total == pytest.approx(3.4, abs=1e-12)


def test_landing_credit_and_failed_takeoff(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.battery = 50.0
    ev.delay_minutes = 0.0
    from vertiport_rl.env import ActionEffect

    terms = compute_reward(config.reward_weights, ev, space.STAY, space,
                           ActionEffect(), landing_credit=True, conflicts=[],
                           battery_threshold=config.battery_threshold)
    assert terms.landing == 5.0
    terms = compute_reward(config.reward_weights, ev, space.STAY, space,
                           ActionEffect(), landing_credit=False, conflicts=[],
                           battery_threshold=config.battery_threshold)
    assert terms.landing == -5.0

    # A failed departure produced no takeoff event, so the term stays 0.
    failed = ActionEffect(takeoff_failed=True)
    terms = compute_reward(config.reward_weights, ev, space.TAKEOFF, space, failed,
                           landing_credit=None, conflicts=[],
                           battery_threshold=config.battery_threshold)
    assert terms.takeoff == 0.0


def test_total_reward_stays_bounded(config, space):
    rng = np.random.default_rng(5)
    state = W.init_world(config, rng)
    ev = state.evtols[0]
    from vertiport_rl.env import ActionEffect
    from vertiport_rl.separation import ConflictReport
    for _ in range(2000):
        ev.battery = float(rng.uniform(0, 100))
        ev.delay_minutes = float(rng.uniform(0, 200))
        effect = ActionEffect()
        if rng.random() < 0.5:
            effect = ActionEffect(took_off=True, takeoff_event=W.TakeoffEvent(
                0, minute=float(rng.uniform(0, 100)),
                scheduled_minute=float(rng.uniform(0, 100)),
                battery=float(rng.uniform(0, 100))))
        credit = [None, True, False][int(rng.integers(3))]
        conflicts = [ConflictReport(1, 2.0, 0.5)] if rng.random() < 0.5 else []
        action = int(rng.integers(space.n_actions))
        terms = compute_reward(config.reward_weights, ev, action, space, effect,
                               credit, conflicts, config.battery_threshold)
        assert -7.0 <= terms.total <= 7.0
        recomputed = sum(w * t for w, t in zip(
            config.reward_weights,
            (terms.takeoff, terms.landing, terms.battery, terms.delay, terms.safety)))
        assert terms.total == pytest.approx(recomputed, abs=1e-12)


# -- masks ------------------------------------------------------------------

def test_mask_grounded_aircraft(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.IDLE_GROUND
    ev.position = state.ports[0].position.copy()
    ev.velocity = np.zeros(2)
    ev.target = None
    ev.target_kind = None
    state.ports[0].occupied_by = ev.id
    mask = compute_mask(state, ev, space)
    assert mask[space.STAY] and mask[space.TAKEOFF]
    assert not mask[space.continue_id] and not mask[space.avoid_id]
    assert not mask[space.first_port_action:space.first_hover_action].any()
    assert not mask[space.first_hover_action:space.continue_id].any()


def test_mask_hovering_aircraft_excludes_taken_pads(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.HOVERING
    ev.position = state.hover_spots[0].position.copy()
    ev.target = None
    ev.target_kind = None
    state.hover_spots[0].occupied_by = ev.id
    state.ports[1].occupied_by = 99
    mask = compute_mask(state, ev, space)
    assert mask[space.STAY] and not mask[space.TAKEOFF]
    assert mask[space.first_port_action + 0]
    assert not mask[space.first_port_action + 1]      # reserved by someone else
    assert mask[space.first_port_action + 2]
    assert not mask[space.first_hover_action + 0]     # its own spot is claimed
    assert mask[space.first_hover_action + 1]
    assert mask[space.avoid_id]
    assert not mask[space.continue_id]                # no leg in progress


def test_mask_outbound_aircraft_outside_airspace(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.EN_ROUTE_OUTBOUND
    ev.position = np.array([40.0, 0.0])               # outside the 15 m entry radius
    mask = compute_mask(state, ev, space)
    assert mask[space.STAY]
    assert not mask[space.first_port_action:space.first_hover_action].any()
    assert mask[space.continue_id] and mask[space.avoid_id]


def test_apply_action_enforces_the_mask(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]    # outbound, so takeoff is infeasible
    mask = compute_mask(state, ev, space)
    assert not mask[space.TAKEOFF]
    with pytest.raises(MaskViolationError):
        apply_action(state, ev, space.TAKEOFF, space, mask, config.uncertainty, state.rng)
    with pytest.raises(MaskViolationError):
        apply_action(state, ev, space.n_actions, space, mask, config.uncertainty, state.rng)


def test_takeoff_action_releases_pad_and_heads_out(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.IDLE_GROUND
    ev.position = state.ports[0].position.copy()
    ev.target = None
    ev.target_kind = None
    state.ports[0].occupied_by = ev.id
    ev.plan = W.FlightPlan(W.PlanKind.TAKEOFF, scheduled_minute=5.0,
                           destination_id=2, issued_minute=0.0)
    mask = compute_mask(state, ev, space)
    effect = apply_action(state, ev, space.TAKEOFF, space, mask,
                          config.uncertainty, state.rng)
    assert effect.took_off and effect.takeoff_event is not None
    assert effect.takeoff_event.scheduled_minute == 5.0
    assert state.ports[0].occupied_by is None
    assert ev.status == W.EvtolStatus.EN_ROUTE_OUTBOUND
    assert tuple(ev.target) == tuple(state.destinations[2])


def test_move_actions_reserve_their_pad(config, space):
    state = W.init_world(config, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.HOVERING
    ev.position = state.hover_spots[0].position.copy()
    ev.target = None
    state.hover_spots[0].occupied_by = ev.id
    mask = compute_mask(state, ev, space)
    apply_action(state, ev, space.first_port_action + 1, space, mask,
                 config.uncertainty, state.rng)
    assert state.ports[1].occupied_by == ev.id
    assert state.hover_spots[0].occupied_by is None   # old claim dropped
    assert ev.status == W.EvtolStatus.EN_ROUTE_INTERNAL
    assert ev.target_kind == W.TARGET_PORT


# -- uncertainty ------------------------------------------------------------

def test_uncertainty_disabled_draws_nothing(config):
    state = W.init_world(config, np.random.default_rng(0))
    spec = UncertaintySpec(enabled=False)
    before = state.rng.bit_generator.state["state"]["state"]
    inject_uncertainty(state, spec, state.rng)
    after = state.rng.bit_generator.state["state"]["state"]
    assert before == after
    assert state.wind_factors == {} and state.port_failures == set()


def test_wind_frequency_and_split(config):
    spec = UncertaintySpec(p_wind=0.05, p_port_fail=0.05, p_takeoff_fail=0.05,
                           enabled=True)
    state = W.init_world(config, np.random.default_rng(9))
    rng = np.random.default_rng(1234)
    draws = 0
    hits = 0
    calm = 0
    for _ in range(20000):
        inject_uncertainty(state, spec, rng)
        draws += len(state.evtols)
        hits += len(state.wind_factors)
        for factor in state.wind_factors.values():
            if factor == 0.0:
                calm += 1
            else:
                assert 0.25 <= factor <= 0.75
    assert hits / draws == pytest.approx(0.05, abs=0.005)
    assert calm / hits == pytest.approx(0.5, abs=0.03)


def test_charger_failure_frequency(config):
    spec = UncertaintySpec(enabled=True)
    state = W.init_world(config, np.random.default_rng(9))
    for ev in state.evtols:
        ev.status = W.EvtolStatus.CHARGING
        ev.target = None
    rng = np.random.default_rng(99)
    draws = 0
    hits = 0
    for _ in range(20000):
        inject_uncertainty(state, spec, rng)
        draws += len(state.evtols)
        hits += len(state.port_failures)
    assert hits / draws == pytest.approx(0.05, abs=0.005)


def test_takeoff_failure_keeps_aircraft_grounded(config, space):
    spec = UncertaintySpec(p_takeoff_fail=1.0, enabled=True)
    cfg = config.with_noise(True)
    state = W.init_world(cfg, np.random.default_rng(0))
    ev = state.evtols[0]
    ev.status = W.EvtolStatus.IDLE_GROUND
    ev.position = state.ports[0].position.copy()
    ev.target = None
    state.ports[0].occupied_by = ev.id
    mask = compute_mask(state, ev, space)
    effect = apply_action(state, ev, space.TAKEOFF, space, mask, spec, state.rng)
    assert effect.takeoff_failed and not effect.took_off
    assert ev.status == W.EvtolStatus.IDLE_GROUND
    assert state.ports[0].occupied_by == ev.id


# -- conflicts through the env ----------------------------------------------

def _stage_head_on(env):
    """Two aircraft flying straight at each other between two ports."""
    state = env.state
    a, b = state.evtols[0], state.evtols[1]
    for ev, src, dst in ((a, (-6.0, 0.0), 0), (b, (6.0, 0.0), 1)):
        ev.status = W.EvtolStatus.EN_ROUTE_INTERNAL
        ev.position = np.array(src)
        ev.target = state.ports[dst].position.copy()
        ev.target_kind = W.TARGET_PORT
        ev.target_id = dst
        state.ports[dst].occupied_by = ev.id
        ev.hold_step = False
    state.ports[0].position[:] = (6.0, 0.0)
    state.ports[1].position[:] = (-6.0, 0.0)
    a.target = np.array([6.0, 0.0])
    b.target = np.array([-6.0, 0.0])
    for other in state.evtols[2:]:
        other.status = W.EvtolStatus.HOVERING
        other.target = None
        other.position = np.array([0.0, 14.0]) + np.array([other.id, 0.0])
    env.acting_index = 0
    return a, b


def test_conflict_snapshot_sees_head_on_traffic(config):
    env = make_env(config, noise=False)
    env.reset(0)
    a, _ = _stage_head_on(env)
    conflicts = conflict_snapshot(env.state, a, config.separation_threshold)
    assert len(conflicts) == 1
    assert conflicts[0].other_id == 1
    assert conflicts[0].d_min == pytest.approx(0.0, abs=1e-9)
    assert conflicts[0].t_min == pytest.approx(1.5, abs=1e-9)  # 12 m gap closing at 8 m/min


def test_avoid_pays_and_ignoring_costs(config):
    env = make_env(config, noise=False)
    env.reset(0)
    _stage_head_on(env)
    _, _, terms, _, _ = env.step(env.space.avoid_id)
    assert terms.safety == 5.0

    env.reset(0)
    _stage_head_on(env)
    _, _, terms, _, info = env.step(env.space.continue_id)
    assert terms.safety == -5.0
    assert info["n_conflicts"] == 1


# -- episode mechanics ------------------------------------------------------

def test_episode_runs_to_the_minute_budget(config):
    env = make_env(config, noise=False)
    env.reset(4)
    rng = np.random.default_rng(4)
    done = False
    steps = 0
    while not done:
        feasible = np.flatnonzero(env.current_mask())
        _, _, _, done, _ = env.step(int(rng.choice(feasible)))
        steps += 1
    assert env.state.clock.step == config.episode_steps
    stats = env.episode_stats()
    assert stats["decisions"] == steps
    assert stats["decisions"] + stats["fast_forward_steps"] == config.episode_steps
    with pytest.raises(RuntimeError):
        env.step(0)


def test_same_seed_same_trajectory(config):
    def run(seed):
        env = make_env(config, noise=False)
        env.reset(seed)
        rng = np.random.default_rng(77)
        rewards = []
        done = False
        while not done:
            feasible = np.flatnonzero(env.current_mask())
            _, r, _, done, _ = env.step(int(rng.choice(feasible)))
            rewards.append(r)
        return rewards, env.episode_stats()

    r1, s1 = run(11)
    r2, s2 = run(11)
    assert r1 == r2
    assert s1 == s2


def test_observation_shapes_and_encoding(config):
    env = make_env(config, noise=False)
    obs = env.reset(2)
    assert obs.evtol_nodes.shape == (config.n_evtols, 12)
    assert obs.port_nodes.shape == (config.n_ports + config.n_hover_spots, 6)
    assert obs.evtol_adjacency.shape == (config.n_evtols,) * 2
    # Complete graph with self-loops over 4 nodes normalizes to uniform 1/4.
    assert np.allclose(obs.evtol_adjacency, 0.25)
    assert np.allclose(obs.port_adjacency, 0.1)
    for row in obs.evtol_nodes:
        assert row[0] == 1.0                      # full battery at reset
        assert row[1:8].sum() == 1.0              # one-hot status
        assert np.all(np.abs(row[8:]) <= 1.0)
    # All pads are free at reset and kinds are one-hot.
    assert np.all(obs.port_nodes[:, 0] == 1.0)
    assert np.all(obs.port_nodes[:, 1:4].sum(axis=1) == 1.0)
    with pytest.raises(ValueError):
        obs.evtol_nodes[0, 0] = 0.5


def test_random_walk_preserves_invariants(config):
    env = make_env(config, noise=False)
    env.reset(21)
    rng = np.random.default_rng(21)
    cruise = config.cruise_speed * config.minutes_per_step
    for _ in range(2000):
        if env.done:
            env.reset(int(rng.integers(1 << 30)))
        before = [ev.position.copy() for ev in env.state.evtols]
        feasible = np.flatnonzero(env.current_mask())
        _, _, _, done, info = env.step(int(rng.choice(feasible)))
        state = env.state
        claims = {}
        for pad in list(state.ports) + list(state.hover_spots):
            if pad.occupied_by is not None:
                key = pad.occupied_by
                assert key not in claims, "one aircraft holds two pads"
                claims[key] = pad
        for ev in state.evtols:
            assert 0.0 <= ev.battery <= 100.0
            if ev.status in W.GROUNDED_STATUSES:
                port = claims.get(ev.id)
                assert port is not None and isinstance(port, W.Port)
                assert tuple(ev.position) == tuple(port.position)
        if info["fast_forward_steps"] == 0 and not done:
            for ev, old in zip(state.evtols, before):
                moved = float(np.hypot(*(ev.position - old)))
                assert moved <= cruise + 1e-9
