"""Closest-approach geometry against hand-worked cases and dense sampling."""
from __future__ import annotations

import numpy as np
import pytest

from vertiport_rl.separation import (ConflictReport, KinematicTrack, detect_conflicts,
                                     is_collision, min_separation, separation_at,
                                     time_of_closest_approach)


def _dense_min(a, b, horizon=200.0, step=0.001):
    """Brute-force minimum separation by sampling the trajectories."""
    ts = np.arange(0.0, horizon + step, step)
    dx = (a.x - b.x) + ts * (a.vx - b.vx)
    dy = (a.y - b.y) + ts * (a.vy - b.vy)
    d = np.hypot(dx, dy)
    k = int(np.argmin(d))
    return float(d[k]), float(ts[k])


def test_separation_at_known_points():
    a = KinematicTrack(0.0, 0.0, 3.0, 4.0)
    b = KinematicTrack(0.0, 0.0, 0.0, 0.0)
    assert separation_at(a, b, 0.0) == 0.0
    assert separation_at(a, b, 1.0) == pytest.approx(5.0, abs=1e-12)
    assert separation_at(a, b, 2.0) == pytest.approx(10.0, abs=1e-12)


def test_separation_at_rejects_past_times():
    a = KinematicTrack(0.0, 0.0, 1.0, 0.0)
    b = KinematicTrack(5.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        separation_at(a, b, -0.5)


def test_closest_approach_head_on_with_offset():
    # Relative position (10, 1), relative velocity (-2, 0): meet abeam at t=5
    # with 1.0 still between the tracks.
    a = KinematicTrack(0.0, 0.0, 1.0, 0.0)
    b = KinematicTrack(10.0, 1.0, -1.0, 0.0)
    assert time_of_closest_approach(a, b) == pytest.approx(5.0, abs=1e-12)
    d_min, t_min = min_separation(a, b)
    assert t_min == pytest.approx(5.0, abs=1e-12)
    assert d_min == pytest.approx(1.0, abs=1e-12)


def test_closest_approach_diverging_clamps_to_now():
    # Already separating: the quadratic's minimum lies in the past, so the
    # closest point on the admissible horizon is t = 0.
    a = KinematicTrack(0.0, 0.0, -2.0, -2.0)
    b = KinematicTrack(3.0, 4.0, 0.0, 0.0)
    assert time_of_closest_approach(a, b) == 0.0
    d_min, t_min = min_separation(a, b)
    assert t_min == 0.0
    assert d_min == pytest.approx(5.0, abs=1e-12)


def test_closest_approach_oblique_crossing():
    # Relative position (1, 0), relative velocity (-1, 1): closest at t=0.5,
    # where the offset is (0.5, 0.5).
    a = KinematicTrack(1.0, 0.0, -1.0, 1.0)
    b = KinematicTrack(0.0, 0.0, 0.0, 0.0)
    d_min, t_min = min_separation(a, b)
    assert t_min == pytest.approx(0.5, abs=1e-12)
    assert d_min == pytest.approx(0.7071067811865476, abs=1e-12)


def test_zero_relative_velocity_freezes_the_gap():
    a = KinematicTrack(0.0, 0.0, 2.0, 1.0)
    b = KinematicTrack(6.0, 8.0, 2.0, 1.0)
    assert time_of_closest_approach(a, b) == 0.0
    d_min, t_min = min_separation(a, b)
    assert (d_min, t_min) == (pytest.approx(10.0, abs=1e-12), 0.0)


def test_conflict_threshold_is_inclusive():
    subject = KinematicTrack(0.0, 0.0, 1.0, 0.0)
    at_threshold = KinematicTrack(0.0, 3.0, 1.0, 0.0)    # parallel, gap exactly 3
    clear = KinematicTrack(0.0, 3.0 + 1e-9, 1.0, 0.0)
    hits = detect_conflicts(0, subject, [(1, at_threshold), (2, clear)], threshold=3.0)
    assert [c.other_id for c in hits] == [1]
    assert hits[0] == ConflictReport(other_id=1, d_min=pytest.approx(3.0), t_min=0.0)


def test_collision_threshold_is_strict():
    assert is_collision((0.0, 0.0), (0.999, 0.0), threshold=1.0)
    assert not is_collision((0.0, 0.0), (1.0, 0.0), threshold=1.0)


def test_closed_form_matches_dense_sampling():
    rng = np.random.default_rng(42)
    for _ in range(300):
        a = KinematicTrack(*rng.uniform(-50, 50, 2), *rng.uniform(-5, 5, 2))
        b = KinematicTrack(*rng.uniform(-50, 50, 2), *rng.uniform(-5, 5, 2))
        d_min, t_min = min_separation(a, b)
        sampled_d, _ = _dense_min(a, b, horizon=50.0, step=0.01)
        # The sample grid can only overshoot the true minimum.
        assert d_min <= sampled_d + 1e-9
        assert d_min <= separation_at(a, b, 0.0) + 1e-12
        assert t_min >= 0.0
        if t_min < 50.0:
            assert separation_at(a, b, t_min) == pytest.approx(d_min, abs=1e-9)


def test_minimum_is_global_over_future_times():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        a = KinematicTrack(*rng.uniform(-50, 50, 2), *rng.uniform(-5, 5, 2))
        b = KinematicTrack(*rng.uniform(-50, 50, 2), *rng.uniform(-5, 5, 2))
        d_min, _ = min_separation(a, b)
        probes = rng.uniform(0.0, 200.0, 32)
        for t in probes:
            assert d_min <= separation_at(a, b, float(t)) + 1e-9
