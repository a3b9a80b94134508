"""Pairwise separation geometry for linearly extrapolated tracks.

Each track is a point moving in straight-line flight at constant velocity.
The closest point of approach between two tracks has a closed form: the
squared distance is a quadratic in time, so its minimizer is where the
derivative vanishes, clamped to "now or later" because past proximity is
not a future conflict.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence


@dataclass(frozen=True)
class KinematicTrack:
    x: float
    y: float
    vx: float
    vy: float


@dataclass(frozen=True)
class ConflictReport:
    other_id: int
    d_min: float
    t_min: float


def separation_at(a: KinematicTrack, b: KinematicTrack, t: float) -> float:
    """Distance between the two tracks after coasting for time t."""
    if t < 0:
        raise ValueError(f"separation_at: t must be >= 0, got {t}")
    dx = (a.x - b.x) + t * (a.vx - b.vx)
    dy = (a.y - b.y) + t * (a.vy - b.vy)
    return math.hypot(dx, dy)


def time_of_closest_approach(a: KinematicTrack, b: KinematicTrack) -> float:
    """Minimizer of the pairwise distance, clamped to t >= 0.

    With identical velocities the distance is constant and the minimizer is
    defined as 0.  Diverging tracks also clamp to 0: they are closest now.
    """
    dvx = a.vx - b.vx
    dvy = a.vy - b.vy
    dpx = a.x - b.x
    dpy = a.y - b.y
    denom = dvx * dvx + dvy * dvy
    if denom == 0.0:
        return 0.0
    t = -(dvx * dpx + dvy * dpy) / denom
    return max(0.0, t)


def min_separation(a: KinematicTrack, b: KinematicTrack) -> tuple[float, float]:
    """(d_min, t_min) over t >= 0."""
    t = time_of_closest_approach(a, b)
    return separation_at(a, b, t), t


def detect_conflicts(
    subject_id: int,
    subject: KinematicTrack,
    others: Sequence[tuple[int, KinematicTrack]],
    threshold: float,
) -> list[ConflictReport]:
    """Conflicts between one en-route subject and the other en-route tracks.

    Callers are responsible for passing only airborne, en-route traffic;
    grounded and hovering vehicles do not project a track.
    """
    reports = []
    for other_id, track in others:
        if other_id == subject_id:
            continue
        d_min, t_min = min_separation(subject, track)
        if d_min <= threshold:
            reports.append(ConflictReport(other_id=other_id, d_min=d_min, t_min=t_min))
    return reports


def is_collision(pos_a, pos_b, threshold: float) -> bool:
    """Instantaneous loss of separation below the collision threshold."""
    return math.hypot(pos_a[0] - pos_b[0], pos_a[1] - pos_b[1]) < threshold
