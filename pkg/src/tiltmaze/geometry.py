"""Circular maze layout and the discrete gate planner.

The maze is four concentric ring channels on a tiltable platform. Rings are
indexed 0 (outermost) to 3 (innermost channel); index 4 is the center goal
region. Each ring wall has one or more gate openings through which the marble
can drop to the next ring inward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi
GOAL_RING = 4


class GeometryError(ValueError):
    """Invalid maze layout or an operation on the goal ring."""


def wrap_angle(theta: float) -> float:
    """Reduce an angle to the interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    t = math.fmod(math.pi - theta, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    return math.pi - t


def wrap_angle_arr(theta: np.ndarray) -> np.ndarray:
    # elementwise twin of wrap_angle; identical arithmetic so results agree bitwise
    t = np.fmod(np.pi - np.asarray(theta, dtype=float), TWO_PI)
    t = np.where(t < 0.0, t + TWO_PI, t)
    return np.pi - t


@dataclass(frozen=True)
class MazeGeometry:
    """Ring radii, gate layout, marble, and platform limits (SI units).

    ``ring_radii`` are channel center-line radii, outermost first and strictly
    decreasing. ``gates`` holds per-ring gate angles in (-pi, pi]. Walls sit at
    ``radius +/- channel_half_width``; gate openings have physical width
    ``gate_width`` along the wall.
    """

    ring_radii: tuple[float, ...] = (0.10, 0.08, 0.06, 0.04)
    channel_half_width: float = 0.008
    gates: tuple[tuple[float, ...], ...] = (
        (0.0, math.pi),
        (math.pi / 2, -math.pi / 2),
        (0.0, math.pi),
        (math.pi / 2, -math.pi / 2),
    )
    marble_radius: float = 0.004
    marble_mass: float = 0.003
    max_tilt: float = 0.15
    # per-ring gate opening widths; the innermost wall's hole is snug around
    # the marble, so the final capture punishes entry speed like the real toy
    gate_width: tuple[float, ...] | float = (0.016, 0.016, 0.016, 0.010)

    def __post_init__(self) -> None:
        radii = tuple(float(r) for r in self.ring_radii)
        if any(r <= 0 for r in radii):
            raise GeometryError("ring radii must be positive")
        if any(a <= b for a, b in zip(radii, radii[1:])):
            raise GeometryError("ring radii must be strictly decreasing")
        if len(self.gates) != len(radii):
            raise GeometryError("need one gate tuple per ring")
        for ring, ring_gates in enumerate(self.gates):
            if len(ring_gates) < 1:
                raise GeometryError(f"ring {ring} has no gates")
            for g in ring_gates:
                if not (-math.pi < g <= math.pi):
                    raise GeometryError(f"gate angle {g} outside (-pi, pi]")
        if not self.channel_half_width > self.marble_radius:
            raise GeometryError("channel_half_width must exceed marble_radius")
        widths = self.gate_width
        if isinstance(widths, (int, float)):
            widths = (float(widths),) * len(radii)
        else:
            widths = tuple(float(w) for w in widths)
        if len(widths) != len(radii):
            raise GeometryError("need one gate width per ring")
        if any(w <= 2 * self.marble_radius for w in widths):
            raise GeometryError("gate openings must be wider than the marble")
        if self.marble_mass <= 0 or self.max_tilt <= 0:
            raise GeometryError("marble_mass and max_tilt must be positive")
        object.__setattr__(self, "ring_radii", radii)
        object.__setattr__(self, "gate_width", widths)
        object.__setattr__(self, "gates", tuple(tuple(float(g) for g in gs) for gs in self.gates))

    @property
    def n_rings(self) -> int:
        return len(self.ring_radii)

    @property
    def radial_play(self) -> float:
        """Half-range of marble-center radial motion inside a channel."""
        return self.channel_half_width - self.marble_radius

    def channel_bounds(self, ring: int) -> tuple[float, float]:
        """Marble-center radial limits (lo, hi) within a ring channel."""
        r = self.ring_radii[ring]
        return r - self.radial_play, r + self.radial_play

    def inner_wall(self, ring: int) -> float:
        return self.ring_radii[ring] - self.channel_half_width

    def outer_wall(self, ring: int) -> float:
        return self.ring_radii[ring] + self.channel_half_width

    @property
    def goal_rho(self) -> float:
        """Marble-center radius below which the marble is in the goal region."""
        return self.inner_wall(self.n_rings - 1) - self.marble_radius

    def gate_half_arc(self, ring: int) -> float:
        """Angular half-width of a gate opening at a ring's wall."""
        return 0.5 * self.gate_width[ring] / self.ring_radii[ring]

    def gate_clearance_arc(self, ring: int) -> float:
        """Angular half-window the marble *center* must hit to fit through."""
        clearance = 0.5 * self.gate_width[ring] - self.marble_radius
        return clearance / self.ring_radii[ring]

    def gate_open(self, ring: int, theta: float) -> bool:
        """Whether a marble centered at ``theta`` fits through a gate of ``ring``."""
        arc = self.gate_clearance_arc(ring)
        return any(abs(wrap_angle(g - theta)) <= arc for g in self.gates[ring])

    def marble_xy(self, rho: float, theta: float) -> tuple[float, float]:
        return rho * math.cos(theta), rho * math.sin(theta)

    def to_dict(self) -> dict:
        return {
            "ring_radii": list(self.ring_radii),
            "channel_half_width": self.channel_half_width,
            "gates": [list(gs) for gs in self.gates],
            "marble_radius": self.marble_radius,
            "marble_mass": self.marble_mass,
            "max_tilt": self.max_tilt,
            "gate_width": list(self.gate_width),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MazeGeometry":
        kwargs = dict(d)
        if "ring_radii" in kwargs:
            kwargs["ring_radii"] = tuple(kwargs["ring_radii"])
        if "gates" in kwargs:
            kwargs["gates"] = tuple(tuple(gs) for gs in kwargs["gates"])
        if "gate_width" in kwargs and not isinstance(kwargs["gate_width"], (int, float)):
            kwargs["gate_width"] = tuple(kwargs["gate_width"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> "MazeGeometry":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise GeometryError(f"geometry file {path!r} must hold a mapping")
        return cls.from_dict(data)


def nearest_gate(geom: MazeGeometry, ring: int, theta: float) -> float:
    """Gate angle of ``ring`` closest to ``theta``; ties go counterclockwise.

    Distance is the wrapped angular difference. On an exact tie the gate with
    the positive (counterclockwise) signed difference wins.
    """
    if ring >= geom.n_rings:
        raise GeometryError(f"ring {ring} has no gates (goal ring)")
    best = None
    best_key = None
    for g in geom.gates[ring]:
        d = wrap_angle(g - theta)
        key = (abs(d), 0 if d > 0 else 1)
        if best_key is None or key < best_key:
            best, best_key = g, key
    return best


def plan_gate_sequence(geom: MazeGeometry, start_ring: int, theta: float) -> list[tuple[int, float]]:
    """Greedy gate chain from ``start_ring`` to the goal.

    Picks the gate of the current ring nearest the current angle, then chains
    from that gate's angle into the next ring. Returns [(ring, gate_angle)].
    """
    if start_ring >= GOAL_RING:
        raise GeometryError("already at the goal ring")
    plan: list[tuple[int, float]] = []
    angle = theta
    for ring in range(start_ring, geom.n_rings):
        g = nearest_gate(geom, ring, angle)
        plan.append((ring, g))
        angle = g
    return plan
