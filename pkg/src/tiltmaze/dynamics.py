"""Marble dynamics on the tilting maze: reduced and full engines.

Both engines share the tangential model

    dd(theta) = (g/r) * (sin(gamma) cos(theta) - sin(beta) sin(theta))
                - (g*mu_slide/r) * sign(d(theta))
                - (mu_roll / (m r^2)) * d(theta)

integrated over ``n_sub`` substeps per control tick with a semi-implicit
scheme: velocity kicks from the gravity torque evaluated at the substep
midpoint, position advanced trapezoidally in velocity (second order in the
smooth regime), and the platform angles advanced through the servo lag at
every substep. Coulomb friction uses a Karnopp-style dead band: below
``v_eps`` the marble holds exact rest whenever the drive cannot beat the
combined slide + stiction capacity, and a kinetic friction update is clamped
so friction can stop the marble but never reverse it. This keeps rest states
exactly at rest instead of creeping or chattering at the sign switch.

The reduced engine pins the marble to the ring center-line and carries state
(beta, gamma, theta, theta_dot). The full engine, standing in for the real
system, additionally integrates the radial coordinate (with centrifugal drive,
wall clamping and restitution, and gate corridors), a Coriolis term, and a
slowly decaying marble spin that couples weakly into the tangential dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import GOAL_RING, MazeGeometry, wrap_angle, wrap_angle_arr
from .motor import ServoParams

GRAVITY = 9.81
DEFAULT_DT = 1.0 / 30.0
DEFAULT_N_SUB = 10
V_EPS = 1e-3


class IntegrationError(RuntimeError):
    """Non-finite state encountered while stepping."""


@dataclass(frozen=True)
class FrictionParams:
    """The four friction knobs: slide (Coulomb), spin decay, rolling, stiction."""

    slide: float
    spin: float
    roll: float
    floss: float

    def __post_init__(self) -> None:
        vals = (self.slide, self.spin, self.roll, self.floss)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"friction parameters must be finite and >= 0, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.slide, self.spin, self.roll, self.floss])

    @classmethod
    def from_array(cls, arr) -> "FrictionParams":
        s, sp, r, f = (float(v) for v in arr)
        return cls(slide=s, spin=sp, roll=r, floss=f)


# calibration targets used throughout the experiments: the stand-in real system
# is much more slippery than the uncalibrated internal-model defaults
FULL_MODEL_FRICTION = FrictionParams(slide=1e-3, spin=1e-6, roll=1e-7, floss=1e-6)
REDUCED_MODEL_FRICTION = FrictionParams(slide=1.0, spin=5e-3, roll=1e-4, floss=0.0)


@dataclass(frozen=True)
class FullModelParams:
    """Knobs that exist only in the full ("real") engine."""

    kappa_spin: float = 0.01        # rad/s^2 of tangential accel per rad/s of spin
    wall_restitution: float = 0.1   # radial bounce coefficient at channel walls
    spin_init_std: float = 2.0      # rad/s, reset-time spin draw


@dataclass(frozen=True)
class Action:
    """Normalized platform command; each axis maps to target tilt u*max_tilt."""

    ux: float
    uy: float

    def clipped(self) -> "Action":
        return Action(ux=min(1.0, max(-1.0, self.ux)), uy=min(1.0, max(-1.0, self.uy)))

    def as_array(self) -> np.ndarray:
        return np.array([self.ux, self.uy])


@dataclass(frozen=True)
class ReducedState:
    """Observable state: platform tilts, marble angle and rate, ring index."""

    beta: float
    gamma: float
    theta: float
    theta_dot: float
    ring: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.beta, self.gamma, self.theta, self.theta_dot])

    @classmethod
    def from_array(cls, arr, ring: int) -> "ReducedState":
        b, g, t, td = (float(v) for v in arr)
        return cls(beta=b, gamma=g, theta=t, theta_dot=td, ring=ring)


@dataclass(frozen=True)
class FullState:
    """Hidden real-system state: adds radial position/velocity and spin."""

    beta: float
    gamma: float
    theta: float
    theta_dot: float
    ring: int
    rho: float
    rho_dot: float
    spin: float

    def reduced_array(self) -> np.ndarray:
        return np.array([self.beta, self.gamma, self.theta, self.theta_dot])


def observe(x: FullState) -> ReducedState:
    """Project the full state onto what the real system exposes."""
    return ReducedState(beta=x.beta, gamma=x.gamma, theta=x.theta,
                        theta_dot=x.theta_dot, ring=x.ring)


def embed(x: ReducedState, geom: MazeGeometry) -> FullState:
    """Lift a reduced state to a full one at the ring center-line, no spin."""
    ring = min(x.ring, geom.n_rings - 1)
    return FullState(beta=x.beta, gamma=x.gamma, theta=x.theta,
                     theta_dot=x.theta_dot, ring=x.ring,
                     rho=geom.ring_radii[ring], rho_dot=0.0, spin=0.0)


def inject_noise(x: ReducedState, sigma, rng) -> ReducedState:
    """Add independent Gaussian noise to (theta, theta_dot); seed-deterministic."""
    s_theta, s_theta_dot = (float(s) for s in sigma)
    if s_theta < 0 or s_theta_dot < 0:
        raise ValueError("noise scales must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d_theta, d_theta_dot = rng.normal(0.0, 1.0, size=2)
    theta = x.theta if s_theta == 0.0 else wrap_angle(x.theta + s_theta * d_theta)
    return replace(x, theta=theta,
                   theta_dot=x.theta_dot + s_theta_dot * d_theta_dot)


def tangential_accel(beta: float, gamma: float, theta: float, ring_radius: float) -> float:
    """Gravity-driven angular acceleration of the marble along its channel."""
    if ring_radius <= 0:
        raise ValueError(f"ring radius must be positive, got {ring_radius}")
    return (GRAVITY / ring_radius) * (
        math.sin(gamma) * math.cos(theta) - math.sin(beta) * math.sin(theta))


def _sign(v: float) -> float:
    if v > 0.0:
        return 1.0
    if v < 0.0:
        return -1.0
    return 0.0


def _coulomb_update(theta: float, theta_dot: float, a_drive: float, a_grav_mag: float,
                    a_cm: float, a_floss: float, c_visc: float, dt: float,
                    v_eps: float) -> tuple[float, float]:
    """One friction-aware velocity/position update; returns (theta, theta_dot).

    ``a_drive`` is the net non-friction angular acceleration and ``a_grav_mag``
    its magnitude used for the hold/breakaway decision.
    """
    if abs(theta_dot) < v_eps and a_grav_mag <= a_cm + a_floss:
        return theta, 0.0
    s = _sign(theta_dot)
    if s == 0.0:
        s = _sign(a_drive)
    a = a_drive - a_cm * s - c_visc * theta_dot
    v = theta_dot + dt * a
    if s != 0.0 and v * s < 0.0 and a_grav_mag <= a_cm:
        v = 0.0
    # trapezoidal position update; with the midpoint force this is 2nd order
    return wrap_angle(theta + 0.5 * dt * (theta_dot + v)), v


def step_reduced_raw(state, action, ring_radius: float, mu: FrictionParams,
                     servo: ServoParams, marble_mass: float,
                     dt: float = DEFAULT_DT, n_sub: int = DEFAULT_N_SUB,
                     v_eps: float = V_EPS) -> tuple[float, float, float, float]:
    """Scalar fast path of the reduced step; takes and returns plain floats."""
    beta, gamma, theta, theta_dot = (float(v) for v in state)
    ux, uy = (float(v) for v in action)
    if dt <= 0:
        raise ValueError("dt must be positive")
    h = dt / n_sub
    k_lag = 1.0 - math.exp(-h / servo.tau)
    slew = servo.rate_limit * h
    tilt = servo.max_tilt
    tx = min(1.0, max(-1.0, ux)) * tilt
    ty = min(1.0, max(-1.0, uy)) * tilt
    a_cm = GRAVITY * mu.slide / ring_radius
    a_floss = GRAVITY * mu.floss / ring_radius
    c_visc = mu.roll / (marble_mass * ring_radius * ring_radius)

    for _ in range(n_sub):
        beta_prev, gamma_prev = beta, gamma
        db = k_lag * (tx - beta)
        dg = k_lag * (ty - gamma)
        db = min(slew, max(-slew, db))
        dg = min(slew, max(-slew, dg))
        beta = min(tilt, max(-tilt, beta + db))
        gamma = min(tilt, max(-tilt, gamma + dg))
        # force terms at the substep midpoint (marble and platform alike)
        beta_mid = 0.5 * (beta_prev + beta)
        gamma_mid = 0.5 * (gamma_prev + gamma)
        theta_mid = theta + 0.5 * h * theta_dot
        a_grav = (GRAVITY / ring_radius) * (
            math.sin(gamma_mid) * math.cos(theta_mid)
            - math.sin(beta_mid) * math.sin(theta_mid))
        theta, theta_dot = _coulomb_update(theta, theta_dot, a_grav, abs(a_grav),
                                           a_cm, a_floss, c_visc, h, v_eps)
    if not (math.isfinite(theta) and math.isfinite(theta_dot)):
        raise IntegrationError("reduced step produced non-finite state")
    return beta, gamma, theta, theta_dot


def step_reduced_batch(states: np.ndarray, actions: np.ndarray, radii: np.ndarray,
                       mu: FrictionParams, servo: ServoParams, marble_mass: float,
                       dt: float = DEFAULT_DT, n_sub: int = DEFAULT_N_SUB,
                       v_eps: float = V_EPS) -> np.ndarray:
    """Vectorized twin of step_reduced_raw over rows of (n,4) states."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    radii = np.broadcast_to(np.asarray(radii, dtype=float), states.shape[:-1])
    if dt <= 0:
        raise ValueError("dt must be positive")
    beta = states[..., 0].copy()
    gamma = states[..., 1].copy()
    theta = states[..., 2].copy()
    theta_dot = states[..., 3].copy()
    h = dt / n_sub
    k_lag = 1.0 - math.exp(-h / servo.tau)
    slew = servo.rate_limit * h
    tilt = servo.max_tilt
    tx = np.clip(actions[..., 0], -1.0, 1.0) * tilt
    ty = np.clip(actions[..., 1], -1.0, 1.0) * tilt
    a_cm = GRAVITY * mu.slide / radii
    a_floss = GRAVITY * mu.floss / radii
    c_visc = mu.roll / (marble_mass * radii * radii)
    g_over_r = GRAVITY / radii

    for _ in range(n_sub):
        beta_prev, gamma_prev = beta, gamma
        beta = np.clip(beta + np.clip(k_lag * (tx - beta), -slew, slew), -tilt, tilt)
        gamma = np.clip(gamma + np.clip(k_lag * (ty - gamma), -slew, slew), -tilt, tilt)
        beta_mid = 0.5 * (beta_prev + beta)
        gamma_mid = 0.5 * (gamma_prev + gamma)
        theta_mid = theta + 0.5 * h * theta_dot
        a_grav = g_over_r * (np.sin(gamma_mid) * np.cos(theta_mid)
                             - np.sin(beta_mid) * np.sin(theta_mid))
        hold = (np.abs(theta_dot) < v_eps) & (np.abs(a_grav) <= a_cm + a_floss)
        s = np.sign(theta_dot)
        s = np.where(s == 0.0, np.sign(a_grav), s)
        a = a_grav - a_cm * s - c_visc * theta_dot
        v = theta_dot + h * a
        v = np.where((s != 0.0) & (v * s < 0.0) & (np.abs(a_grav) <= a_cm), 0.0, v)
        v = np.where(hold, 0.0, v)
        theta = np.where(hold, theta, wrap_angle_arr(theta + 0.5 * h * (theta_dot + v)))
        theta_dot = v
    out = np.stack([beta, gamma, theta, theta_dot], axis=-1)
    if not np.all(np.isfinite(out)):
        raise IntegrationError("reduced batch step produced non-finite state")
    return out


def step_reduced(x: ReducedState, u: Action, mu: FrictionParams, dt: float,
                 servo: ServoParams, geom: MazeGeometry,
                 n_sub: int = DEFAULT_N_SUB, v_eps: float = V_EPS) -> ReducedState:
    """Advance the reduced engine one control tick; ring index is untouched."""
    ring = min(x.ring, geom.n_rings - 1)
    beta, gamma, theta, theta_dot = step_reduced_raw(
        (x.beta, x.gamma, x.theta, x.theta_dot), (u.ux, u.uy),
        geom.ring_radii[ring], mu, servo, geom.marble_mass, dt, n_sub, v_eps)
    return ReducedState(beta=beta, gamma=gamma, theta=theta,
                        theta_dot=theta_dot, ring=x.ring)


def step_full(x: FullState, u: Action, mu: FrictionParams, dt: float,
              servo: ServoParams, geom: MazeGeometry,
              params: FullModelParams = FullModelParams(),
              n_sub: int = DEFAULT_N_SUB, v_eps: float = V_EPS) -> FullState:
    """Advance the full engine one control tick.

    Radial motion is clamped to the current channel with restitution at the
    walls. While the marble sits inside a gate arc (or has already dropped
    below the channel) the inner wall opens into the corridor toward the next
    ring; crossing bookkeeping (ring increments, goal detection) is left to
    the caller, which reads the returned ``rho``.
    """
    if x.ring >= geom.n_rings:
        raise IntegrationError("cannot step the full model past the goal ring")
    if dt <= 0:
        raise ValueError("dt must be positive")
    beta, gamma, theta, theta_dot = x.beta, x.gamma, x.theta, x.theta_dot
    rho, rho_dot, spin = x.rho, x.rho_dot, x.spin
    ring = x.ring

    h = dt / n_sub
    k_lag = 1.0 - math.exp(-h / servo.tau)
    slew = servo.rate_limit * h
    tilt = servo.max_tilt
    tx = min(1.0, max(-1.0, u.ux)) * tilt
    ty = min(1.0, max(-1.0, u.uy)) * tilt
    spin_decay = math.exp(-mu.spin * h)
    e_wall = params.wall_restitution

    lo_chan, hi_chan = geom.channel_bounds(ring)
    if ring + 1 < geom.n_rings:
        lo_open = geom.channel_bounds(ring + 1)[0]
    else:
        lo_open = geom.marble_radius  # goal region; caller ends the episode

    for _ in range(n_sub):
        beta_prev, gamma_prev = beta, gamma
        db = k_lag * (tx - beta)
        dg = k_lag * (ty - gamma)
        db = min(slew, max(-slew, db))
        dg = min(slew, max(-slew, dg))
        beta = min(tilt, max(-tilt, beta + db))
        gamma = min(tilt, max(-tilt, gamma + dg))

        sb = math.sin(0.5 * (beta_prev + beta))
        sg = math.sin(0.5 * (gamma_prev + gamma))
        ct, st = math.cos(theta), math.sin(theta)
        theta_mid = theta + 0.5 * h * theta_dot
        a_grav = (GRAVITY / rho) * (
            sg * math.cos(theta_mid) - sb * math.sin(theta_mid))
        a_drive = a_grav + params.kappa_spin * spin - 2.0 * rho_dot * theta_dot / rho
        a_cm = GRAVITY * mu.slide / rho
        a_floss = GRAVITY * mu.floss / rho
        c_visc = mu.roll / (geom.marble_mass * rho * rho)
        theta, theta_dot = _coulomb_update(theta, theta_dot, a_drive, abs(a_grav),
                                           a_cm, a_floss, c_visc, h, v_eps)

        # corridor occupancy must be judged before the radial update so a fast
        # marble cannot tunnel through a closed wall within one substep
        gate_open = geom.gate_open(ring, theta) or rho < lo_chan
        a_r = rho * theta_dot * theta_dot + GRAVITY * (sb * ct + sg * st)
        rho_dot += h * a_r
        rho += h * rho_dot
        lo = lo_open if gate_open else lo_chan
        if rho > hi_chan:
            rho = hi_chan
            if rho_dot > 0.0:
                rho_dot = -e_wall * rho_dot
        elif rho < lo:
            rho = lo
            if rho_dot < 0.0:
                rho_dot = -e_wall * rho_dot

        spin *= spin_decay

    out = FullState(beta=beta, gamma=gamma, theta=theta, theta_dot=theta_dot,
                    ring=ring, rho=rho, rho_dot=rho_dot, spin=spin)
    if not all(math.isfinite(v) for v in (beta, gamma, theta, theta_dot, rho, rho_dot, spin)):
        raise IntegrationError("full step produced non-finite state")
    return out


class ReducedEngine:
    """Reduced physics bound to a geometry, friction set, servo, and tick.

    One-step model used by estimation, residual learning, and the planners.
    ``step_single``/``step_batch`` work on raw arrays for speed; ``step``
    mirrors the dataclass interface.
    """

    def __init__(self, geom: MazeGeometry, mu: FrictionParams, servo: ServoParams,
                 dt: float = DEFAULT_DT, n_sub: int = DEFAULT_N_SUB,
                 v_eps: float = V_EPS):
        self.geom = geom
        self.mu = mu
        self.servo = servo
        self.dt = dt
        self.n_sub = n_sub
        self.v_eps = v_eps

    def with_friction(self, mu: FrictionParams) -> "ReducedEngine":
        return ReducedEngine(self.geom, mu, self.servo, self.dt, self.n_sub, self.v_eps)

    def ring_radius(self, ring: int) -> float:
        return self.geom.ring_radii[min(ring, self.geom.n_rings - 1)]

    def step(self, x: ReducedState, u: Action) -> ReducedState:
        return step_reduced(x, u, self.mu, self.dt, self.servo, self.geom,
                            self.n_sub, self.v_eps)

    def step_single(self, x4, u2, ring: int) -> np.ndarray:
        out = step_reduced_raw(x4, u2, self.ring_radius(ring), self.mu, self.servo,
                               self.geom.marble_mass, self.dt, self.n_sub, self.v_eps)
        return np.array(out)

    def step_batch(self, X: np.ndarray, U: np.ndarray, rings) -> np.ndarray:
        rings = np.asarray(rings)
        radii = np.asarray(self.geom.ring_radii)[np.minimum(rings, self.geom.n_rings - 1)]
        return step_reduced_batch(X, U, radii, self.mu, self.servo,
                                  self.geom.marble_mass, self.dt, self.n_sub, self.v_eps)

    def for_ring(self, ring: int) -> "RingModel":
        return RingModel(self, ring)


class RingModel:
    """A one-step model pinned to a single ring, as the planners see it."""

    def __init__(self, engine, ring: int):
        self.engine = engine
        self.ring = int(ring)

    def step(self, x4, u2) -> np.ndarray:
        return self.engine.step_single(x4, u2, self.ring)

    def step_batch(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return self.engine.step_batch(X, U, np.full(X.shape[0], self.ring))
