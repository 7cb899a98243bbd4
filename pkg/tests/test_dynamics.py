import math

import numpy as np
import pytest

from tiltmaze.dynamics import (
    DEFAULT_DT,
    FULL_MODEL_FRICTION,
    GRAVITY,
    REDUCED_MODEL_FRICTION,
    Action,
    FrictionParams,
    FullModelParams,
    FullState,
    ReducedEngine,
    ReducedState,
    embed,
    inject_noise,
    observe,
    step_full,
    step_reduced,
    step_reduced_batch,
    step_reduced_raw,
    tangential_accel,
)
from tiltmaze.geometry import MazeGeometry, wrap_angle
from tiltmaze.motor import ServoParams

GEOM = MazeGeometry()
SERVO = ServoParams()
DT = DEFAULT_DT
MU_ZERO = FrictionParams(0.0, 0.0, 0.0, 0.0)


def reference_integrate_reduced(state, action, ring_radius, mu, servo, mass,
                                duration, h=1e-5, v_eps=1e-3):
    """Independent fine-step explicit-Euler integrator of the same ODE.

    Servo lag integrated as d(angle)/dt = (target - angle)/tau with the rate
    cap applied to the derivative; friction follows the same Karnopp rules.
    """
    beta, gamma, theta, theta_dot = state
    ux = min(1.0, max(-1.0, action[0]))
    uy = min(1.0, max(-1.0, action[1]))
    tx, ty = ux * servo.max_tilt, uy * servo.max_tilt
    a_cm = GRAVITY * mu.slide / ring_radius
    a_floss = GRAVITY * mu.floss / ring_radius
    c_visc = mu.roll / (mass * ring_radius ** 2)
    steps = int(round(duration / h))
    for _ in range(steps):
        db = max(-servo.rate_limit, min(servo.rate_limit, (tx - beta) / servo.tau))
        dg = max(-servo.rate_limit, min(servo.rate_limit, (ty - gamma) / servo.tau))
        beta = max(-servo.max_tilt, min(servo.max_tilt, beta + h * db))
        gamma = max(-servo.max_tilt, min(servo.max_tilt, gamma + h * dg))
        a_grav = (GRAVITY / ring_radius) * (
            math.sin(gamma) * math.cos(theta) - math.sin(beta) * math.sin(theta))
        if abs(theta_dot) < v_eps and abs(a_grav) <= a_cm + a_floss:
            theta_dot = 0.0
            continue
        s = math.copysign(1.0, theta_dot) if theta_dot != 0 else (
            math.copysign(1.0, a_grav) if a_grav != 0 else 0.0)
        a = a_grav - a_cm * s - c_visc * theta_dot
        v_new = theta_dot + h * a
        if s != 0.0 and v_new * s < 0.0 and abs(a_grav) <= a_cm:
            v_new = 0.0
        theta = wrap_angle(theta + h * theta_dot)
        theta_dot = v_new
    return beta, gamma, theta, theta_dot


class TestTangentialAccel:
    def test_flat_platform(self):
        for theta in np.linspace(-3, 3, 7):
            assert tangential_accel(0.0, 0.0, float(theta), 0.1) == 0.0

    def test_reference_value(self):
        a = tangential_accel(0.0, 0.1, 0.0, 0.1)
        assert np.isclose(a, 9.81 * math.sin(0.1) / 0.1, rtol=1e-12)
        assert np.isclose(a, 9.7937, atol=5e-4)

    def test_odd_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            b, g = rng.uniform(-0.15, 0.15, 2)
            t = rng.uniform(-math.pi, math.pi)
            assert np.isclose(tangential_accel(b, g, t, 0.08),
                              -tangential_accel(-b, -g, t, 0.08), rtol=1e-12)

    def test_matches_potential_gradient(self):
        # oracle: a_t = -(1/(m r^2)) dU/dtheta with U = -m g r (sin b cos t + sin g sin t)
        m, r = GEOM.marble_mass, 0.1
        b, g = 0.07, -0.04

        def potential(theta):
            return -m * GRAVITY * r * (math.sin(b) * math.cos(theta)
                                       + math.sin(g) * math.sin(theta))

        for theta in np.linspace(-3, 3, 11):
            h = 1e-6
            dU = (potential(theta + h) - potential(theta - h)) / (2 * h)
            oracle = -dU / (m * r * r)
            assert np.isclose(tangential_accel(b, g, float(theta), r), oracle, atol=1e-6)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            tangential_accel(0.0, 0.0, 0.0, 0.0)


class TestStepReduced:
    def test_equilibrium(self):
        x = ReducedState(0.0, 0.0, 0.4, 0.0, ring=1)
        out = step_reduced(x, Action(0.0, 0.0), REDUCED_MODEL_FRICTION, DT, SERVO, GEOM)
        assert out == x

    def test_frictionless_coasting(self):
        x = ReducedState(0.0, 0.0, 0.0, 1.0, ring=0)
        out = step_reduced(x, Action(0.0, 0.0), MU_ZERO, DT, SERVO, GEOM)
        assert np.isclose(out.theta, DT, atol=1e-12)
        assert out.theta_dot == 1.0

    def test_reference_integrator_hold_case(self):
        # sub-breakaway tilt with the sticky defaults: both integrators hold
        x = (0.0, 0.05, 0.0, 0.0)
        u = (0.0, 0.05 / SERVO.max_tilt)
        coarse = step_reduced_raw(x, u, 0.1, REDUCED_MODEL_FRICTION, SERVO,
                                  GEOM.marble_mass, DT, 10)
        fine = reference_integrate_reduced(x, u, 0.1, REDUCED_MODEL_FRICTION, SERVO,
                                           GEOM.marble_mass, DT)
        assert abs(coarse[2] - fine[2]) < 1e-4
        assert coarse[2] == 0.0 and coarse[3] == 0.0

    def test_reference_integrator_moving_case(self):
        mu = FrictionParams(slide=0.01, spin=0.0, roll=1e-5, floss=0.0)
        x = (0.0, 0.0, 0.3, 2.0)
        u = (0.4, -0.2)
        coarse = step_reduced_raw(x, u, 0.1, mu, SERVO, GEOM.marble_mass, DT, 10)
        fine = reference_integrate_reduced(x, u, 0.1, mu, SERVO, GEOM.marble_mass, DT)
        assert abs(wrap_angle(coarse[2] - fine[2])) < 1e-4
        assert abs(coarse[3] - fine[3]) < 1e-3

    def test_stiction_holds_forever(self):
        mu = FrictionParams(slide=0.0, spin=0.0, roll=0.0, floss=0.05)
        # tilt small enough that |a_grav| < floss*g/r
        tilt = 0.5 * math.asin(0.05)
        x = ReducedState(0.0, tilt, 0.0, 0.0, ring=0)
        u = Action(0.0, tilt / SERVO.max_tilt)
        for _ in range(200):
            x = step_reduced(x, u, mu, DT, SERVO, GEOM)
        assert x.theta == 0.0
        assert x.theta_dot == 0.0

    def test_breakaway_above_threshold(self):
        mu = FrictionParams(slide=0.0, spin=0.0, roll=0.0, floss=0.05)
        tilt = 2.0 * math.asin(0.05)
        x = ReducedState(tilt, tilt, 0.0, 0.0, ring=0)
        u = Action(tilt / SERVO.max_tilt, tilt / SERVO.max_tilt)
        for _ in range(30):
            x = step_reduced(x, u, mu, DT, SERVO, GEOM)
        assert x.theta != 0.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(7)
        X = np.column_stack([
            rng.uniform(-0.15, 0.15, 64),
            rng.uniform(-0.15, 0.15, 64),
            rng.uniform(-math.pi, math.pi, 64),
            rng.uniform(-5, 5, 64),
        ])
        U = rng.uniform(-1, 1, (64, 2))
        mu = FrictionParams(0.02, 1e-4, 1e-5, 1e-3)
        batch = step_reduced_batch(X, U, np.full(64, 0.08), mu, SERVO, GEOM.marble_mass)
        for i in range(64):
            single = step_reduced_raw(X[i], U[i], 0.08, mu, SERVO, GEOM.marble_mass)
            np.testing.assert_allclose(batch[i], np.array(single), atol=1e-12)

    def test_determinism(self):
        x0 = ReducedState(0.01, -0.02, 1.0, 0.5, ring=1)
        u = Action(0.3, -0.6)

        def run():
            x = x0
            out = []
            for _ in range(50):
                x = step_reduced(x, u, FULL_MODEL_FRICTION, DT, SERVO, GEOM)
                out.append(x.as_array())
            return np.array(out)

        np.testing.assert_array_equal(run(), run())

    def test_integrator_convergence_on_dt_halving(self):
        # 1 s trajectory: halving the substep changes final theta < 1e-3 rad
        mu = FULL_MODEL_FRICTION
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x_a = x_b = ReducedState(0.0, 0.0, float(rng.uniform(-3, 3)),
                                     float(rng.uniform(-2, 2)), ring=0)
            for k in range(30):
                u = Action(float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5)))
                x_a = step_reduced(x_a, u, mu, DT, SERVO, GEOM, n_sub=10)
                x_b = step_reduced(x_b, u, mu, DT, SERVO, GEOM, n_sub=20)
            assert abs(wrap_angle(x_a.theta - x_b.theta)) < 1e-3

    def test_energy_decay_passive_rollout(self):
        # u = 0: platform settles flat, then the energy proxy never increases
        m = GEOM.marble_mass
        for mu in (REDUCED_MODEL_FRICTION, FULL_MODEL_FRICTION,
                   FrictionParams(0.05, 0.0, 1e-5, 0.0)):
            for seed in range(3):
                rng = np.random.default_rng(seed)
                x = ReducedState(float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.1, 0.1)),
                                 float(rng.uniform(-3, 3)), float(rng.uniform(-4, 4)), ring=0)
                r = GEOM.ring_radii[0]
                u = Action(0.0, 0.0)
                for _ in range(60):  # settle: tilts decay to ~1e-17
                    x = step_reduced(x, u, mu, DT, SERVO, GEOM)
                prev = None
                for _ in range(1000):
                    x = step_reduced(x, u, mu, DT, SERVO, GEOM)
                    kinetic = 0.5 * m * r * r * x.theta_dot ** 2
                    potential = -m * GRAVITY * r * (math.sin(x.beta) * math.cos(x.theta)
                                                    + math.sin(x.gamma) * math.sin(x.theta))
                    energy = kinetic + potential
                    if prev is not None:
                        assert energy <= prev + 1e-15
                    prev = energy


class TestStepFull:
    def full_rest(self, ring=0):
        return FullState(beta=0.0, gamma=0.0, theta=0.5, theta_dot=0.0, ring=ring,
                         rho=GEOM.ring_radii[ring], rho_dot=0.0, spin=0.0)

    def test_equilibrium(self):
        x = self.full_rest()
        out = step_full(x, Action(0.0, 0.0), FULL_MODEL_FRICTION, DT, SERVO, GEOM)
        assert out == x

    def test_spin_decay_closed_form(self):
        x = FullState(0.0, 0.0, 0.5, 0.0, 0, GEOM.ring_radii[0], 0.0, 1.0)
        mu = FrictionParams(slide=1.0, spin=1e-6, roll=0.0, floss=0.0)
        out = step_full(x, Action(0.0, 0.0), mu, DT, SERVO, GEOM)
        assert np.isclose(out.spin, math.exp(-1e-6 * DT), rtol=1e-14)

    def test_wall_clamp_keeps_marble_in_channel(self):
        lo, hi = GEOM.channel_bounds(0)
        # start at the outer wall moving inward, away from any gate opening
        theta0 = 0.7
        assert not GEOM.gate_open(0, theta0)
        x = FullState(0.0, 0.0, theta0, 0.0, 0, hi, -0.5, 0.0)
        for _ in range(30):
            x = step_full(x, Action(0.0, 0.0), FULL_MODEL_FRICTION, DT, SERVO, GEOM)
            assert lo - 1e-12 <= x.rho <= hi + 1e-12

    def test_outward_push_respects_outer_wall(self):
        lo, hi = GEOM.channel_bounds(0)
        x = FullState(0.0, 0.0, 0.0, 3.0, 0, GEOM.ring_radii[0], 0.0, 0.0)
        for _ in range(60):
            x = step_full(x, Action(0.0, 0.0), FULL_MODEL_FRICTION, DT, SERVO, GEOM)
            assert x.rho <= hi + 1e-12

    def test_gate_corridor_allows_descent(self):
        # marble parked in the ring-0 gate at theta=0, tilted hard inward
        x = FullState(0.0, 0.0, 0.0, 0.0, 0, GEOM.channel_bounds(0)[0], 0.0, 0.0)
        u = Action(-0.6, 0.0)  # tilt the +x side up -> inward push at theta=0
        crossed = False
        for _ in range(30):
            x = step_full(x, u, FULL_MODEL_FRICTION, DT, SERVO, GEOM)
            if x.rho <= GEOM.channel_bounds(1)[1]:
                crossed = True
                break
        assert crossed

    def test_closed_wall_blocks_descent(self):
        theta0 = 0.7  # far from both ring-0 gates
        assert not GEOM.gate_open(0, theta0)
        lo, _ = GEOM.channel_bounds(0)
        x = FullState(0.0, 0.0, theta0, 0.0, 0, GEOM.ring_radii[0], 0.0, 0.0)
        u = Action(-0.6 * math.cos(theta0), -0.6 * math.sin(theta0))
        for _ in range(30):
            x = step_full(x, u, FULL_MODEL_FRICTION, DT, SERVO, GEOM)
        assert x.rho >= lo - 1e-12

    def test_model_gap_exists_for_probe_trajectory(self):
        # the reduced prediction from the observed state must differ from the
        # projected full step when spin or radial offset is in play
        x_full = FullState(0.02, -0.01, 0.3, 2.0, 0,
                           GEOM.channel_bounds(0)[1], 0.0, 3.0)
        u = Action(0.2, 0.1)
        nxt_full = observe(step_full(x_full, u, FULL_MODEL_FRICTION, DT, SERVO, GEOM))
        nxt_red = step_reduced(observe(x_full), u, FULL_MODEL_FRICTION, DT, SERVO, GEOM)
        gap = abs(wrap_angle(nxt_full.theta - nxt_red.theta)) + \
            abs(nxt_full.theta_dot - nxt_red.theta_dot)
        assert gap > 1e-6

    def test_goal_ring_step_rejected(self):
        x = FullState(0.0, 0.0, 0.0, 0.0, 4, 0.02, 0.0, 0.0)
        from tiltmaze.dynamics import IntegrationError
        with pytest.raises(IntegrationError):
            step_full(x, Action(0.0, 0.0), FULL_MODEL_FRICTION, DT, SERVO, GEOM)


class TestObserveEmbed:
    def test_projection_drops_hidden_state(self):
        a = FullState(0.1, 0.2, 0.3, 0.4, 1, 0.081, 0.01, 5.0)
        b = FullState(0.1, 0.2, 0.3, 0.4, 1, 0.079, -0.02, -1.0)
        assert observe(a) == observe(b)

    def test_observe_embed_identity(self):
        x = ReducedState(0.05, -0.02, 1.2, -0.3, ring=2)
        assert observe(embed(x, GEOM)) == x

    def test_embed_center_line(self):
        x = ReducedState(0.0, 0.0, 0.0, 0.0, ring=1)
        full = embed(x, GEOM)
        assert full.rho == GEOM.ring_radii[1]
        assert full.rho_dot == 0.0 and full.spin == 0.0


class TestInjectNoise:
    def test_zero_sigma_identity(self):
        x = ReducedState(0.1, 0.2, 0.3, 0.4, ring=1)
        assert inject_noise(x, (0.0, 0.0), 0) == x

    def test_seed_determinism(self):
        x = ReducedState(0.1, 0.2, 0.3, 0.4, ring=1)
        a = inject_noise(x, (1e-3, 1e-2), 42)
        b = inject_noise(x, (1e-3, 1e-2), 42)
        assert a == b
        c = inject_noise(x, (1e-3, 1e-2), 43)
        assert c != a

    def test_sample_mean_near_zero(self):
        x = ReducedState(0.0, 0.0, 0.0, 0.0, ring=0)
        rng = np.random.default_rng(0)
        n = 100_000
        thetas = np.empty(n)
        for i in range(n):
            thetas[i] = inject_noise(x, (1e-3, 1e-2), rng).theta
        assert abs(thetas.mean()) < 3 * 1e-3 / math.sqrt(n)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            inject_noise(ReducedState(0, 0, 0, 0), (-1.0, 0.0), 0)


class TestEngineWrapper:
    def test_engine_step_matches_function(self):
        eng = ReducedEngine(GEOM, FULL_MODEL_FRICTION, SERVO)
        x = ReducedState(0.01, 0.02, 0.5, 1.0, ring=2)
        u = Action(0.1, -0.1)
        a = eng.step(x, u)
        b = step_reduced(x, u, FULL_MODEL_FRICTION, DT, SERVO, GEOM)
        assert a == b

    def test_ring_model_binding(self):
        eng = ReducedEngine(GEOM, FULL_MODEL_FRICTION, SERVO)
        m = eng.for_ring(2)
        x = np.array([0.0, 0.05, 0.3, 1.0])
        u = np.array([0.0, 0.0])
        np.testing.assert_array_equal(m.step(x, u), eng.step_single(x, u, 2))
        X = np.tile(x, (5, 1))
        U = np.tile(u, (5, 1))
        np.testing.assert_allclose(m.step_batch(X, U)[0], m.step(x, u), atol=1e-12)


class TestFrictionParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            FrictionParams(-1.0, 0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            FrictionParams(math.nan, 0.0, 0.0, 0.0)

    def test_array_round_trip(self):
        mu = FrictionParams(1e-3, 1e-6, 1e-7, 1e-6)
        assert FrictionParams.from_array(mu.as_array()) == mu

    def test_action_clip(self):
        a = Action(3.0, -2.0).clipped()
        assert a == Action(1.0, -1.0)
