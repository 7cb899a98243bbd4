import math

import numpy as np
import pytest

from tiltmaze.control import (
    breakaway_init,
    CostSpec,
    IlqrError,
    ReferenceTrajectory,
    ilqr_solve,
    linearize,
    linearize_trajectory,
    nmpc_tick,
    riccati_lqr,
)
from tiltmaze.dynamics import (
    FULL_MODEL_FRICTION,
    Action,
    FrictionParams,
    ReducedEngine,
    ReducedState,
)
from tiltmaze.geometry import MazeGeometry, wrap_angle
from tiltmaze.motor import ServoParams

GEOM = MazeGeometry()
SERVO = ServoParams()
ENGINE = ReducedEngine(GEOM, FULL_MODEL_FRICTION, SERVO)
DT = ENGINE.dt
COST = CostSpec()


class LinearModel:
    """x' = A x + B u test double with the planner's model interface."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def step_batch(self, X, U):
        return X @ self.A.T + U @ self.B.T


def double_integrator(dt=DT):
    A = np.array([[1.0, dt, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, dt],
                  [0.0, 0.0, 0.0, 1.0]])
    B = np.array([[0.5 * dt * dt, 0.0],
                  [dt, 0.0],
                  [0.0, 0.5 * dt * dt],
                  [0.0, dt]])
    return LinearModel(A, B)


class SmoothModel:
    """Analytic nonlinear map with a closed-form Jacobian, for FD checks."""

    def step(self, x, u):
        return np.array([
            math.sin(x[0]) + 0.1 * u[0],
            x[1] * x[1] * 0.05 + 0.2 * math.cos(u[1]) * x[0],
            0.3 * math.tanh(x[2]) + 0.05 * u[0] * u[1],
            x[3] + 0.1 * math.sin(x[2]),
        ])

    def jacobians(self, x, u):
        A = np.zeros((4, 4))
        B = np.zeros((4, 2))
        A[0, 0] = math.cos(x[0])
        B[0, 0] = 0.1
        A[1, 1] = 0.1 * x[1]
        A[1, 0] = 0.2 * math.cos(u[1])
        B[1, 1] = -0.2 * math.sin(u[1]) * x[0]
        A[2, 2] = 0.3 / math.cosh(x[2]) ** 2
        B[2, 0] = 0.05 * u[1]
        B[2, 1] = 0.05 * u[0]
        A[3, 3] = 1.0
        A[3, 2] = 0.1 * math.cos(x[2])
        return A, B


class TestLinearize:
    def test_exact_on_linear_model(self):
        model = double_integrator()
        x = np.array([0.3, -0.2, 0.1, 0.5])
        u = np.array([0.2, -0.4])
        A, B = linearize(model.step, x, u)
        np.testing.assert_allclose(A, model.A, atol=1e-8)
        np.testing.assert_allclose(B, model.B, atol=1e-8)

    def test_coasting_theta_sensitivity(self):
        # frictionless flat engine: d(theta')/d(theta_dot) = dt
        eng = ReducedEngine(GEOM, FrictionParams(0, 0, 0, 0), SERVO)
        model = eng.for_ring(0)
        x = np.array([0.0, 0.0, 0.2, 1.0])
        u = np.zeros(2)
        A, _ = linearize(model.step, x, u)
        assert np.isclose(A[2, 3], DT, atol=1e-9)
        assert np.isclose(A[2, 2], 1.0, atol=1e-7)

    def test_richardson_ratio(self):
        model = SmoothModel()
        x = np.array([0.4, -0.3, 0.6, 0.2])
        u = np.array([0.3, -0.5])
        A_true, B_true = model.jacobians(x, u)
        h = 1e-3
        A1, B1 = linearize(model.step, x, u, wrap_theta=False, h_scale=h)
        A2, B2 = linearize(model.step, x, u, wrap_theta=False, h_scale=h / 2)
        e1 = np.abs(A1 - A_true) + np.abs(B1 - B_true).sum()
        e2 = np.abs(A2 - A_true) + np.abs(B2 - B_true).sum()
        mask = e1 > 1e-10
        ratios = e1[mask] / np.maximum(e2[mask], 1e-300)
        assert np.median(ratios) == pytest.approx(4.0, rel=0.35)

    def test_batched_matches_single(self):
        model = ENGINE.for_ring(1)
        rng = np.random.default_rng(0)
        X = np.column_stack([rng.uniform(-0.1, 0.1, 6), rng.uniform(-0.1, 0.1, 6),
                             rng.uniform(-3, 3, 6), rng.uniform(-2, 2, 6)])
        U = rng.uniform(-0.5, 0.5, (6, 2))
        X_traj = np.vstack([X, X[-1:]])
        A_b, B_b = linearize_trajectory(model, X_traj, U)
        for k in range(6):
            A_s, B_s = linearize(model.step, X[k], U[k])
            np.testing.assert_allclose(A_b[k], A_s, atol=1e-12)
            np.testing.assert_allclose(B_b[k], B_s, atol=1e-12)

    def test_nonfinite_model_raises(self):
        def bad(x, u):
            return np.full(4, math.nan)

        with pytest.raises(IlqrError):
            linearize(bad, np.zeros(4), np.zeros(2))


class TestIlqrSolve:
    def test_already_at_target(self):
        model = ENGINE.for_ring(0)
        x0 = np.array([0.0, 0.0, 1.0, 0.0])
        ref = ilqr_solve(model, x0, x0, T=15, cost=COST)
        assert ref.cost < 1e-12
        np.testing.assert_allclose(ref.U, 0.0, atol=1e-9)

    def test_matches_riccati_on_double_integrator(self):
        model = double_integrator()
        w = COST.w_arr()
        lam = COST.lambda_u
        T = 25
        x0 = np.array([0.05, 0.0, -0.04, 0.02])
        ref = ilqr_solve(model, x0, np.zeros(4), T=T, cost=COST)
        assert ref.iterations <= 2

        gains = riccati_lqr(model.A, model.B, w, lam, T)
        x = x0.copy()
        X_opt = [x0.copy()]
        U_opt = []
        for k in range(T):
            u = -gains[k] @ x
            U_opt.append(u)
            x = model.step(x, u)
            X_opt.append(x.copy())
        np.testing.assert_allclose(ref.U, np.array(U_opt), atol=1e-6)
        np.testing.assert_allclose(ref.X, np.array(X_opt), atol=1e-6)
        for k in range(T):
            np.testing.assert_allclose(ref.K[k], -gains[k], atol=1e-6)

    def test_cost_never_worse_than_zero_control(self):
        model = ENGINE.for_ring(0)
        x0 = np.array([0.0, 0.0, -1.5, 0.5])
        target = np.array([0.0, 0.0, 0.0, 0.0])
        zero_ref = ilqr_solve(model, x0, target, T=30, cost=COST, max_iter=0)
        ref = ilqr_solve(model, x0, target, T=30, cost=COST)
        assert ref.cost <= zero_ref.cost

    def test_cost_monotone_per_iteration(self):
        model = ENGINE.for_ring(0)
        x0 = np.array([0.0, 0.0, 2.0, 0.3])
        target = np.array([0.0, 0.0, 0.5, 0.0])
        ref = ilqr_solve(model, x0, target, T=30, cost=COST)
        hist = ref.cost_history
        assert len(hist) >= 2
        assert all(b <= a for a, b in zip(hist, hist[1:]))

    def test_breakaway_init_unsticks_rest_state(self):
        # from exact rest the Coulomb hold hides all control authority from
        # the zero-init solve; the breakaway kick makes the problem solvable
        model = ENGINE.for_ring(0)
        x0 = np.array([0.0, 0.0, 2.0, 0.0])
        target = np.array([0.0, 0.0, 0.5, 0.0])
        stuck = ilqr_solve(model, x0, target, T=45, cost=COST)
        kicked = ilqr_solve(model, x0, target, T=45, cost=COST,
                            init_U=breakaway_init(x0, 0.5, 45))
        assert kicked.cost < stuck.cost
        # the optimized trajectory actually approaches the target angle
        final_err = abs(wrap_angle(kicked.X[-1][2] - 0.5))
        assert final_err < abs(wrap_angle(2.0 - 0.5))

    def test_actions_clamped(self):
        model = ENGINE.for_ring(0)
        x0 = np.array([0.0, 0.0, -3.0, 4.0])
        target = np.array([0.0, 0.0, 3.0, 0.0])
        ref = ilqr_solve(model, x0, target, T=20, cost=CostSpec(lambda_u=0.01))
        assert np.all(np.abs(ref.U) <= 1.0 + 1e-12)

    def test_wrap_shift_invariance(self):
        model = ENGINE.for_ring(1)
        x0 = np.array([0.0, 0.0, 2.5, -0.5])
        target = np.array([0.0, 0.0, -2.8, 0.0])
        two_pi = 2 * math.pi
        ref_a = ilqr_solve(model, x0, target, T=20, cost=COST)
        ref_b = ilqr_solve(model, x0 + np.array([0, 0, two_pi, 0]),
                           target + np.array([0, 0, two_pi, 0]), T=20, cost=COST)
        np.testing.assert_allclose(ref_a.U, ref_b.U, atol=1e-9)

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            ilqr_solve(ENGINE.for_ring(0), np.zeros(4), np.zeros(4), T=0, cost=COST)


class TestNmpcTick:
    def make_ref(self, ring=0, theta0=-1.2, gate=0.0, T=45):
        model = ENGINE.for_ring(ring)
        x0 = np.array([0.0, 0.0, theta0, 0.0])
        target = np.array([0.0, 0.0, gate, 0.0])
        ref = ilqr_solve(model, x0, target, T=T, cost=COST,
                         init_U=breakaway_init(x0, gate, T))
        assert np.max(np.abs(ref.U)) > 0.01  # a real maneuver, not a stuck plan
        return model, ref

    def test_on_reference_returns_reference_action(self):
        model, ref = self.make_ref()
        k = 5
        u, _, info = nmpc_tick(model, ref.X[k], ref, k, H=10, cost=COST)
        assert not info.fallback
        np.testing.assert_allclose(u, ref.U[k], atol=1e-8)

    def test_warm_start_cuts_iterations(self):
        # world evolving exactly along the reference: the warm start carries
        # yesterday's solution and needs (at least 2x) fewer improvement
        # iterations than a cold start that re-derives the plan from zeros
        model, ref = self.make_ref()
        warm = None
        cold_total, warm_total = 0, 0
        for k in range(2, 10):
            x = ref.X[k]
            _, warm, info_w = nmpc_tick(model, x, ref, k, H=10, cost=COST,
                                        warm=warm, iter_cap=50, tol=1e-8)
            _, _, info_c = nmpc_tick(model, x, ref, k, H=10, cost=COST,
                                     warm=np.zeros((10, 2)), iter_cap=50, tol=1e-8)
            warm_total += info_w.improvements
            cold_total += info_c.improvements
        assert cold_total >= 2 * max(warm_total, 1)

    def test_perturbation_opposed(self):
        # nudge theta ahead of the reference: the one-step effect of the
        # corrected action must push the error back versus the nominal action
        model, ref = self.make_ref()
        k = 10
        x = ref.X[k].copy()
        x[2] = wrap_angle(x[2] + 0.01)
        u, _, _ = nmpc_tick(model, x, ref, k, H=10, cost=COST)
        nxt_corrected = model.step(x, u)
        nxt_nominal = model.step(x, ref.U[k])
        err_corrected = abs(wrap_angle(nxt_corrected[2] - ref.X[k + 1][2]))
        err_nominal = abs(wrap_angle(nxt_nominal[2] - ref.X[k + 1][2]))
        assert err_corrected < err_nominal

    def test_reference_end_is_held(self):
        model, ref = self.make_ref(T=20)
        k = 19
        u, warm, info = nmpc_tick(model, ref.X[-1], ref, k, H=10, cost=COST)
        assert not info.fallback
        assert warm.shape == (10, 2)

    def test_fallback_on_broken_model(self):
        model, ref = self.make_ref()

        class Broken:
            def step(self, x, u):
                return np.full(4, math.nan)

            def step_batch(self, X, U):
                return np.full((X.shape[0], 4), math.nan)

        u, warm, info = nmpc_tick(Broken(), ref.X[3], ref, 3, H=10, cost=COST)
        assert info.fallback
        assert np.all(np.isfinite(u))
        np.testing.assert_allclose(u, ref.U[3], atol=1e-9)  # on-ref fallback = ref action

    def test_emitted_actions_in_bounds(self):
        model, ref = self.make_ref()
        rng = np.random.default_rng(5)
        warm = None
        for k in range(15):
            x = ref.X[min(k, ref.horizon)] + rng.normal(0, 0.05, 4)
            u, warm, _ = nmpc_tick(model, x, ref, k, H=10, cost=COST, warm=warm)
            assert np.all(np.abs(u) <= 1.0 + 1e-12)


class TestTickLatency:
    def test_latency_measured_and_reported(self):
        import time

        model, ref = (lambda m, r: (m, r))(*(
            (ENGINE.for_ring(0),
             ilqr_solve(ENGINE.for_ring(0), np.array([0.0, 0.0, -1.2, 0.0]),
                        np.array([0.0, 0.0, 0.0, 0.0]), T=45, cost=COST))))
        rng = np.random.default_rng(7)
        warm = None
        times = []
        for k in range(30):
            x = ref.X[min(k, ref.horizon)] + rng.normal(0, 0.01, 4)
            t0 = time.perf_counter()
            _, warm, _ = nmpc_tick(model, x, ref, k, H=10, cost=COST, warm=warm)
            times.append(time.perf_counter() - t0)
        mean_ms = 1000 * float(np.mean(times))
        p95_ms = 1000 * float(np.quantile(times, 0.95))
        print(f"\nnmpc tick latency: mean {mean_ms:.2f} ms, p95 {p95_ms:.2f} ms "
              f"(soft budget {1000 / 30:.1f} ms)")
        # soft deadline: do not hard-fail CI on a slow machine, but a tick
        # should never be catastrophically slow
        assert p95_ms < 500.0
