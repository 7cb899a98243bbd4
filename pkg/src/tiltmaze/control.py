"""Trajectory optimization (iLQR) and receding-horizon tracking (NMPC).

``ilqr_solve`` minimizes a quadratic cost on the wrapped state error to a
target plus a quadratic control penalty, subject to the one-step model, with
a Levenberg-regularized backward pass and a backtracking-line-search forward
pass. It returns the optimized states, controls, and the time-varying
feedback gains; together these form the reference trajectory.

``nmpc_tick`` re-solves a short tracking problem against that reference at
every control tick, warm-started from the previous tick's shifted solution
and capped to a small iteration budget so a tick always fits in the control
period. Tracking penalizes deviation from the reference states and controls,
so a marble exactly on the reference keeps the reference action. If the
solver fails, the tick falls back to the reference feedback law and flags it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle, wrap_angle_arr

THETA_INDEX = 2
REG_INIT = 0.0
REG_MIN = 1e-6
REG_MAX = 1e10
LINE_SEARCH_ALPHAS = tuple(0.5 ** i for i in range(11))


class IlqrError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Quadratic weights: W for planning, Q for tracking, lambda_u shared.

    ``terminal_scale`` multiplies the endpoint state cost during trajectory
    optimization. With the control penalty this heavy, a myopic horizon
    settles for hovering short of the target; the terminal anchor makes the
    plan actually arrive.
    """

    W: tuple[float, float, float, float] = (4.0, 4.0, 1.0, 0.4)
    lambda_u: float = 20.0
    Q: tuple[float, float, float, float] | None = None
    terminal_scale: float = 1.0

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.W) or self.lambda_u < 0 or self.terminal_scale < 0:
            raise ValueError("cost weights must be >= 0")
        if self.Q is None:
            object.__setattr__(self, "Q", tuple(self.W))

    def w_arr(self) -> np.ndarray:
        return np.asarray(self.W, dtype=float)

    def q_arr(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)


@dataclass
class ReferenceTrajectory:
    """Optimized states X (T+1,4), controls U (T,2), feedback gains K (T,2,4)."""

    X: np.ndarray
    U: np.ndarray
    K: np.ndarray
    cost: float = math.nan
    iterations: int = 0
    cost_history: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.X.shape[0] != self.U.shape[0] + 1:
            raise ValueError("need one more state than controls")

    @property
    def horizon(self) -> int:
        return self.U.shape[0]

    def state_ref(self, k: int) -> np.ndarray:
        return self.X[min(k, self.X.shape[0] - 1)]

    def control_ref(self, k: int) -> np.ndarray:
        if k < self.U.shape[0]:
            return self.U[k]
        return np.zeros(2)

    def gain(self, k: int) -> np.ndarray:
        return self.K[min(k, self.K.shape[0] - 1)]


@dataclass
class TickInfo:
    iterations: int
    cost: float
    fallback: bool = False
    improvements: int = 0   # line-search acceptances, i.e. iterations that did work


def _wrap_err(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    err = x - ref
    err[THETA_INDEX] = wrap_angle(err[THETA_INDEX])
    return err


def linearize(f, x, u, wrap_theta: bool = True,
              h_scale: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians (A, B) of a one-step model at (x, u).

    Steps are per-coordinate, h_i = h_scale * max(1, |z_i|); angular rows of
    the output difference are wrapped so seam crossings do not corrupt the
    derivative.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        h = h_scale * max(1.0, abs(x[i]))
        dx = np.zeros(n)
        dx[i] = h
        fp = np.asarray(f(x + dx, u), dtype=float)
        fm = np.asarray(f(x - dx, u), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise IlqrError(f"non-finite model output while linearizing state dim {i}")
        diff = fp - fm
        if wrap_theta:
            diff[THETA_INDEX] = wrap_angle(diff[THETA_INDEX])
        A[:, i] = diff / (2 * h)
    for j in range(m):
        h = h_scale * max(1.0, abs(u[j]))
        du = np.zeros(m)
        du[j] = h
        fp = np.asarray(f(x, u + du), dtype=float)
        fm = np.asarray(f(x, u - du), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise IlqrError(f"non-finite model output while linearizing control dim {j}")
        diff = fp - fm
        if wrap_theta:
            diff[THETA_INDEX] = wrap_angle(diff[THETA_INDEX])
        B[:, j] = diff / (2 * h)
    return A, B


def linearize_trajectory(model, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians along a trajectory via one batched model evaluation."""
    T, n = U.shape[0], X.shape[1]
    m = U.shape[1]
    hx = 1e-5 * np.maximum(1.0, np.abs(X[:T]))          # (T, n)
    hu = 1e-5 * np.maximum(1.0, np.abs(U))              # (T, m)

    n_pert = 2 * (n + m)
    Xp = np.repeat(X[:T][:, None, :], n_pert, axis=1)   # (T, 2(n+m), n)
    Up = np.repeat(U[:, None, :], n_pert, axis=1)
    for i in range(n):
        Xp[:, 2 * i, i] += hx[:, i]
        Xp[:, 2 * i + 1, i] -= hx[:, i]
    for j in range(m):
        col = 2 * n + 2 * j
        Up[:, col, j] += hu[:, j]
        Up[:, col + 1, j] -= hu[:, j]

    flat_out = model.step_batch(Xp.reshape(-1, n), Up.reshape(-1, m))
    out = flat_out.reshape(T, n_pert, n)
    if not np.all(np.isfinite(out)):
        raise IlqrError("non-finite model output while linearizing trajectory")

    A = np.empty((T, n, n))
    B = np.empty((T, n, m))
    for i in range(n):
        diff = out[:, 2 * i, :] - out[:, 2 * i + 1, :]
        diff[:, THETA_INDEX] = wrap_angle_arr(diff[:, THETA_INDEX])
        A[:, :, i] = diff / (2 * hx[:, i])[:, None]
    for j in range(m):
        col = 2 * n + 2 * j
        diff = out[:, col, :] - out[:, col + 1, :]
        diff[:, THETA_INDEX] = wrap_angle_arr(diff[:, THETA_INDEX])
        B[:, :, j] = diff / (2 * hu[:, j])[:, None]
    return A, B


def _rollout(model, x0: np.ndarray, U: np.ndarray) -> np.ndarray:
    X = np.empty((U.shape[0] + 1, x0.size))
    X[0] = x0
    for k in range(U.shape[0]):
        X[k + 1] = model.step(X[k], U[k])
    return X


def _trajectory_cost(X, U, x_ref, u_ref, w, lam, terminal_scale) -> float:
    err = X - x_ref
    err[:, THETA_INDEX] = wrap_angle_arr(err[:, THETA_INDEX])
    du = U - u_ref
    base = float(np.sum(err ** 2 @ w) + lam * np.sum(du ** 2))
    if terminal_scale != 1.0:
        base += (terminal_scale - 1.0) * float(err[-1] ** 2 @ w)
    return base


def _ilqr(model, x0, x_ref, u_ref, w, lam, init_U, max_iter, tol, u_limit,
          terminal_scale=1.0):
    """Shared iLQR core for planning (fixed target) and tracking (reference).

    ``x_ref`` is (T+1, 4); ``u_ref`` is (T, 2); the control penalty acts on
    u - u_ref. Returns (X, U, K, cost, iterations).
    """
    T = u_ref.shape[0]
    n = x0.size
    m = u_ref.shape[1]
    U = np.clip(np.array(init_U, dtype=float, copy=True), -u_limit, u_limit)
    X = _rollout(model, x0, U)
    cost = _trajectory_cost(X, U, x_ref, u_ref, w, lam, terminal_scale)
    if not math.isfinite(cost):
        raise IlqrError("initial rollout produced a non-finite cost")
    K_gains = np.zeros((T, m, n))
    reg = REG_INIT
    iterations = 0
    cost_history = [cost]
    diag_w2 = 2.0 * np.diag(w)
    eye_m = np.eye(m)

    for it in range(max_iter):
        iterations = it + 1
        A, B = linearize_trajectory(model, X, U)

        while True:
            k_ff = np.empty((T, m))
            K_fb = np.empty((T, m, n))
            err_T = _wrap_err(X[T].copy(), x_ref[T])
            Vx = 2.0 * terminal_scale * w * err_T
            Vxx = terminal_scale * diag_w2
            dv1 = 0.0
            dv2 = 0.0
            failed = False
            for k in range(T - 1, -1, -1):
                err = _wrap_err(X[k].copy(), x_ref[k])
                lx = 2.0 * w * err
                lu = 2.0 * lam * (U[k] - u_ref[k])
                Qx = lx + A[k].T @ Vx
                Qu = lu + B[k].T @ Vx
                Qxx = diag_w2 + A[k].T @ Vxx @ A[k]
                Quu = 2.0 * lam * eye_m + B[k].T @ Vxx @ B[k] + reg * eye_m
                Qux = B[k].T @ Vxx @ A[k]
                try:
                    cQ = np.linalg.cholesky(Quu)
                except np.linalg.LinAlgError:
                    failed = True
                    break
                rhs = np.column_stack([Qu, Qux])
                sol = np.linalg.solve(cQ.T, np.linalg.solve(cQ, rhs))
                k_ff[k] = -sol[:, 0]
                K_fb[k] = -sol[:, 1:]
                dv1 += float(k_ff[k] @ Qu)
                dv2 += 0.5 * float(k_ff[k] @ Quu @ k_ff[k])
                Vx = Qx + K_fb[k].T @ Quu @ k_ff[k] + K_fb[k].T @ Qu + Qux.T @ k_ff[k]
                Vxx = Qxx + K_fb[k].T @ Quu @ K_fb[k] + K_fb[k].T @ Qux + Qux.T @ K_fb[k]
                Vxx = 0.5 * (Vxx + Vxx.T)
            if not failed:
                break
            reg = max(reg * 10.0, REG_MIN)
            if reg > REG_MAX:
                raise IlqrError("backward pass not positive definite at maximum regularization")

        K_gains = K_fb
        # expected quadratic-model decrease at full step; if negligible the
        # solution is stationary and the line search would only burn rollouts
        if abs(dv1 + dv2) < 1e-12 * (1.0 + abs(cost)):
            break
        improved = False
        for alpha in LINE_SEARCH_ALPHAS:
            X_new = np.empty_like(X)
            U_new = np.empty_like(U)
            X_new[0] = x0
            for k in range(T):
                dx = _wrap_err(X_new[k].copy(), X[k])
                u = U[k] + alpha * k_ff[k] + K_fb[k] @ dx
                U_new[k] = np.clip(u, -u_limit, u_limit)
                X_new[k + 1] = model.step(X_new[k], U_new[k])
            cost_new = _trajectory_cost(X_new, U_new, x_ref, u_ref, w, lam,
                                        terminal_scale)
            # require a decrease beyond floating-point noise
            if math.isfinite(cost_new) and cost_new < cost - 1e-14 * (1.0 + abs(cost)):
                improved = True
                break
        if improved:
            rel_drop = (cost - cost_new) / max(abs(cost), 1e-12)
            X, U, cost = X_new, U_new, cost_new
            cost_history.append(cost)
            reg = 0.0 if reg <= REG_MIN else reg * 0.5
            if rel_drop < tol:
                break
        else:
            if np.max(np.abs(k_ff)) < 1e-10:
                break  # stationary: nothing left to improve
            reg = max(reg * 10.0, REG_MIN)
            if reg > REG_MAX:
                break

    return X, U, K_gains, cost, iterations, cost_history


def ilqr_solve(model, x0, target, T: int, cost: CostSpec,
               init_U: np.ndarray | None = None, max_iter: int = 100,
               tol: float = 1e-6, u_limit: float = 1.0) -> ReferenceTrajectory:
    """Optimize a T-step trajectory from ``x0`` toward a fixed target state."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    target = np.asarray(target, dtype=float)
    if init_U is None:
        init_U = np.zeros((T, 2))
    x_ref = np.tile(target, (T + 1, 1))
    u_ref = np.zeros((T, 2))
    X, U, K, final_cost, iters, history = _ilqr(model, x0, x_ref, u_ref, cost.w_arr(),
                                                cost.lambda_u, init_U, max_iter, tol,
                                                u_limit, cost.terminal_scale)
    return ReferenceTrajectory(X=X, U=U, K=K, cost=final_cost, iterations=iters,
                               cost_history=history)


def nmpc_tick(model, x_obs, ref: ReferenceTrajectory, k: int, H: int,
              cost: CostSpec, warm: np.ndarray | None = None,
              iter_cap: int = 3, u_limit: float = 1.0,
              tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, TickInfo]:
    """One tracking solve at tick ``k``; returns (action, warm carry, info).

    The reference is held at its terminal state beyond its horizon. On solver
    failure the reference feedback law acts as a fallback and the tick is
    flagged.
    """
    x_obs = np.asarray(x_obs, dtype=float)
    x_ref = np.stack([ref.state_ref(k + j) for j in range(H + 1)])
    u_ref = np.stack([ref.control_ref(k + j) for j in range(H)])
    if warm is None or warm.shape != (H, 2):
        init_U = u_ref.copy()
    else:
        init_U = warm
    try:
        X, U, K, solve_cost, iters, history = _ilqr(model, x_obs, x_ref, u_ref,
                                                    cost.q_arr(), cost.lambda_u,
                                                    init_U, iter_cap, tol, u_limit)
        warm_next = np.vstack([U[1:], U[-1:]])
        return U[0].copy(), warm_next, TickInfo(iterations=iters, cost=solve_cost,
                                                improvements=len(history) - 1)
    except (IlqrError, np.linalg.LinAlgError):
        dx = _wrap_err(x_obs.copy(), ref.state_ref(k))
        u = np.clip(ref.control_ref(k) + ref.gain(k) @ dx, -u_limit, u_limit)
        warm_next = np.tile(u, (H, 1))
        return u, warm_next, TickInfo(iterations=0, cost=math.nan, fallback=True)


def breakaway_init(x0, target_theta: float, T: int, magnitude: float = 0.5,
                   push_fraction: float = 0.4) -> np.ndarray:
    """Initial control guess that tilts the platform to accelerate theta
    toward the target.

    A marble at rest sits inside the Coulomb hold band, where local
    linearization reports zero control authority and iLQR cannot make
    progress from an all-zero guess. Rolling out this kick leaves the stuck
    region so the solver has gradients to work with.
    """
    x0 = np.asarray(x0, dtype=float)
    theta0 = x0[THETA_INDEX]
    err = wrap_angle(target_theta - theta0)
    s = 1.0 if err >= 0 else -1.0
    direction = s * np.array([-math.sin(theta0), math.cos(theta0)])
    U = np.zeros((T, 2))
    n_push = max(1, int(push_fraction * T))
    U[:n_push] = magnitude * direction
    return U


def riccati_lqr(A: np.ndarray, B: np.ndarray, w: np.ndarray, lam: float,
                T: int) -> list[np.ndarray]:
    """Finite-horizon discrete Riccati recursion; returns gains K_0..K_{T-1}.

    Oracle counterpart of ilqr_solve on linear models: J = sum err' diag(w)
    err + lam ||u||^2 with terminal weight diag(w); u = -K_k x is optimal.
    """
    Qm = np.diag(w)
    R = lam * np.eye(B.shape[1])
    P = Qm.copy()
    gains: list[np.ndarray] = []
    for _ in range(T):
        S = R + B.T @ P @ B
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Qm + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    gains.reverse()
    return gains
