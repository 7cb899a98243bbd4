"""Gaussian-process residual models and the hybrid one-step dynamics.

Two independent GPs per ring map (state, action) to the angular-position and
angular-velocity components of the one-step gap between the real system and
the calibrated reduced engine. The kernel is linear in standardized features
(beta, gamma, cos theta, sin theta, theta_dot, ux, uy) plus a bias term; the
circular angle enters through its sine and cosine so the kernel can represent
periodic residuals. Hyperparameters (signal and noise scales) are fit by
marginal-likelihood maximization with analytic gradients.

Because the kernel is linear, the n x n eigensystem of the Gram matrix
collapses onto the thin SVD of the feature matrix, which makes every
likelihood evaluation O(n d) and the posterior mean an affine function of the
features. The fitted model still caches the dense Cholesky factor of
(K + sigma_n^2 I) and alpha, which prediction variance and the solve-residual
checks use directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dynamics import Action, FrictionParams, ReducedEngine, ReducedState, RingModel
from .estimation import TransitionBuffer
from .geometry import wrap_angle, wrap_angle_arr

FEATURE_NAMES = ("beta", "gamma", "cos_theta", "sin_theta", "theta_dot", "ux", "uy")
N_FEATURES = len(FEATURE_NAMES)
SIGMA_N_MIN = 1e-6
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
LOG_SF_BOUNDS = (-6.0, 6.0)


class GpFitError(RuntimeError):
    pass


def make_features(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Raw (n, 7) feature rows from (n, 4) states and (n, 2) actions."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    return np.column_stack([
        states[:, 0], states[:, 1],
        np.cos(states[:, 2]), np.sin(states[:, 2]),
        states[:, 3], actions[:, 0], actions[:, 1],
    ])


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel scales plus the feature standardization constants."""

    sigma_f: float = 1.0
    sigma_n: float = 0.1
    feat_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feat_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))


def _standardize(X: np.ndarray, hyp: GpHyperparams) -> np.ndarray:
    Xs = (np.atleast_2d(X) - hyp.feat_mean) / hyp.feat_std
    return np.column_stack([Xs, np.ones(Xs.shape[0])])


def linear_kernel(x, x_other, hyp: GpHyperparams) -> float:
    """sigma_f^2 * <phi(x), phi(x')> on standardized, bias-augmented features."""
    x = np.asarray(x, dtype=float)
    x_other = np.asarray(x_other, dtype=float)
    if x.shape != x_other.shape:
        raise ValueError(f"feature dimensions differ: {x.shape} vs {x_other.shape}")
    a = _standardize(x.reshape(1, -1), hyp)[0]
    b = _standardize(x_other.reshape(1, -1), hyp)[0]
    return float(hyp.sigma_f ** 2 * (a @ b))


class GpModel:
    """A fitted (or prior) linear-kernel GP over the 7 raw features."""

    def __init__(self, hyp: GpHyperparams, X_raw: np.ndarray, y_raw: np.ndarray,
                 y_mean: float, y_std: float, alpha: np.ndarray,
                 chol: tuple, weight: np.ndarray, jitter: float,
                 lml: float, lml_starts: list[float]):
        self.hyp = hyp
        self.X_raw = X_raw
        self.y_raw = y_raw
        self.y_mean = y_mean
        self.y_std = y_std
        self.alpha = alpha          # (K + sigma_n^2 I)^-1 y_standardized
        self._chol = chol           # scipy cho_factor of (K + sigma_n^2 I + jitter I)
        self.weight = weight        # sigma_f^2 Phi^T alpha: posterior mean coefficients
        self.jitter = jitter
        self.lml = lml
        self.lml_starts = lml_starts
        self._phi = _standardize(X_raw, hyp) if len(X_raw) else np.empty((0, N_FEATURES + 1))

    @property
    def n(self) -> int:
        return len(self.X_raw)

    @classmethod
    def prior(cls, hyp: GpHyperparams | None = None) -> "GpModel":
        hyp = hyp or GpHyperparams()
        return cls(hyp, np.empty((0, N_FEATURES)), np.empty(0), 0.0, 1.0,
                   np.empty(0), None, np.zeros(N_FEATURES + 1), 0.0,
                   0.0, [])

    def predict(self, x_raw) -> tuple[float, float]:
        """Posterior mean and variance at one raw feature vector."""
        x_raw = np.asarray(x_raw, dtype=float).reshape(1, -1)
        phi_x = _standardize(x_raw, self.hyp)[0]
        prior_var = self.hyp.sigma_f ** 2 * (phi_x @ phi_x)
        if self.n == 0:
            return 0.0, float(prior_var)
        mean_s = float(phi_x @ self.weight)
        k_vec = self.hyp.sigma_f ** 2 * (self._phi @ phi_x)
        var_s = prior_var - float(k_vec @ cho_solve(self._chol, k_vec))
        mean = self.y_mean + self.y_std * mean_s
        var = max(var_s, 0.0) * self.y_std ** 2
        return mean, var

    def predict_mean(self, X_raw: np.ndarray) -> np.ndarray:
        """Posterior mean at (n, 7) raw feature rows; affine, cheap."""
        phi = _standardize(X_raw, self.hyp)
        return self.y_mean + self.y_std * (phi @ self.weight)

    def mean_coefficients(self) -> tuple[np.ndarray, float]:
        """(coef, intercept) of the posterior mean over *raw* features."""
        scaled = self.y_std * self.weight
        coef = scaled[:-1] / self.hyp.feat_std
        intercept = self.y_mean + scaled[-1] - float(coef @ self.hyp.feat_mean)
        return coef, intercept

    def solve_residual(self) -> float:
        """|| (K + sigma_n^2 I) alpha - y_std || / || y_std ||."""
        if self.n == 0:
            return 0.0
        K = self.hyp.sigma_f ** 2 * (self._phi @ self._phi.T)
        K[np.diag_indices_from(K)] += self.hyp.sigma_n ** 2 + self.jitter
        y_s = (self.y_raw - self.y_mean) / self.y_std
        num = np.linalg.norm(K @ self.alpha - y_s)
        den = np.linalg.norm(y_s)
        return float(num / den) if den > 0 else float(num)

    def to_dict(self) -> dict:
        return {
            "sigma_f": self.hyp.sigma_f,
            "sigma_n": self.hyp.sigma_n,
            "feat_mean": self.hyp.feat_mean.tolist(),
            "feat_std": self.hyp.feat_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "X": self.X_raw.tolist(),
            "y": self.y_raw.tolist(),
            "alpha": self.alpha.tolist(),
            "jitter": self.jitter,
            "lml": self.lml,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        hyp = GpHyperparams(sigma_f=d["sigma_f"], sigma_n=d["sigma_n"],
                            feat_mean=np.array(d["feat_mean"]),
                            feat_std=np.array(d["feat_std"]))
        X = np.array(d["X"], dtype=float).reshape(-1, N_FEATURES)
        y = np.array(d["y"], dtype=float)
        alpha = np.array(d["alpha"], dtype=float)
        phi = _standardize(X, hyp)
        weight = hyp.sigma_f ** 2 * (phi.T @ alpha) if len(X) else np.zeros(N_FEATURES + 1)
        chol = None
        if len(X):
            K = hyp.sigma_f ** 2 * (phi @ phi.T)
            K[np.diag_indices_from(K)] += hyp.sigma_n ** 2 + d["jitter"]
            chol = cho_factor(K, lower=True)
        return cls(hyp, X, y, d["y_mean"], d["y_std"], alpha, chol, weight,
                   d["jitter"], d["lml"], [])


def _lml_and_grad(log_sf: float, log_sn: float, s2: np.ndarray, z2: np.ndarray,
                  y_perp_sq: float, n: int) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and gradient wrt (log sigma_f, log sigma_n)."""
    sf2 = math.exp(2 * log_sf)
    sn2 = math.exp(2 * log_sn)
    d = sf2 * s2 + sn2
    k = s2.size
    lml = -0.5 * (float(np.sum(z2 / d)) + y_perp_sq / sn2) \
        - 0.5 * (float(np.sum(np.log(d))) + (n - k) * math.log(sn2)) \
        - 0.5 * n * math.log(2 * math.pi)
    common = z2 / d ** 2 - 1.0 / d
    g_sf = float(np.sum(sf2 * s2 * common))
    g_sn = float(np.sum(sn2 * common)) + y_perp_sq / sn2 - (n - k)
    return lml, np.array([g_sf, g_sn])


def gp_fit(X_raw: np.ndarray, y_raw: np.ndarray,
           hyp_init: tuple[float, float] | None = None,
           n_starts: int = 5, n_iters: int = 200,
           sigma_n_min: float = SIGMA_N_MIN) -> GpModel:
    """Fit hyperparameters by multi-start gradient ascent on the marginal
    likelihood, then cache the Cholesky solve for prediction."""
    X_raw = np.atleast_2d(np.asarray(X_raw, dtype=float))
    y_raw = np.asarray(y_raw, dtype=float).reshape(-1)
    n = X_raw.shape[0]
    if n < 2:
        raise GpFitError(f"need at least 2 samples, got {n}")
    if X_raw.shape[1] != N_FEATURES:
        raise GpFitError(f"expected {N_FEATURES} features, got {X_raw.shape[1]}")
    if not np.all(np.isfinite(X_raw)) or not np.all(np.isfinite(y_raw)):
        raise GpFitError("non-finite training data")

    feat_mean = X_raw.mean(axis=0)
    feat_std = np.maximum(X_raw.std(axis=0), 1e-8)
    y_mean = float(y_raw.mean())
    y_std = float(y_raw.std())
    if y_std == 0.0:
        y_std = 1.0
    y_s = (y_raw - y_mean) / y_std

    hyp0 = GpHyperparams(1.0, 1.0, feat_mean, feat_std)
    phi = _standardize(X_raw, hyp0)
    U, S, _ = np.linalg.svd(phi, full_matrices=False)
    s2 = S ** 2
    z = U.T @ y_s
    z2 = z ** 2
    y_perp_sq = max(float(y_s @ y_s - z @ z), 0.0)

    lo_sn = math.log(sigma_n_min)
    starts = [(0.0, -1.0), (0.5, -2.5), (-1.0, -0.5), (0.0, -4.0), (1.5, -1.5)]
    if hyp_init is not None:
        starts.insert(0, (math.log(hyp_init[0]), math.log(hyp_init[1])))
    starts = starts[:max(n_starts, 1)]

    def project(p):
        return np.array([min(max(p[0], LOG_SF_BOUNDS[0]), LOG_SF_BOUNDS[1]),
                         min(max(p[1], lo_sn), LOG_SF_BOUNDS[1])])

    best = None
    start_lmls = []
    for p0 in starts:
        p = project(np.array(p0, dtype=float))
        lml, grad = _lml_and_grad(p[0], p[1], s2, z2, y_perp_sq, n)
        step = 0.1
        for _ in range(n_iters):
            if np.linalg.norm(grad) < 1e-12:
                break
            # backtracking line search along the gradient
            improved = False
            trial_step = step
            for _ in range(25):
                q = project(p + trial_step * grad)
                lml_q, grad_q = _lml_and_grad(q[0], q[1], s2, z2, y_perp_sq, n)
                if lml_q > lml + 1e-4 * trial_step * float(grad @ grad):
                    p, lml, grad = q, lml_q, grad_q
                    step = min(trial_step * 2.0, 1.0)
                    improved = True
                    break
                trial_step *= 0.5
            if not improved:
                break
        start_lmls.append(lml)
        if best is None or lml > best[0]:
            best = (lml, p)

    lml_best, p_best = best
    sigma_f = math.exp(p_best[0])
    sigma_n = math.exp(p_best[1])
    hyp = GpHyperparams(sigma_f, sigma_n, feat_mean, feat_std)

    K = sigma_f ** 2 * (phi @ phi.T)
    diag = np.diag_indices_from(K)
    chol = None
    jitter_used = 0.0
    for jitter in JITTERS:
        try:
            K_try = K.copy()
            K_try[diag] += sigma_n ** 2 + jitter
            chol = cho_factor(K_try, lower=True)
            jitter_used = jitter
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        raise GpFitError("kernel matrix not positive definite after jitter escalation")

    alpha = cho_solve(chol, y_s)
    weight = sigma_f ** 2 * (phi.T @ alpha)
    return GpModel(hyp, X_raw, y_raw, y_mean, y_std, alpha, chol, weight,
                   jitter_used, lml_best, start_lmls)


def gp_predict(model: GpModel, x_raw) -> tuple[float, float]:
    return model.predict(x_raw)


def log_marginal_likelihood(model: GpModel, log_sf: float | None = None,
                            log_sn: float | None = None,
                            with_grad: bool = False):
    """Evaluate the fitted model's marginal likelihood at given hyperparameters.

    Defaults to the model's own scales. Used by the gradient checks.
    """
    if model.n == 0:
        raise GpFitError("prior model has no marginal likelihood")
    log_sf = math.log(model.hyp.sigma_f) if log_sf is None else log_sf
    log_sn = math.log(model.hyp.sigma_n) if log_sn is None else log_sn
    y_s = (model.y_raw - model.y_mean) / model.y_std
    U, S, _ = np.linalg.svd(model._phi, full_matrices=False)
    z = U.T @ y_s
    y_perp_sq = max(float(y_s @ y_s - z @ z), 0.0)
    lml, grad = _lml_and_grad(log_sf, log_sn, S ** 2, z ** 2, y_perp_sq, model.n)
    return (lml, grad) if with_grad else lml


def lml_direct_cholesky(model: GpModel, log_sf: float, log_sn: float) -> float:
    """Reference marginal likelihood through the dense kernel matrix."""
    sf = math.exp(log_sf)
    sn = math.exp(log_sn)
    y_s = (model.y_raw - model.y_mean) / model.y_std
    K = sf ** 2 * (model._phi @ model._phi.T)
    K[np.diag_indices_from(K)] += sn ** 2
    c = cho_factor(K, lower=True)
    alpha = cho_solve(c, y_s)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    return -0.5 * float(y_s @ alpha) - 0.5 * logdet - 0.5 * model.n * math.log(2 * math.pi)


@dataclass
class RingResidual:
    gp_theta: GpModel
    gp_theta_dot: GpModel


class HybridModel:
    """Calibrated reduced engine plus per-ring GP mean corrections.

    Prediction = engine one-step result with the GP means added to theta and
    theta_dot; rings without a fitted model fall back to the engine alone.
    """

    def __init__(self, engine: ReducedEngine, ring_models: dict[int, RingResidual],
                 fallback_rings: tuple[int, ...] = ()):
        self.engine = engine
        self.ring_models = ring_models
        self.fallback_rings = tuple(fallback_rings)

    @property
    def geom(self):
        return self.engine.geom

    @property
    def dt(self):
        return self.engine.dt

    def step_single(self, x4, u2, ring: int) -> np.ndarray:
        base = self.engine.step_single(x4, u2, ring)
        rm = self.ring_models.get(int(ring))
        if rm is not None:
            feats = make_features(np.asarray(x4).reshape(1, 4),
                                  np.asarray(u2).reshape(1, 2))
            base[2] = wrap_angle(base[2] + float(rm.gp_theta.predict_mean(feats)[0]))
            base[3] = base[3] + float(rm.gp_theta_dot.predict_mean(feats)[0])
        return base

    def step_batch(self, X: np.ndarray, U: np.ndarray, rings) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        rings = np.broadcast_to(np.asarray(rings, dtype=int), X.shape[:1])
        base = self.engine.step_batch(X, U, rings)
        feats = None
        for ring, rm in self.ring_models.items():
            mask = rings == ring
            if rm is None or not mask.any():
                continue
            if feats is None:
                feats = make_features(X, U)
            base[mask, 2] = wrap_angle_arr(
                base[mask, 2] + rm.gp_theta.predict_mean(feats[mask]))
            base[mask, 3] = base[mask, 3] + rm.gp_theta_dot.predict_mean(feats[mask])
        return base

    def step(self, x: ReducedState, u: Action) -> ReducedState:
        out = self.step_single(x.as_array(), u.as_array(), x.ring)
        return ReducedState.from_array(out, ring=x.ring)

    def for_ring(self, ring: int) -> RingModel:
        return RingModel(self, ring)

    def to_dict(self) -> dict:
        return {
            "mu": self.engine.mu.as_array().tolist(),
            "dt": self.engine.dt,
            "n_sub": self.engine.n_sub,
            "rings": {str(r): (None if rm is None else
                               {"gp_theta": rm.gp_theta.to_dict(),
                                "gp_theta_dot": rm.gp_theta_dot.to_dict()})
                      for r, rm in self.ring_models.items()},
            "fallback_rings": list(self.fallback_rings),
        }

    @classmethod
    def from_dict(cls, d: dict, engine: ReducedEngine) -> "HybridModel":
        mu = FrictionParams.from_array(d["mu"])
        ring_models: dict[int, RingResidual] = {}
        for key, val in d["rings"].items():
            ring_models[int(key)] = None if val is None else RingResidual(
                gp_theta=GpModel.from_dict(val["gp_theta"]),
                gp_theta_dot=GpModel.from_dict(val["gp_theta_dot"]))
        return cls(engine.with_friction(mu), ring_models,
                   tuple(d.get("fallback_rings", ())))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str, engine: ReducedEngine) -> "HybridModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), engine)


def fit_residual(buffer: TransitionBuffer, mu_star: FrictionParams,
                 engine: ReducedEngine, max_points: int = 2500,
                 n_starts: int = 5) -> HybridModel:
    """Fit per-ring residual GPs from teacher-forced engine predictions.

    Targets are the wrapped angular-position gap and the angular-velocity gap
    between the recorded next state and the calibrated engine's prediction
    from the recorded (state, action). Rings with fewer than 2 samples fall
    back to the engine alone and are recorded on the model.
    """
    if len(buffer) == 0:
        raise GpFitError("transition buffer is empty")
    calibrated = engine.with_friction(mu_star)
    pred = calibrated.step_batch(buffer.states, buffer.actions, buffer.rings)
    t_theta = wrap_angle_arr(buffer.next_states[:, 2] - pred[:, 2])
    t_theta_dot = buffer.next_states[:, 3] - pred[:, 3]
    feats = make_features(buffer.states, buffer.actions)

    ring_models: dict[int, RingResidual] = {}
    fallback = []
    for ring in range(engine.geom.n_rings):
        mask = buffer.rings == ring
        count = int(mask.sum())
        if count < 2:
            ring_models[ring] = None
            fallback.append(ring)
            continue
        idx = np.nonzero(mask)[0]
        if count > max_points:
            # deterministic even thinning keeps the fit tractable
            idx = idx[np.linspace(0, count - 1, max_points).round().astype(int)]
        ring_models[ring] = RingResidual(
            gp_theta=gp_fit(feats[idx], t_theta[idx], n_starts=n_starts),
            gp_theta_dot=gp_fit(feats[idx], t_theta_dot[idx], n_starts=n_starts))
    return HybridModel(calibrated, ring_models, tuple(fallback))


def hybrid_step(model: HybridModel, x: ReducedState, u: Action) -> ReducedState:
    """One hybrid prediction: engine step plus GP mean corrections."""
    return model.step(x, u)
