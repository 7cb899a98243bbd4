"""Friction-parameter estimation: a from-scratch CMA-ES and its objective.

The optimizer is the standard (mu/mu_w, lambda) evolution strategy with
rank-weighted recombination, cumulative step-size adaptation, and the rank-1
plus rank-mu covariance update. The estimation objective is the mean squared
one-step angular-position error of the reduced engine, teacher-forced from
recorded real-system transitions. The search runs in log10 space so the four
friction coefficients, which span many decades, are all identifiable and
positive by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import FrictionParams, ReducedEngine
from .geometry import wrap_angle_arr

LOG10_BOUNDS = (-8.0, 1.0)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CmaEsConfig:
    population: int | None = None      # default 4 + floor(3 ln n)
    sigma0: float | np.ndarray = 0.5
    max_evals: int = 2000
    f_tol: float = 1e-12
    x_tol: float = 1e-11
    seed: int = 0

    def resolved_population(self, n: int) -> int:
        lam = self.population if self.population is not None else 4 + int(3 * math.log(n))
        if lam < 4:
            raise ValueError(f"population must be >= 4, got {lam}")
        return lam


@dataclass
class CmaEsResult:
    x_best: np.ndarray
    f_best: float
    evals: int
    generations: int
    stop_reason: str
    history: list = field(default_factory=list)  # (generation, evals, f_best, sigma, mean)


def cma_es_minimize(objective, x0, config: CmaEsConfig) -> CmaEsResult:
    """Minimize ``objective`` starting at ``x0``.

    Non-finite sample evaluations are replaced by the worst finite value in
    the generation plus a distance penalty, so the strategy can adapt away
    from bad regions instead of aborting. A non-finite value at ``x0`` itself
    is a setup error.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    f0 = float(objective(x0))
    if not math.isfinite(f0):
        raise EstimationError(f"objective is non-finite at the start point: {f0}")

    lam = config.resolved_population(n)
    if config.max_evals <= lam:
        raise ValueError("max_evals must exceed one generation")
    mu = lam // 2
    raw_w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw_w / raw_w.sum()
    mueff = 1.0 / np.sum(weights ** 2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    sigma0 = np.asarray(config.sigma0, dtype=float)
    if sigma0.ndim == 0:
        sigma = float(sigma0)
        C = np.eye(n)
    else:
        if sigma0.size != n or np.any(sigma0 <= 0):
            raise ValueError("per-coordinate sigma0 must be positive and match x0")
        sigma = float(np.exp(np.mean(np.log(sigma0))))
        C = np.diag((sigma0 / sigma) ** 2)

    mean = x0.copy()
    pc = np.zeros(n)
    ps = np.zeros(n)
    B = np.eye(n)
    D = np.sqrt(np.diag(C))
    inv_sqrt_C = np.eye(n)
    eigen_stale = 0
    eigen_interval = max(1, int(1 / ((c1 + cmu) * n * 10)))

    rng = np.random.default_rng(config.seed)
    x_best = x0.copy()
    f_best = f0
    evals = 1
    gen = 0
    history: list[tuple] = []
    recent_best: list[float] = [f0]
    stop = ""

    def refresh_eigen():
        nonlocal B, D, inv_sqrt_C
        Csym = (C + C.T) / 2
        eigvals, B = np.linalg.eigh(Csym)
        eigvals = np.maximum(eigvals, 1e-30)
        D = np.sqrt(eigvals)
        inv_sqrt_C = B @ np.diag(1.0 / D) @ B.T

    refresh_eigen()

    while evals + lam <= config.max_evals and not stop:
        gen += 1
        Z = rng.standard_normal((lam, n))
        Y = Z @ (B * D).T          # y_k = B D z_k
        X = mean + sigma * Y
        fs = np.empty(lam)
        for i in range(lam):
            fs[i] = objective(X[i])
        evals += lam

        bad = ~np.isfinite(fs)
        if bad.any():
            worst = fs[~bad].max() if (~bad).any() else f_best
            dist = np.linalg.norm(X[bad] - mean, axis=1)
            fs[bad] = worst + 1e6 * (1.0 + dist)

        order = np.argsort(fs)
        if fs[order[0]] < f_best:
            f_best = float(fs[order[0]])
            x_best = X[order[0]].copy()

        sel = Y[order[:mu]]
        y_w = weights @ sel
        mean = mean + sigma * y_w

        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt_C @ y_w)
        norm_ps = np.linalg.norm(ps)
        hsig = norm_ps / math.sqrt(1 - (1 - cs) ** (2 * evals / lam)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + (math.sqrt(cc * (2 - cc) * mueff) * y_w if hsig else 0.0)

        rank_mu = (sel * weights[:, None]).T @ sel
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(pc, pc) + (0.0 if hsig else cc * (2 - cc)) * C)
             + cmu * rank_mu)
        sigma *= math.exp((cs / damps) * (norm_ps / chi_n - 1))

        eigen_stale += 1
        if eigen_stale >= eigen_interval:
            refresh_eigen()
            eigen_stale = 0

        history.append((gen, evals, f_best, sigma, mean.copy()))
        recent_best.append(float(fs[order[0]]))
        if len(recent_best) > 10 + int(30 * n / lam):
            recent_best.pop(0)

        gen_spread = float(fs[order[-1]] - fs[order[0]])
        hist_spread = max(recent_best) - min(recent_best)
        if gen >= 2 and gen_spread <= config.f_tol and hist_spread <= config.f_tol:
            stop = "f_tol"
        elif sigma * float(D.max()) < config.x_tol:
            stop = "x_tol"

    if not stop:
        stop = "max_evals"
    return CmaEsResult(x_best=x_best, f_best=f_best, evals=evals,
                       generations=gen, stop_reason=stop, history=history)


@dataclass
class TransitionBuffer:
    """Recorded one-step transitions of the real system, ring-tagged.

    ``states`` and ``next_states`` are (n, 4) arrays of (beta, gamma, theta,
    theta_dot); consecutive rows of one episode chain together, and
    ``episode_ids`` marks the segments.
    """

    states: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))
    actions: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    next_states: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))
    rings: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    episode_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def __len__(self) -> int:
        return self.states.shape[0]

    def append(self, states, actions, next_states, rings, episode_id: int) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        n = states.shape[0]
        self.states = np.vstack([self.states, states])
        self.actions = np.vstack([self.actions, np.atleast_2d(np.asarray(actions, dtype=float))])
        self.next_states = np.vstack([self.next_states, np.atleast_2d(np.asarray(next_states, dtype=float))])
        self.rings = np.concatenate([self.rings, np.asarray(rings, dtype=int).reshape(-1)])
        self.episode_ids = np.concatenate([self.episode_ids, np.full(n, episode_id, dtype=int)])

    def merged_with(self, other: "TransitionBuffer") -> "TransitionBuffer":
        return TransitionBuffer(
            states=np.vstack([self.states, other.states]),
            actions=np.vstack([self.actions, other.actions]),
            next_states=np.vstack([self.next_states, other.next_states]),
            rings=np.concatenate([self.rings, other.rings]),
            episode_ids=np.concatenate([self.episode_ids, other.episode_ids]),
        )

    def ring_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.rings, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def subset(self, mask) -> "TransitionBuffer":
        mask = np.asarray(mask)
        return TransitionBuffer(states=self.states[mask], actions=self.actions[mask],
                                next_states=self.next_states[mask], rings=self.rings[mask],
                                episode_ids=self.episode_ids[mask])


def friction_objective(buffer: TransitionBuffer, mu: FrictionParams,
                       engine: ReducedEngine) -> float:
    """Mean squared one-step wrapped angular error of the reduced engine.

    Every recorded transition is teacher-forced: the engine is reset to the
    recorded state, the recorded action applied, and only the resulting
    angular position compared.
    """
    if len(buffer) == 0:
        raise EstimationError("transition buffer is empty")
    predicted = engine.with_friction(mu).step_batch(buffer.states, buffer.actions,
                                                    buffer.rings)
    err = wrap_angle_arr(buffer.next_states[:, 2] - predicted[:, 2])
    return float(np.mean(err ** 2))


def one_step_theta_rmse(buffer: TransitionBuffer, mu: FrictionParams,
                        engine: ReducedEngine) -> float:
    return math.sqrt(friction_objective(buffer, mu, engine))


def estimate_parameters(buffer: TransitionBuffer, engine: ReducedEngine,
                        mu_init: FrictionParams,
                        config: CmaEsConfig | None = None,
                        min_per_ring: int = 10) -> tuple[FrictionParams, CmaEsResult]:
    """Calibrate the four friction parameters against recorded transitions.

    CMA-ES runs over log10(mu) with a quadratic penalty outside the
    [1e-8, 10] box. The returned parameters are never worse than ``mu_init``
    on the given buffer.
    """
    if len(buffer) == 0:
        raise EstimationError("transition buffer is empty")
    counts = buffer.ring_counts()
    thin = {r: c for r, c in counts.items() if c < min_per_ring}
    if thin:
        raise EstimationError(f"need >= {min_per_ring} transitions per visited ring, got {thin}")
    if config is None:
        config = CmaEsConfig(sigma0=1.0, max_evals=2000, f_tol=1e-14, x_tol=1e-6, seed=0)

    lo, hi = LOG10_BOUNDS

    def objective(z: np.ndarray) -> float:
        z_in = np.clip(z, lo, hi)
        penalty = 1e3 * float(np.sum((z - z_in) ** 2))
        mu = FrictionParams.from_array(10.0 ** z_in)
        return friction_objective(buffer, mu, engine) + penalty

    z0 = np.log10(np.clip(mu_init.as_array(), 10.0 ** lo, 10.0 ** hi))
    result = cma_es_minimize(objective, z0, config)
    mu_star = FrictionParams.from_array(10.0 ** np.clip(result.x_best, lo, hi))

    # guarantee no regression against the starting point
    if friction_objective(buffer, mu_star, engine) > friction_objective(buffer, mu_init, engine):
        mu_star = mu_init
    return mu_star, result


def save_cma_history(path: str, result: CmaEsResult) -> None:
    """Write per-generation convergence records as delimited text."""
    with open(path, "w") as fh:
        fh.write("generation,evals,f_best,sigma," +
                 ",".join(f"mean_{i}" for i in range(result.x_best.size)) + "\n")
        for gen, evals, f_best, sigma, mean in result.history:
            mean_txt = ",".join(repr(float(v)) for v in mean)
            fh.write(f"{gen},{evals},{f_best!r},{sigma!r},{mean_txt}\n")
