"""End-to-end learning and evaluation: rollouts, calibration, GP stages.

The real system here is the full-state engine with process noise; the agent
sees only the reduced state. An episode runs the NMPC agent at the control
rate, storing every transition. Learning proceeds in stages: exploratory
episodes with the uncalibrated internal model feed a one-shot CMA-ES friction
calibration, then three residual-learning stages each add five rollouts under
the current model and refit the GPs on the cumulative buffer. After every
stage the current agent is scored on a fixed set of evaluation seeds and the
time the marble spends in each ring is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import CostSpec, ReferenceTrajectory, breakaway_init, ilqr_solve, nmpc_tick
from .dynamics import (
    DEFAULT_DT,
    DEFAULT_N_SUB,
    FULL_MODEL_FRICTION,
    REDUCED_MODEL_FRICTION,
    Action,
    FrictionParams,
    FullModelParams,
    FullState,
    ReducedEngine,
    ReducedState,
    inject_noise,
    observe,
    step_full,
)
from .estimation import CmaEsConfig, EstimationError, TransitionBuffer, estimate_parameters
from .geometry import GOAL_RING, MazeGeometry, nearest_gate, wrap_angle
from .motor import ArxModel, ServoParams, excite_and_collect, fit_arx, imm_invert, servo_step
from .residual import HybridModel, fit_residual

STAGE_LABELS = ("CMA-ES", "CMA-ES+GP1", "CMA-ES+GP2", "CMA-ES+GP3")


@dataclass(frozen=True)
class TransitParams:
    """Gate-transit sub-controller thresholds and timing."""

    eps_gate: float = 0.05        # rad alignment required to engage
    eps_vel: float = 0.2          # rad/s speed ceiling to engage
    duration_s: float = 0.5       # nominal open-loop push duration
    tilt_scale: float = 0.6       # fraction of max command pushed inward
    timeout_factor: float = 3.0   # give up after this multiple of duration
    cooldown_ticks: int = 10      # wait before re-engaging after a miss


@dataclass(frozen=True)
class NoiseParams:
    """Process noise added to the real system's (theta, theta_dot) per tick.

    Scales are angular at the reference radius. With ``radius_ref`` set, the
    applied sigma grows as radius_ref/r: the same linear-units disturbance at
    the marble looks bigger in angle on the inner rings, the way a fixed
    camera pixel does.
    """

    sigma_theta: float = 1e-3
    sigma_theta_dot: float = 1e-2
    radius_ref: float | None = None

    def at_radius(self, radius: float) -> tuple[float, float]:
        if self.radius_ref is None:
            return self.sigma_theta, self.sigma_theta_dot
        scale = self.radius_ref / radius
        return self.sigma_theta * scale, self.sigma_theta_dot * scale


class RealSystem:
    """The stand-in real maze: full-state dynamics, noise, ring bookkeeping."""

    def __init__(self, geom: MazeGeometry, mu: FrictionParams, servo: ServoParams,
                 dt: float = DEFAULT_DT, n_sub: int = DEFAULT_N_SUB,
                 noise: NoiseParams = NoiseParams(),
                 full_params: FullModelParams = FullModelParams()):
        self.geom = geom
        self.mu = mu
        self.servo = servo
        self.dt = dt
        self.n_sub = n_sub
        self.noise = noise
        self.full_params = full_params
        self.state: FullState | None = None
        self.solved = False
        self.tick = 0
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int, ring: int = 0) -> ReducedState:
        self._rng = np.random.default_rng(seed)
        theta = float(self._rng.uniform(-math.pi, math.pi))
        spin = float(self._rng.normal(0.0, self.full_params.spin_init_std))
        self.state = FullState(beta=0.0, gamma=0.0, theta=theta, theta_dot=0.0,
                               ring=ring, rho=self.geom.ring_radii[ring],
                               rho_dot=0.0, spin=spin)
        self.solved = False
        self.tick = 0
        return observe(self.state)

    def observe(self) -> ReducedState:
        return observe(self.state)

    def step(self, u) -> dict:
        """Advance one control tick; returns {'crossed': bool, 'solved': bool}."""
        if self.solved:
            raise RuntimeError("episode already solved; reset first")
        u = np.asarray(u, dtype=float)
        nxt = step_full(self.state, Action(float(u[0]), float(u[1])), self.mu,
                        self.dt, self.servo, self.geom, self.full_params,
                        self.n_sub)
        ring_idx = min(nxt.ring, self.geom.n_rings - 1)
        noisy = inject_noise(observe(nxt),
                             self.noise.at_radius(self.geom.ring_radii[ring_idx]),
                             self._rng)
        nxt = replace(nxt, theta=noisy.theta, theta_dot=noisy.theta_dot)

        crossed = False
        ring = nxt.ring
        if ring == self.geom.n_rings - 1 and nxt.rho <= self.geom.goal_rho:
            self.solved = True
            crossed = True
            nxt = replace(nxt, ring=GOAL_RING)
        elif ring < self.geom.n_rings - 1 and \
                nxt.rho <= self.geom.channel_bounds(ring + 1)[1]:
            crossed = True
            nxt = replace(nxt, ring=ring + 1)
        self.state = nxt
        self.tick += 1
        return {"crossed": crossed, "solved": self.solved}


@dataclass
class ActInfo:
    mode: str = "nmpc"            # nmpc | transit | idle
    iterations: int = 0
    cost: float = math.nan
    fallback: bool = False
    replanned: bool = False


class Agent:
    """NMPC agent: plans a gate-approach reference, tracks it, runs transits.

    ``model`` is a one-step reduced or hybrid engine. Planner output is a
    normalized tilt target; when an inverse motor model is attached, the
    command sent out compensates the servo lag.
    """

    def __init__(self, geom: MazeGeometry, model, cost: CostSpec = CostSpec(),
                 plan_horizon: int = 90, track_horizon: int = 10,
                 iter_cap: int = 3, transit: TransitParams = TransitParams(),
                 arx: ArxModel | None = None, servo: ServoParams | None = None,
                 dt: float = DEFAULT_DT, replan_theta_err: float = 0.3,
                 stall_limit_ticks: int = 45):
        self.geom = geom
        self.model = model
        self.cost = cost
        self.plan_horizon = plan_horizon
        self.track_horizon = track_horizon
        self.iter_cap = iter_cap
        self.transit = transit
        self.arx = arx
        self.servo = servo or ServoParams()
        self.dt = dt
        self.replan_theta_err = replan_theta_err
        self.stall_limit_ticks = stall_limit_ticks
        self.reset()

    def reset(self) -> None:
        self._ref: ReferenceTrajectory | None = None
        self._ref_tick = 0
        self._warm = None
        self._ring = -1
        self._gate = 0.0
        self._transit_started = -1
        self._transit_deadline = -1
        self._cooldown_until = 0
        self._stall_ticks = 0

    def _plan(self, obs: ReducedState, tick: int) -> None:
        self._gate = nearest_gate(self.geom, obs.ring, obs.theta)
        x0 = obs.as_array()
        target = np.array([0.0, 0.0, self._gate, 0.0])
        if abs(obs.theta_dot) < 0.5:
            init_U = breakaway_init(x0, self._gate, self.plan_horizon)
        else:
            init_U = None
        self._ref = ilqr_solve(self.model.for_ring(obs.ring), x0, target,
                               self.plan_horizon, self.cost, init_U=init_U)
        self._ref_tick = tick
        self._warm = None

    def _transit_command(self) -> np.ndarray:
        scale = self.transit.tilt_scale
        return np.array([-scale * math.cos(self._gate),
                         -scale * math.sin(self._gate)])

    def act(self, obs: ReducedState, tick: int) -> tuple[np.ndarray, ActInfo]:
        info = ActInfo()
        if obs.ring >= GOAL_RING:
            info.mode = "idle"
            return np.zeros(2), info

        if obs.ring != self._ring:
            # fresh ring (or first call): drop any plan and transit state
            self._ring = obs.ring
            self._ref = None
            self._warm = None
            self._transit_started = -1
            self._transit_deadline = -1
            self._cooldown_until = tick

        in_transit = self._transit_started >= 0 and tick < self._transit_deadline
        if not in_transit and self._transit_started >= 0:
            # transit expired without a crossing: back to NMPC, allow retry
            self._transit_started = -1
            self._cooldown_until = tick + self.transit.cooldown_ticks
            self._ref = None

        if not in_transit and self._ref is not None and tick >= self._cooldown_until:
            err = abs(wrap_angle(self._gate - obs.theta))
            if err <= self.transit.eps_gate and abs(obs.theta_dot) <= self.transit.eps_vel:
                self._transit_started = tick
                self._transit_deadline = tick + int(
                    self.transit.timeout_factor * self.transit.duration_s / self.dt)
                in_transit = True

        if in_transit:
            info.mode = "transit"
            self._stall_ticks = 0
            u_plan = self._transit_command()
        else:
            # watchdog: parked at rest outside the gate window means the
            # tracking solve has settled short; only a fresh plan moves it
            gate_err = abs(wrap_angle(self._gate - obs.theta)) if self._ref is not None \
                else math.inf
            if abs(obs.theta_dot) <= self.transit.eps_vel and \
                    gate_err > self.transit.eps_gate:
                self._stall_ticks += 1
            else:
                self._stall_ticks = 0
            if self._ref is None:
                self._plan(obs, tick)
                info.replanned = True
            elif self._stall_ticks > self.stall_limit_ticks:
                self._plan(obs, tick)
                info.replanned = True
                self._stall_ticks = 0
            else:
                j = tick - self._ref_tick
                ref_theta = self._ref.state_ref(j)[2]
                if abs(wrap_angle(obs.theta - ref_theta)) > self.replan_theta_err:
                    self._plan(obs, tick)
                    info.replanned = True
            j = tick - self._ref_tick
            u_plan, self._warm, tick_info = nmpc_tick(
                self.model.for_ring(obs.ring), obs.as_array(), self._ref, j,
                self.track_horizon, self.cost, warm=self._warm,
                iter_cap=self.iter_cap)
            info.iterations = tick_info.iterations
            info.cost = tick_info.cost
            info.fallback = tick_info.fallback

        u_plan = np.clip(u_plan, -1.0, 1.0)
        if self.arx is not None:
            angles = np.array([obs.beta, obs.gamma])
            desired = servo_step(angles, u_plan, self.dt, self.servo)
            u_out = imm_invert(self.arx, angles, desired)
        else:
            u_out = u_plan
        return u_out, info


@dataclass
class EpisodeRecord:
    """One rollout: transitions, per-ring tick counts, telemetry."""

    seed: int
    stage: str
    solved: bool
    wall_ticks: int
    per_ring_ticks: np.ndarray                  # (4,) ticks spent per ring
    states: np.ndarray                          # (n, 4)
    actions: np.ndarray                         # (n, 2) applied commands
    next_states: np.ndarray                     # (n, 4)
    rings: np.ndarray                           # (n,)
    modes: list = field(default_factory=list)   # per-tick agent mode
    iterations: np.ndarray | None = None
    fallbacks: np.ndarray | None = None
    full_trace: np.ndarray | None = None        # (n, 9): t, reduced 4, ring, rho, rho_dot, spin
    dt: float = DEFAULT_DT

    @property
    def total_seconds(self) -> float:
        return self.wall_ticks * self.dt


def per_ring_times(record: EpisodeRecord) -> dict[int, float]:
    """Seconds spent in each ring; transit ticks count toward the exited ring."""
    if record.wall_ticks == 0:
        return {}
    return {ring: float(t * record.dt)
            for ring, t in enumerate(record.per_ring_ticks) if t > 0}


def rollout_episode(real: RealSystem, agent: Agent, seed: int,
                    limit_ticks: int = 1800, exploration_std: float = 0.0,
                    stage: str = "", start_ring: int = 0,
                    record_full: bool = False) -> EpisodeRecord:
    """Run one NMPC episode against the real system (the rollout protocol:
    reset to a random spot on the outer ring, observe, act, store, repeat)."""
    obs = real.reset(seed, ring=start_ring)
    agent.reset()
    expl_rng = np.random.default_rng(seed + 777_777) if exploration_std > 0 else None

    states, actions, next_states, rings, modes = [], [], [], [], []
    iterations, fallbacks = [], []
    trace = []
    per_ring = np.zeros(real.geom.n_rings, dtype=int)
    solved = False
    tick = 0
    while tick < limit_ticks:
        u, info = agent.act(obs, tick)
        if expl_rng is not None:
            u = np.clip(u + expl_rng.normal(0.0, exploration_std, size=2), -1.0, 1.0)
        if record_full:
            s = real.state
            trace.append([tick * real.dt, s.beta, s.gamma, s.theta, s.theta_dot,
                          s.ring, s.rho, s.rho_dot, s.spin])
        events = real.step(u)
        nxt = real.observe()
        states.append(obs.as_array())
        actions.append(u.copy())
        next_states.append(nxt.as_array())
        rings.append(obs.ring)
        modes.append(info.mode)
        iterations.append(info.iterations)
        fallbacks.append(info.fallback)
        per_ring[min(obs.ring, real.geom.n_rings - 1)] += 1
        obs = nxt
        tick += 1
        if events["solved"]:
            solved = True
            break

    return EpisodeRecord(
        seed=seed, stage=stage, solved=solved, wall_ticks=tick,
        per_ring_ticks=per_ring,
        states=np.array(states).reshape(-1, 4),
        actions=np.array(actions).reshape(-1, 2),
        next_states=np.array(next_states).reshape(-1, 4),
        rings=np.array(rings, dtype=int),
        modes=modes,
        iterations=np.array(iterations, dtype=int),
        fallbacks=np.array(fallbacks, dtype=bool),
        full_trace=np.array(trace) if record_full else None,
        dt=real.dt)


def records_to_buffer(records) -> TransitionBuffer:
    buf = TransitionBuffer()
    for i, rec in enumerate(records):
        if rec.wall_ticks == 0:
            continue
        buf.append(rec.states, rec.actions, rec.next_states, rec.rings, i)
    return buf


def random_policy_episode(real: RealSystem, seed: int, n_ticks: int,
                          start_ring: int = 0, hold_ticks: int = 10,
                          magnitude: float = 0.7) -> EpisodeRecord:
    """Piecewise-constant random tilts from a random start; calibration data."""
    obs = real.reset(seed, ring=start_ring)
    rng = np.random.default_rng(seed + 333_333)
    states, actions, next_states, rings = [], [], [], []
    per_ring = np.zeros(real.geom.n_rings, dtype=int)
    u = np.zeros(2)
    solved = False
    tick = 0
    while tick < n_ticks and not solved:
        if tick % hold_ticks == 0:
            u = rng.uniform(-magnitude, magnitude, size=2)
        events = real.step(u)
        nxt = real.observe()
        states.append(obs.as_array())
        actions.append(u.copy())
        next_states.append(nxt.as_array())
        rings.append(obs.ring)
        per_ring[min(obs.ring, real.geom.n_rings - 1)] += 1
        obs = nxt
        tick += 1
        solved = events["solved"]
    return EpisodeRecord(seed=seed, stage="random", solved=solved, wall_ticks=tick,
                         per_ring_ticks=per_ring,
                         states=np.array(states).reshape(-1, 4),
                         actions=np.array(actions).reshape(-1, 2),
                         next_states=np.array(next_states).reshape(-1, 4),
                         rings=np.array(rings, dtype=int), dt=real.dt)


def collect_per_ring_data(real: RealSystem, base_seed: int,
                          episodes_per_ring: int = 2, ticks_per_episode: int = 90
                          ) -> TransitionBuffer:
    """Random-policy segments started in every ring, for calibration studies."""
    records = []
    for ring in range(real.geom.n_rings):
        for j in range(episodes_per_ring):
            records.append(random_policy_episode(
                real, base_seed + 97 * ring + j, ticks_per_episode, start_ring=ring))
    return records_to_buffer(records)


@dataclass
class StageResult:
    label: str
    mu: FrictionParams
    model: object                      # ReducedEngine or HybridModel
    train_records: list
    eval_records: list

    @property
    def solve_rate(self) -> float:
        if not self.eval_records:
            return 0.0
        return sum(r.solved for r in self.eval_records) / len(self.eval_records)

    @property
    def mean_total_seconds(self) -> float:
        return float(np.mean([r.total_seconds for r in self.eval_records]))

    def ring_time_table(self) -> list[dict]:
        rows = []
        n_rings = len(self.eval_records[0].per_ring_ticks) if self.eval_records else 0
        for ring in range(n_rings):
            secs = [r.per_ring_ticks[ring] * r.dt for r in self.eval_records]
            rows.append({"stage": self.label, "ring": ring,
                         "mean_s": float(np.mean(secs)),
                         "std_s": float(np.std(secs)),
                         "n": len(secs)})
        return rows


@dataclass
class LearningConfig:
    geom: MazeGeometry = field(default_factory=MazeGeometry)
    servo: ServoParams = field(default_factory=ServoParams)
    mu_full: FrictionParams = FULL_MODEL_FRICTION
    mu_red_init: FrictionParams = REDUCED_MODEL_FRICTION
    noise: NoiseParams = field(default_factory=NoiseParams)
    full_params: FullModelParams = field(default_factory=FullModelParams)
    cost: CostSpec = field(default_factory=CostSpec)
    transit: TransitParams = field(default_factory=TransitParams)
    dt: float = DEFAULT_DT
    n_sub: int = DEFAULT_N_SUB
    plan_horizon: int = 90
    track_horizon: int = 10
    iter_cap: int = 3
    episode_limit_ticks: int = 1800
    n_collect: int = 5
    n_eval: int = 10
    n_gp_stages: int = 3
    exploration_std: float = 0.3
    base_seed: int = 0
    cma: CmaEsConfig = field(default_factory=lambda: CmaEsConfig(
        sigma0=1.0, max_evals=2000, f_tol=1e-14, x_tol=1e-6, seed=0))
    gp_max_points: int = 2500
    gp_starts: int = 5
    use_imm: bool = True

    def real_system(self) -> RealSystem:
        return RealSystem(self.geom, self.mu_full, self.servo, self.dt,
                          self.n_sub, self.noise, self.full_params)

    def reduced_engine(self, mu: FrictionParams) -> ReducedEngine:
        return ReducedEngine(self.geom, mu, self.servo, self.dt, self.n_sub)

    def agent(self, model, arx: ArxModel | None = None) -> Agent:
        return Agent(self.geom, model, self.cost, self.plan_horizon,
                     self.track_horizon, self.iter_cap, self.transit,
                     arx=arx, servo=self.servo, dt=self.dt)

    def collect_seed(self, stage: int, i: int) -> int:
        return self.base_seed * 1_000_000 + 1000 + stage * 50 + i

    def eval_seed(self, i: int) -> int:
        return self.base_seed * 1_000_000 + 900_000 + i


@dataclass
class LearningReport:
    stages: list[StageResult]
    mu_star: FrictionParams
    arx: ArxModel | None
    calibration_buffer_size: int

    def summary_rows(self) -> list[dict]:
        rows = []
        for stage in self.stages:
            rows.extend(stage.ring_time_table())
        return rows


def fit_inverse_motor_model(config: LearningConfig) -> ArxModel:
    """Sinusoidal excitation of the platform, then the ARX fit."""
    data = excite_and_collect(config.servo, amplitudes=[0.5, 0.25],
                              frequencies=[0.3, 0.8], duration=30.0, dt=config.dt)
    return fit_arx(data, max_tilt=config.servo.max_tilt)


def _prune_thin_rings(buf: TransitionBuffer, min_per_ring: int) -> TransitionBuffer:
    counts = buf.ring_counts()
    keep_rings = {r for r, c in counts.items() if c >= min_per_ring}
    mask = np.isin(buf.rings, list(keep_rings))
    return buf.subset(mask)


def run_learning(config: LearningConfig, progress=None) -> LearningReport:
    """The complete staged procedure; deterministic for a fixed config."""

    def log(msg: str) -> None:
        if progress is not None:
            progress(msg)

    arx = fit_inverse_motor_model(config) if config.use_imm else None
    real = config.real_system()

    # exploratory episodes with the uncalibrated internal model feed CMA-ES
    log("collecting calibration episodes with the uncalibrated model")
    agent0 = config.agent(config.reduced_engine(config.mu_red_init), arx)
    cal_records = []
    for i in range(config.n_collect):
        rec = rollout_episode(real, agent0, config.collect_seed(0, i),
                              config.episode_limit_ticks,
                              exploration_std=config.exploration_std,
                              stage="calibration")
        cal_records.append(rec)
        log(f"  episode {i}: {rec.wall_ticks} ticks, solved={rec.solved}")

    cal_buffer = _prune_thin_rings(records_to_buffer(cal_records), 10)
    if len(cal_buffer) == 0:
        raise EstimationError("calibration episodes produced no usable transitions")
    engine_init = config.reduced_engine(config.mu_red_init)
    log(f"running CMA-ES on {len(cal_buffer)} transitions")
    mu_star, cma_result = estimate_parameters(cal_buffer, engine_init,
                                              config.mu_red_init, config.cma)
    log(f"calibrated friction: {mu_star}")

    stages: list[StageResult] = []
    gp_records: list[EpisodeRecord] = []
    current_model: object = config.reduced_engine(mu_star)

    for stage_idx in range(config.n_gp_stages + 1):
        label = STAGE_LABELS[stage_idx] if stage_idx < len(STAGE_LABELS) else \
            f"CMA-ES+GP{stage_idx}"
        if stage_idx > 0:
            log(f"stage {label}: collecting {config.n_collect} rollouts")
            train = []
            for i in range(config.n_collect):
                rec = rollout_episode(real, config.agent(current_model, arx),
                                      config.collect_seed(stage_idx, i),
                                      config.episode_limit_ticks, stage=label)
                train.append(rec)
                log(f"  episode {i}: {rec.wall_ticks} ticks, solved={rec.solved}")
            gp_records.extend(train)
            buffer = records_to_buffer(gp_records)
            log(f"  fitting residual GPs on {len(buffer)} transitions")
            current_model = fit_residual(buffer, mu_star, engine_init,
                                         max_points=config.gp_max_points,
                                         n_starts=config.gp_starts)
        else:
            train = []

        log(f"stage {label}: evaluating on {config.n_eval} seeds")
        evals = []
        for i in range(config.n_eval):
            rec = rollout_episode(real, config.agent(current_model, arx),
                                  config.eval_seed(i),
                                  config.episode_limit_ticks, stage=label)
            evals.append(rec)
        stages.append(StageResult(label=label, mu=mu_star, model=current_model,
                                  train_records=train, eval_records=evals))
        log(f"  solve rate {stages[-1].solve_rate:.0%}, "
            f"mean total {stages[-1].mean_total_seconds:.1f}s")

    return LearningReport(stages=stages, mu_star=mu_star, arx=arx,
                          calibration_buffer_size=len(cal_buffer))


def agent_from_snapshot(config: LearningConfig, snapshot: str | None
                        ) -> tuple[Agent, str]:
    """Build an agent from a saved model snapshot (hybrid or friction JSON).

    Without a snapshot the agent gets a reduced engine carrying the real
    system's friction: a best-case internal model for demo sessions.
    """
    import json
    from pathlib import Path

    arx = fit_inverse_motor_model(config) if config.use_imm else None
    if snapshot is None:
        return config.agent(config.reduced_engine(config.mu_full), arx), \
            "reduced engine (demo friction)"
    path = Path(snapshot)
    if not path.exists():
        raise FileNotFoundError(f"model snapshot not found: {snapshot}")
    payload = json.loads(path.read_text())
    if "rings" in payload:
        model = HybridModel.from_dict(payload, config.reduced_engine(config.mu_red_init))
        return config.agent(model, arx), "hybrid model"
    mu = FrictionParams(**payload)
    return config.agent(config.reduced_engine(mu), arx), "reduced engine (calibrated)"
