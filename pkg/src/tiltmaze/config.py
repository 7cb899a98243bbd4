"""Experiment configuration: YAML in, fully-typed config out.

Every knob of the learning pipeline, the simulators, and the session server
lives here so a single file pins an entire experiment. Seeds are explicit;
nothing is ever seeded from the clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .control import CostSpec
from .dynamics import (
    DEFAULT_DT,
    DEFAULT_N_SUB,
    FULL_MODEL_FRICTION,
    REDUCED_MODEL_FRICTION,
    FrictionParams,
    FullModelParams,
)
from .estimation import CmaEsConfig
from .geometry import MazeGeometry
from .motor import ServoParams
from .pipeline import LearningConfig, NoiseParams, TransitParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8765
    max_sessions: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "out"
    learning: LearningConfig = field(default_factory=LearningConfig)
    server: ServerConfig = field(default_factory=ServerConfig)

    def to_dict(self) -> dict:
        lc = self.learning
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "geometry": lc.geom.to_dict(),
            "servo": {"tau": lc.servo.tau, "max_tilt": lc.servo.max_tilt,
                      "rate_limit": lc.servo.rate_limit},
            "friction": {
                "full": _friction_dict(lc.mu_full),
                "reduced": _friction_dict(lc.mu_red_init),
            },
            "noise": {"sigma_theta": lc.noise.sigma_theta,
                      "sigma_theta_dot": lc.noise.sigma_theta_dot},
            "full_model": {"kappa_spin": lc.full_params.kappa_spin,
                           "wall_restitution": lc.full_params.wall_restitution,
                           "spin_init_std": lc.full_params.spin_init_std},
            "cost": {"W": list(lc.cost.W), "lambda_u": lc.cost.lambda_u,
                     "Q": list(lc.cost.Q), "terminal_scale": lc.cost.terminal_scale},
            "transit": {"eps_gate": lc.transit.eps_gate, "eps_vel": lc.transit.eps_vel,
                        "duration_s": lc.transit.duration_s,
                        "tilt_scale": lc.transit.tilt_scale,
                        "timeout_factor": lc.transit.timeout_factor,
                        "cooldown_ticks": lc.transit.cooldown_ticks},
            "control": {"dt": lc.dt, "n_sub": lc.n_sub,
                        "plan_horizon": lc.plan_horizon,
                        "track_horizon": lc.track_horizon,
                        "iter_cap": lc.iter_cap,
                        "episode_limit_ticks": lc.episode_limit_ticks},
            "learning": {"n_collect": lc.n_collect, "n_eval": lc.n_eval,
                         "n_gp_stages": lc.n_gp_stages,
                         "exploration_std": lc.exploration_std,
                         "use_imm": lc.use_imm,
                         "gp_max_points": lc.gp_max_points,
                         "gp_starts": lc.gp_starts},
            "cmaes": {"population": lc.cma.population,
                      "sigma0": lc.cma.sigma0 if not hasattr(lc.cma.sigma0, "tolist")
                      else list(lc.cma.sigma0),
                      "max_evals": lc.cma.max_evals, "f_tol": lc.cma.f_tol,
                      "x_tol": lc.cma.x_tol, "seed": lc.cma.seed},
            "server": {"host": self.server.host, "port": self.server.port,
                       "max_sessions": self.server.max_sessions},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        base = cls()
        seed = int(data.get("seed", base.seed))
        out_dir = str(data.get("out_dir", base.out_dir))

        geom = MazeGeometry.from_dict(data["geometry"]) if "geometry" in data \
            else MazeGeometry()
        servo = ServoParams(**data["servo"]) if "servo" in data else ServoParams()
        fr = data.get("friction", {})
        mu_full = _friction_from(fr.get("full")) or FULL_MODEL_FRICTION
        mu_red = _friction_from(fr.get("reduced")) or REDUCED_MODEL_FRICTION
        noise = NoiseParams(**data["noise"]) if "noise" in data else NoiseParams()
        full_params = FullModelParams(**data["full_model"]) if "full_model" in data \
            else FullModelParams()
        if "cost" in data:
            c = dict(data["cost"])
            c["W"] = tuple(c.get("W", CostSpec().W))
            if c.get("Q") is not None:
                c["Q"] = tuple(c["Q"])
            cost = CostSpec(**c)
        else:
            cost = CostSpec()
        transit = TransitParams(**data["transit"]) if "transit" in data else TransitParams()
        ctrl = data.get("control", {})
        learn = data.get("learning", {})
        cma_raw = dict(data.get("cmaes", {}))
        cma = CmaEsConfig(
            population=cma_raw.get("population"),
            sigma0=cma_raw.get("sigma0", 1.0),
            max_evals=int(cma_raw.get("max_evals", 2000)),
            f_tol=float(cma_raw.get("f_tol", 1e-14)),
            x_tol=float(cma_raw.get("x_tol", 1e-6)),
            seed=int(cma_raw.get("seed", 0)),
        )

        learning = LearningConfig(
            geom=geom, servo=servo, mu_full=mu_full, mu_red_init=mu_red,
            noise=noise, full_params=full_params, cost=cost, transit=transit,
            dt=float(ctrl.get("dt", DEFAULT_DT)),
            n_sub=int(ctrl.get("n_sub", DEFAULT_N_SUB)),
            plan_horizon=int(ctrl.get("plan_horizon", 90)),
            track_horizon=int(ctrl.get("track_horizon", 10)),
            iter_cap=int(ctrl.get("iter_cap", 3)),
            episode_limit_ticks=int(ctrl.get("episode_limit_ticks", 1800)),
            n_collect=int(learn.get("n_collect", 5)),
            n_eval=int(learn.get("n_eval", 10)),
            n_gp_stages=int(learn.get("n_gp_stages", 3)),
            exploration_std=float(learn.get("exploration_std", 0.3)),
            base_seed=seed,
            cma=cma,
            gp_max_points=int(learn.get("gp_max_points", 2500)),
            gp_starts=int(learn.get("gp_starts", 5)),
            use_imm=bool(learn.get("use_imm", True)),
        )
        server = ServerConfig(**data["server"]) if "server" in data else ServerConfig()
        return cls(seed=seed, out_dir=out_dir, learning=learning, server=server)

    @classmethod
    def load(cls, path: str | None = None, seed: int | None = None,
             out_dir: str | None = None) -> "ExperimentConfig":
        if path is None:
            cfg = cls()
        else:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {path}")
            with open(p) as fh:
                data = yaml.safe_load(fh) or {}
            cfg = cls.from_dict(data)
        if seed is not None:
            cfg.seed = seed
            cfg.learning.base_seed = seed
        if out_dir is not None:
            cfg.out_dir = out_dir
        return cfg

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _friction_dict(mu: FrictionParams) -> dict:
    return {"slide": mu.slide, "spin": mu.spin, "roll": mu.roll, "floss": mu.floss}


def _friction_from(d: dict | None) -> FrictionParams | None:
    if d is None:
        return None
    return FrictionParams(slide=float(d["slide"]), spin=float(d["spin"]),
                          roll=float(d["roll"]), floss=float(d["floss"]))
