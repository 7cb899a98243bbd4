"""Command-line experiment runner.

Subcommands: calibrate, learn, eval, play-agent, serve, export. Every run is
reproducible from its config and seed; outputs land only under --out.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .dynamics import FrictionParams
from .estimation import estimate_parameters, one_step_theta_rmse, save_cma_history
from .records import (
    ensure_dir,
    episode_summary,
    episode_trace_reduced,
    save_episode_log,
    save_manifest,
    save_summary_table,
    save_telemetry,
    save_trajectory,
)
from .residual import HybridModel
from .pipeline import (
    agent_from_snapshot,
    collect_per_ring_data,
    random_policy_episode,
    rollout_episode,
    run_learning,
)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config, seed=args.seed, out_dir=args.out)


def _friction_json(mu: FrictionParams) -> dict:
    return {"slide": mu.slide, "spin": mu.spin, "roll": mu.roll, "floss": mu.floss}


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print("config ok; dry run, nothing written")
        return 0
    out = ensure_dir(cfg.out_dir)
    lc = cfg.learning
    real = lc.real_system()

    buffer = collect_per_ring_data(real, base_seed=cfg.seed,
                                   episodes_per_ring=2, ticks_per_episode=90)
    # train on roughly ten transitions per ring; hold the rest out
    train_mask = np.zeros(len(buffer), dtype=bool)
    for ring in range(lc.geom.n_rings):
        idx = np.nonzero(buffer.rings == ring)[0][:args.train_per_ring]
        train_mask[idx] = True
    train = buffer.subset(train_mask)
    holdout = buffer.subset(~train_mask)

    engine = lc.reduced_engine(lc.mu_red_init)
    rmse_before = one_step_theta_rmse(holdout, lc.mu_red_init, engine)
    mu_star, result = estimate_parameters(train, engine, lc.mu_red_init, lc.cma,
                                          min_per_ring=min(10, args.train_per_ring))
    rmse_after = one_step_theta_rmse(holdout, mu_star, engine)

    save_cma_history(str(out / "cma_history.csv"), result)
    report = {
        "mu_init": _friction_json(lc.mu_red_init),
        "mu_star": _friction_json(mu_star),
        "train_transitions": len(train),
        "holdout_transitions": len(holdout),
        "holdout_rmse_before": rmse_before,
        "holdout_rmse_after": rmse_after,
        "improvement_factor": rmse_before / max(rmse_after, 1e-300),
        "cma_evals": result.evals,
        "cma_stop": result.stop_reason,
    }
    save_manifest(str(out / "calibration.json"), report)

    # comparison trajectories: real system vs the reduced engine replaying the
    # same commands from the same starts, before and after calibration
    for i in range(3):
        rec = random_policy_episode(lc.real_system(), seed=cfg.seed + 50 + i,
                                    n_ticks=150)
        engine_cal = lc.reduced_engine(mu_star)
        x_def = rec.states[0].copy()
        x_cal = rec.states[0].copy()
        rows = []
        for k in range(rec.wall_ticks):
            rows.append([k * lc.dt, rec.states[k][2], x_def[2], x_cal[2]])
            x_def = engine.step_single(x_def, rec.actions[k], int(rec.rings[k]))
            x_cal = engine_cal.step_single(x_cal, rec.actions[k], int(rec.rings[k]))
        with open(out / f"trajectory_compare_{i}.csv", "w") as fh:
            fh.write("t,theta_real,theta_default,theta_calibrated\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    print(f"calibration: holdout rmse {rmse_before:.3e} -> {rmse_after:.3e} "
          f"({report['improvement_factor']:.1f}x), mu* written to {out}")
    if rmse_after >= rmse_before:
        print("calibration failed to improve the model", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


def cmd_learn(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print("config ok; dry run, nothing written")
        return 0
    out = ensure_dir(cfg.out_dir)
    progress = None if args.quiet else lambda msg: print(msg, flush=True)
    report = run_learning(cfg.learning, progress=progress)

    rows = report.summary_rows()
    save_summary_table(str(out / "ring_times.csv"), str(out / "ring_times.txt"), rows)
    manifest = {
        "seed": cfg.seed,
        "mu_star": _friction_json(report.mu_star),
        "calibration_transitions": report.calibration_buffer_size,
        "stages": [],
        "config": cfg.to_dict(),
    }
    for stage in report.stages:
        stage_dir = ensure_dir(out / stage.label.replace("+", "_"))
        save_episode_log(str(stage_dir / "eval_episodes.jsonl"), stage.eval_records)
        if stage.train_records:
            save_episode_log(str(stage_dir / "train_episodes.jsonl"), stage.train_records)
        for i, rec in enumerate(stage.eval_records):
            save_trajectory(str(stage_dir / f"eval_{i:02d}_trajectory.csv"),
                            episode_trace_reduced(rec))
            save_telemetry(str(stage_dir / f"eval_{i:02d}_telemetry.csv"), rec)
        if isinstance(stage.model, HybridModel):
            stage.model.save(str(stage_dir / "model.json"))
        manifest["stages"].append({
            "label": stage.label,
            "solve_rate": stage.solve_rate,
            "mean_total_s": stage.mean_total_seconds,
            "eval_seeds": [r.seed for r in stage.eval_records],
            "rings": stage.ring_time_table(),
        })
    save_manifest(str(out / "manifest.json"), manifest)
    if not args.quiet:
        print(open(out / "ring_times.txt").read())
    print(f"learning run written to {out}")
    return 0



def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print("config ok; dry run, nothing written")
        return 0
    out = ensure_dir(cfg.out_dir)
    lc = cfg.learning
    agent, kind = agent_from_snapshot(cfg.learning, args.model)
    records = []
    for i in range(lc.n_eval):
        rec = rollout_episode(lc.real_system(), agent, lc.eval_seed(i),
                              lc.episode_limit_ticks, stage="eval")
        records.append(rec)
        print(f"episode {i}: solved={rec.solved} total={rec.total_seconds:.1f}s")
    save_episode_log(str(out / "eval_episodes.jsonl"), records)
    rows = []
    for ring in range(lc.geom.n_rings):
        secs = [r.per_ring_ticks[ring] * r.dt for r in records]
        rows.append({"stage": "eval", "ring": ring, "mean_s": float(np.mean(secs)),
                     "std_s": float(np.std(secs)), "n": len(secs)})
    save_summary_table(str(out / "ring_times.csv"), str(out / "ring_times.txt"), rows)
    solve_rate = sum(r.solved for r in records) / max(len(records), 1)
    print(f"{kind}: solve rate {solve_rate:.0%}")
    return 0


def cmd_play_agent(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print("config ok; dry run, nothing written")
        return 0
    out = ensure_dir(cfg.out_dir)
    lc = cfg.learning
    agent, kind = agent_from_snapshot(cfg.learning, args.model)
    real = lc.real_system()

    if args.headless:
        rec = rollout_episode(real, agent, cfg.seed, lc.episode_limit_ticks,
                              stage="play", record_full=True)
        save_trajectory(str(out / "play_trajectory.csv"), rec.full_trace)
        save_telemetry(str(out / "play_telemetry.csv"), rec)
        save_episode_log(str(out / "play_episode.jsonl"), [rec])
        print(f"solved={rec.solved} total={rec.total_seconds:.1f}s "
              f"({kind}); trajectory written to {out}")
        return 0

    # paced mode: run the same episode in real time with a live status line
    obs = real.reset(cfg.seed)
    agent.reset()
    tick = 0
    t_start = time.monotonic()
    solved = False
    while tick < lc.episode_limit_ticks:
        u, info = agent.act(obs, tick)
        events = real.step(np.asarray(u))
        obs = real.observe()
        tick += 1
        deadline = t_start + tick * lc.dt
        delay = deadline - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        if tick % 15 == 0 or events["solved"]:
            print(f"\rt={tick / 30:6.1f}s ring={min(obs.ring, 4)} "
                  f"theta={obs.theta:+.2f} mode={info.mode}   ", end="", flush=True)
        if events["solved"]:
            solved = True
            break
    print(f"\nsolved={solved} in {tick / 30:.1f}s")
    return 0


def cmd_serve(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        print("config ok; dry run, nothing started")
        return 0
    import uvicorn

    from .server import create_app

    snapshot = args.model
    app = create_app(cfg, model_snapshot=snapshot)
    host = args.host or cfg.server.host
    port = args.port or cfg.server.port
    print(f"serving maze sessions on ws://{host}:{port}/ws")
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def cmd_export(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(cfg.out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        print(f"no manifest found at {manifest_path}", file=sys.stderr)
        return RUNTIME_EXIT
    manifest = json.loads(manifest_path.read_text())
    rows = []
    for stage in manifest.get("stages", []):
        for r in stage.get("rings", []):
            rows.append(r)
    save_summary_table(str(out_dir / "export_ring_times.csv"),
                       str(out_dir / "export_ring_times.txt"), rows)
    totals = [{"stage": s["label"], "solve_rate": s["solve_rate"],
               "mean_total_s": s["mean_total_s"]} for s in manifest.get("stages", [])]
    save_manifest(str(out_dir / "export_totals.json"), {"stages": totals})
    print(f"export written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiltmaze",
        description="circular-maze marble control: calibration, learning, play")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="experiment seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--dry-run", action="store_true",
                       help="validate configuration and exit")

    p = sub.add_parser("calibrate", help="friction estimation from excitation data")
    common(p)
    p.add_argument("--train-per-ring", type=int, default=10,
                   help="training transitions kept per ring")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("learn", help="full staged learning run")
    common(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("eval", help="evaluate a model snapshot")
    common(p)
    p.add_argument("--model", default=None, help="model snapshot JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("play-agent", help="run one visible agent episode")
    common(p)
    p.add_argument("--model", default=None, help="model snapshot JSON")
    p.add_argument("--headless", action="store_true",
                   help="run at full speed and only write files")
    p.set_defaults(func=cmd_play_agent)

    p = sub.add_parser("serve", help="host live play/watch sessions")
    common(p)
    p.add_argument("--model", default=None, help="agent model snapshot JSON")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="re-emit summary tables from a manifest")
    common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_EXIT if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
