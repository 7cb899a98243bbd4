"""On-disk record formats: trajectories, episode logs, summary tables.

Trajectory files are comma-delimited text with one row per control tick.
Column order is fixed:

    reduced:  t,beta,gamma,theta,theta_dot,ring
    full:     t,beta,gamma,theta,theta_dot,ring,rho,rho_dot,spin

Episode logs are JSON-lines, one record per episode; summary tables are
written twice, as machine-readable CSV and as an aligned human-readable text
table. All writers are deterministic: same inputs, byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .pipeline import EpisodeRecord, per_ring_times

REDUCED_COLUMNS = ("t", "beta", "gamma", "theta", "theta_dot", "ring")
FULL_COLUMNS = REDUCED_COLUMNS + ("rho", "rho_dot", "spin")


def save_trajectory(path: str, trace: np.ndarray) -> None:
    trace = np.asarray(trace)
    if trace.ndim != 2 or trace.shape[1] not in (6, 9):
        raise ValueError(f"expected (n, 6) or (n, 9) trace, got {trace.shape}")
    cols = REDUCED_COLUMNS if trace.shape[1] == 6 else FULL_COLUMNS
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in trace:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_trajectory(path: str) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def episode_summary(rec: EpisodeRecord) -> dict:
    times = per_ring_times(rec)
    return {
        "seed": rec.seed,
        "stage": rec.stage,
        "solved": bool(rec.solved),
        "wall_ticks": int(rec.wall_ticks),
        "total_s": round(rec.total_seconds, 6),
        "per_ring_s": [round(float(t * rec.dt), 6) for t in rec.per_ring_ticks],
        "fallback_ticks": int(rec.fallbacks.sum()) if rec.fallbacks is not None else 0,
    }


def save_episode_log(path: str, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(episode_summary(rec), sort_keys=True) + "\n")


def load_episode_log(path: str) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def save_telemetry(path: str, rec: EpisodeRecord) -> None:
    """Per-tick solver telemetry: tick, iterations, mode, fallback flag."""
    with open(path, "w") as fh:
        fh.write("tick,iterations,mode,fallback\n")
        n = rec.wall_ticks
        iters = rec.iterations if rec.iterations is not None else np.zeros(n, dtype=int)
        fbs = rec.fallbacks if rec.fallbacks is not None else np.zeros(n, dtype=bool)
        for k in range(n):
            mode = rec.modes[k] if k < len(rec.modes) else ""
            fh.write(f"{k},{int(iters[k])},{mode},{int(bool(fbs[k]))}\n")


def save_summary_table(csv_path: str, txt_path: str, rows: list[dict]) -> None:
    """Per-stage per-ring stats as CSV plus an aligned text table."""
    header = ("stage", "ring", "mean_s", "std_s", "n")
    with open(csv_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(f"{r['stage']},{r['ring']},{r['mean_s']:.6f},"
                     f"{r['std_s']:.6f},{r['n']}\n")
    widths = (14, 6, 10, 10, 4)
    with open(txt_path, "w") as fh:
        fh.write("".join(h.ljust(w) for h, w in zip(header, widths)) + "\n")
        fh.write("-" * sum(widths) + "\n")
        for r in rows:
            cells = (r["stage"], str(r["ring"]), f"{r['mean_s']:.2f}",
                     f"{r['std_s']:.2f}", str(r["n"]))
            fh.write("".join(c.ljust(w) for c, w in zip(cells, widths)) + "\n")


def save_manifest(path: str, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def episode_trace_reduced(rec: EpisodeRecord) -> np.ndarray:
    """(n, 6) reduced trajectory assembled from a record's transitions."""
    t = np.arange(rec.wall_ticks) * rec.dt
    return np.column_stack([t, rec.states[:, 0], rec.states[:, 1],
                            rec.states[:, 2], rec.states[:, 3], rec.rings])


def ensure_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
