"""Realtime session service: the simulator behind a message-framed socket.

One WebSocket connection owns one session. The client opens with
{"type": "open", "mode": "human"|"agent", "seed": int}; the server replies
with an "opened" frame carrying the maze geometry, then streams one state
frame per control tick at 30 Hz:

    {"type": "state", "tick", "t_s", "beta", "gamma", "theta", "theta_dot",
     "ring", "x", "y", "status"}

Human sessions steer with {"type": "tilt", "ux", "uy"} (held until replaced,
actuated through the same servo model as the agent) and {"type": "reset"}.
Every command is acknowledged with the tick at which it takes effect;
out-of-range tilts are clamped and flagged. Agent sessions reject control
frames and drive the platform with the NMPC agent instead. On reaching the
goal (or timing out) the session emits a summary frame with per-ring times.
All traffic is appended to a JSONL session log that can be replayed offline.
"""

from __future__ import annotations

import asyncio
import json
import math
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .config import ExperimentConfig
from .geometry import GOAL_RING
from .pipeline import Agent, RealSystem, agent_from_snapshot

TICK_RATE = 30.0


class Session:
    """One seeded world plus its controller bookkeeping; transport-agnostic."""

    def __init__(self, session_id: int, mode: str, seed: int,
                 cfg: ExperimentConfig, agent: Agent | None = None,
                 log_dir: str | None = None):
        if mode not in ("human", "agent"):
            raise ValueError(f"unknown session mode: {mode!r}")
        self.id = session_id
        self.mode = mode
        self.seed = seed
        self.cfg = cfg
        self.dt = cfg.learning.dt
        self.limit_ticks = cfg.learning.episode_limit_ticks
        self.real: RealSystem = cfg.learning.real_system()
        self.agent = agent
        self._log_path = None
        if log_dir is not None:
            Path(log_dir).mkdir(parents=True, exist_ok=True)
            self._log_path = Path(log_dir) / f"session_{session_id:04d}.jsonl"
            self._log_path.write_text("")
        self._reset_count = 0
        self._start_episode(seed)

    def _start_episode(self, seed: int) -> None:
        self.real.reset(seed)
        if self.agent is not None:
            self.agent.reset()
        self.tick = 0
        self.status = "running"
        self.held = np.zeros(2)
        self.per_ring_ticks = np.zeros(self.real.geom.n_rings, dtype=int)
        self._summary_sent = False

    def _log(self, direction: str, frame: dict) -> None:
        if self._log_path is not None:
            with open(self._log_path, "a") as fh:
                fh.write(json.dumps({"dir": direction, **frame}, sort_keys=True) + "\n")

    def opened_frame(self) -> dict:
        frame = {
            "type": "opened",
            "session": self.id,
            "mode": self.mode,
            "seed": self.seed,
            "tick_rate": TICK_RATE,
            "geometry": self.real.geom.to_dict(),
        }
        self._log("out", frame)
        return frame

    def handle_command(self, frame: dict) -> dict:
        """Validate and queue a client frame; returns the reply frame."""
        self._log("in", frame if isinstance(frame, dict) else {"raw": str(frame)})
        if not isinstance(frame, dict) or "type" not in frame:
            return self._reply({"type": "error", "message": "malformed frame"})
        ftype = frame["type"]
        if ftype == "tilt":
            if self.mode == "agent":
                return self._reply({"type": "error",
                                    "message": "agent session rejects control frames"})
            try:
                ux = float(frame["ux"])
                uy = float(frame["uy"])
            except (KeyError, TypeError, ValueError):
                return self._reply({"type": "error",
                                    "message": "tilt frame needs numeric ux, uy"})
            if not (math.isfinite(ux) and math.isfinite(uy)):
                return self._reply({"type": "error",
                                    "message": "tilt frame needs finite ux, uy"})
            clamped = abs(ux) > 1.0 or abs(uy) > 1.0
            self.held = np.clip(np.array([ux, uy]), -1.0, 1.0)
            ack = {"type": "ack", "cmd": "tilt", "tick_effective": self.tick + 1}
            if clamped:
                ack["warning"] = "clamped"
            return self._reply(ack)
        if ftype == "reset":
            if self.mode == "agent":
                return self._reply({"type": "error",
                                    "message": "agent session rejects control frames"})
            self._reset_count += 1
            new_seed = int(frame.get("seed", self.seed + 1000 * self._reset_count))
            self._start_episode(new_seed)
            return self._reply({"type": "ack", "cmd": "reset",
                                "tick_effective": 0, "seed": new_seed})
        return self._reply({"type": "error", "message": f"unknown frame type {ftype!r}"})

    def _reply(self, frame: dict) -> dict:
        self._log("out", frame)
        return frame

    def tick_once(self) -> list[dict]:
        """Advance one control tick; returns the frames to send."""
        if self.status != "running":
            return []
        obs = self.real.observe()
        if self.mode == "agent":
            u, _ = self.agent.act(obs, self.tick)
        else:
            u = self.held
        ring_before = min(obs.ring, self.real.geom.n_rings - 1)
        events = self.real.step(u)
        self.per_ring_ticks[ring_before] += 1
        self.tick += 1
        if events["solved"]:
            self.status = "solved"
        elif self.tick >= self.limit_ticks:
            self.status = "timed_out"
        frames = [self.state_frame()]
        if self.status != "running" and not self._summary_sent:
            frames.append(self.summary_frame())
            self._summary_sent = True
        for f in frames:
            self._log("out", f)
        return frames

    def state_frame(self) -> dict:
        s = self.real.state
        x, y = self.real.geom.marble_xy(s.rho, s.theta)
        return {
            "type": "state",
            "tick": self.tick,
            "t_s": round(self.tick * self.dt, 9),
            "beta": s.beta,
            "gamma": s.gamma,
            "theta": s.theta,
            "theta_dot": s.theta_dot,
            "ring": min(s.ring, GOAL_RING),
            "x": x,
            "y": y,
            "status": self.status,
        }

    def summary_frame(self) -> dict:
        return {
            "type": "summary",
            "session": self.id,
            "seed": self.seed,
            "mode": self.mode,
            "solved": self.status == "solved",
            "per_ring_s": [round(float(t * self.dt), 6) for t in self.per_ring_ticks],
            "total_s": round(float(self.tick * self.dt), 6),
        }


class SessionManager:
    def __init__(self, cfg: ExperimentConfig, model_snapshot: str | None = None,
                 log_dir: str | None = None):
        self.cfg = cfg
        self.model_snapshot = model_snapshot
        self.log_dir = log_dir
        self.sessions: dict[int, Session] = {}
        self._next_id = 0
        self._agent_cache = None

    def _make_agent(self) -> Agent:
        # the agent's planning machinery is stateful per session, so build a
        # fresh one each time; the snapshot parse is cheap
        agent, _ = agent_from_snapshot(self.cfg.learning, self.model_snapshot)
        return agent

    def open_session(self, mode: str, seed: int) -> Session:
        if len(self.sessions) >= self.cfg.server.max_sessions:
            raise RuntimeError("session capacity exceeded")
        agent = self._make_agent() if mode == "agent" else None
        session = Session(self._next_id, mode, seed, self.cfg, agent=agent,
                          log_dir=self.log_dir)
        self.sessions[session.id] = session
        self._next_id += 1
        return session

    def close_session(self, session: Session) -> None:
        self.sessions.pop(session.id, None)


def create_app(cfg: ExperimentConfig | None = None,
               model_snapshot: str | None = None,
               log_dir: str | None = None,
               static_dir: str | None = "frontend/dist") -> FastAPI:
    cfg = cfg or ExperimentConfig()
    manager = SessionManager(cfg, model_snapshot=model_snapshot, log_dir=log_dir)
    app = FastAPI(title="tiltmaze session server")
    app.state.manager = manager

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket) -> None:
        await ws.accept()
        session: Session | None = None
        try:
            opening = await ws.receive_json()
            if not isinstance(opening, dict) or opening.get("type") != "open":
                await ws.send_json({"type": "error",
                                    "message": "first frame must be an open frame"})
                await ws.close()
                return
            mode = opening.get("mode", "human")
            seed = int(opening.get("seed", 0))
            try:
                session = manager.open_session(mode, seed)
            except (RuntimeError, ValueError) as exc:
                await ws.send_json({"type": "error", "message": str(exc)})
                await ws.close()
                return
            session._log("in", opening)
            await ws.send_json(session.opened_frame())

            loop = asyncio.get_running_loop()
            send_lock = asyncio.Lock()

            async def receiver() -> None:
                while True:
                    frame = await ws.receive_json()
                    reply = session.handle_command(frame)
                    async with send_lock:
                        await ws.send_json(reply)

            async def ticker() -> None:
                t0 = loop.time()
                sent = 0
                while True:
                    sent += 1
                    deadline = t0 + sent / TICK_RATE
                    delay = deadline - loop.time()
                    if delay > 0:
                        await asyncio.sleep(delay)
                    frames = session.tick_once()
                    for frame in frames:
                        async with send_lock:
                            await ws.send_json(frame)

            recv_task = asyncio.create_task(receiver())
            tick_task = asyncio.create_task(ticker())
            done, pending = await asyncio.wait(
                {recv_task, tick_task}, return_when=asyncio.FIRST_EXCEPTION)
            for task in pending:
                task.cancel()
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(
                        exc, (WebSocketDisconnect, asyncio.CancelledError)):
                    try:
                        await ws.send_json({"type": "error",
                                            "message": f"session fault: {exc}"})
                        await ws.close()
                    except Exception:
                        pass
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            if session is not None:
                manager.close_session(session)

    static_path = Path(static_dir) if static_dir else None
    if static_path is not None and static_path.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_path), html=True),
                  name="webui")
    return app
