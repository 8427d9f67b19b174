"""Human demonstration collection over a WebSocket.

One live episode per connection: the server ticks the simulator at a fixed
rate, applying the most recent client cursor target (held when none has
arrived), records every (observation, applied action) pair, and appends
accepted episodes to the session dataset file. Text frames carry one JSON
record each; the schema is the contract with the browser client.

Episodes replay deterministically: re-simulating from the stored seed and
action list reproduces the stored observations bit-exactly.
"""

from __future__ import annotations

import asyncio
import itertools
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import pushtsim
from .datasets import Episode, append_episode

_SESSION_IDS = itertools.count()


class Session:
    def __init__(self, session_id: int, variant: str, seed_base: int):
        self.id = session_id
        self.variant = variant
        self.seed_base = seed_base
        self.episode_index = 0
        self.sim: pushtsim.SimState | None = None
        self.seed: int | None = None
        self.latest_target: np.ndarray | None = None
        self.observations: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []

    @property
    def active(self) -> bool:
        return self.sim is not None

    def start(self, variant: str | None, seed: int | None) -> dict:
        self.variant = variant or self.variant
        if seed is None:
            seed = self.seed_base + 1000 * self.id + self.episode_index
        self.seed = int(seed)
        self.episode_index += 1
        self.sim = pushtsim.reset(self.seed, self.variant)
        self.latest_target = None
        self.observations = []
        self.actions = []
        return {"type": "ack", "cmd": "start", "seed": self.seed, "variant": self.variant}

    def tick(self) -> dict:
        """Advance one simulator step with the held action; record the pair."""
        sim = self.sim
        target = self.latest_target if self.latest_target is not None else sim.ee.copy()
        target = np.clip(target, 0.0, pushtsim.WORKSPACE)
        self.observations.append(pushtsim.observe(sim))
        self.actions.append(target)
        self.sim = pushtsim.step(sim, target)
        return self.state_message()

    def state_message(self) -> dict:
        sim = self.sim
        msg = {
            "type": "state",
            "t": sim.t,
            "ee": sim.ee.tolist(),
            "block": sim.block.tolist(),
            "keypoints": pushtsim.block_keypoints(sim.block).tolist(),
            "goal_keypoints": pushtsim.block_keypoints(sim.goal).tolist(),
            "coverage": pushtsim.coverage(sim),
        }
        if sim.ball is not None:
            msg["ball"] = sim.ball.tolist()
        return msg

    def finish(self, discard: bool) -> Episode | None:
        if discard or not self.actions:
            self.sim = None
            return None
        episode = Episode(
            env=f"pusht-{self.variant}",
            dt=pushtsim.DT,
            observations=np.array(self.observations),
            actions=np.array(self.actions),
            meta={"seed": self.seed, "source": "human", "variant": self.variant},
        )
        self.sim = None
        return episode


def create_app(variant_default: str = "static", out: str = "teleop_episodes.jsonl",
               tick_hz: float = 10.0, seed_base: int = 7000) -> FastAPI:
    app = FastAPI(title="agdiff teleop")
    out_path = Path(out)
    write_lock = asyncio.Lock()
    interval = 1.0 / tick_hz
    app.state.episodes_saved = 0

    async def handle(ws: WebSocket, session: Session, text: str) -> None:
        try:
            msg = json.loads(text)
            kind = msg["type"]
        except (json.JSONDecodeError, TypeError, KeyError) as e:
            await ws.send_json({"type": "error", "message": f"malformed message: {e}"})
            return
        if kind == "action":
            try:
                target = np.asarray(msg["target"], dtype=np.float64).reshape(2)
            except (KeyError, TypeError, ValueError):
                await ws.send_json({"type": "error", "message": "action needs target: [x, y]"})
                return
            session.latest_target = np.clip(target, 0.0, pushtsim.WORKSPACE)
        elif kind == "episode_cmd":
            cmd = msg.get("cmd")
            if cmd == "start":
                if session.active:
                    await ws.send_json({"type": "error", "message": "episode already active"})
                    return
                ack = session.start(msg.get("variant"), msg.get("seed"))
                await ws.send_json(ack)
            elif cmd == "save":
                if not session.active:
                    await ws.send_json({"type": "error", "message": "save before start"})
                    return
                episode = session.finish(discard=False)
                if episode is None:
                    await ws.send_json({"type": "error",
                                        "message": "empty episode rejected (no actions recorded)"})
                    return
                async with write_lock:
                    append_episode(out_path, episode)
                    app.state.episodes_saved += 1
                await ws.send_json({"type": "ack", "cmd": "save",
                                    "steps": len(episode.actions),
                                    "count": app.state.episodes_saved})
            elif cmd == "discard":
                if not session.active:
                    await ws.send_json({"type": "error", "message": "discard before start"})
                    return
                session.finish(discard=True)
                await ws.send_json({"type": "ack", "cmd": "discard"})
            else:
                await ws.send_json({"type": "error", "message": f"unknown cmd {cmd!r}"})
        else:
            await ws.send_json({"type": "error", "message": f"unknown message type {kind!r}"})

    async def ticker(ws: WebSocket, session: Session) -> None:
        while True:
            await asyncio.sleep(interval)
            if session.active:
                await ws.send_text(json.dumps(session.tick()))

    @app.websocket("/teleop")
    async def teleop_ws(ws: WebSocket) -> None:
        await ws.accept()
        session = Session(next(_SESSION_IDS), variant_default, seed_base)
        await ws.send_json({"type": "ack", "cmd": "hello", "session": session.id,
                            "variant": session.variant, "workspace": pushtsim.WORKSPACE})
        tick_task = asyncio.create_task(ticker(ws, session))
        try:
            while True:
                text = await ws.receive_text()
                await handle(ws, session, text)
        except WebSocketDisconnect:
            pass  # mid-episode disconnect discards the recording
        finally:
            tick_task.cancel()

    return app


def serve(port: int = 8765, variant: str = "static", out: str = "teleop_episodes.jsonl",
          tick_hz: float = 10.0) -> None:
    import uvicorn

    app = create_app(variant, out, tick_hz)
    print(f"teleop server on ws://0.0.0.0:{port}/teleop (variant={variant}, out={out})")
    uvicorn.run(app, host="0.0.0.0", port=port, log_level="warning")
