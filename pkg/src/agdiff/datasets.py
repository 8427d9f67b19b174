"""Episode container, line-delimited persistence, and evaluation metrics.

One JSON record per line, one episode per record. Floats survive the round
trip bit-exactly (repr-based encoding), which is what makes the replay and
determinism checks meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
SUCCESS_COVERAGE = 0.95


@dataclass
class Episode:
    env: str
    dt: float
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray       # (T, act_dim) or (T-1, act_dim)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        n_obs, n_act = len(self.observations), len(self.actions)
        if n_act not in (n_obs, n_obs - 1):
            raise ValueError(
                f"episode: {n_act} actions incompatible with {n_obs} observations")

    def __len__(self) -> int:
        return len(self.observations)

    def equals(self, other: "Episode") -> bool:
        return (
            self.env == other.env
            and self.dt == other.dt
            and self.format_version == other.format_version
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
            and self.meta == other.meta
        )


def save_episodes(path, episodes: list[Episode]) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            record = {
                "format_version": ep.format_version,
                "env": ep.env,
                "dt": ep.dt,
                "observations": ep.observations.tolist(),
                "actions": ep.actions.tolist(),
                "meta": ep.meta,
            }
            f.write(json.dumps(record) + "\n")


def load_episodes(path) -> list[Episode]:
    episodes = []
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.decode("utf-8", errors="replace").strip()
            if line:
                try:
                    record = json.loads(line)
                    version = record["format_version"]
                    if version != FORMAT_VERSION:
                        raise ValueError(
                            f"episode file {path}: line {lineno}: format_version "
                            f"{version} != supported {FORMAT_VERSION}")
                    episodes.append(Episode(
                        env=record["env"],
                        dt=record["dt"],
                        observations=np.array(record["observations"], dtype=np.float64),
                        actions=np.array(record["actions"], dtype=np.float64),
                        meta=record["meta"],
                        format_version=version,
                    ))
                except ValueError as e:
                    if "format_version" in str(e):
                        raise
                    raise ValueError(
                        f"episode file {path}: malformed record at line {lineno}, "
                        f"byte offset {offset}: {e}") from e
                except (KeyError, TypeError) as e:
                    raise ValueError(
                        f"episode file {path}: malformed record at line {lineno}, "
                        f"byte offset {offset}: {e}") from e
            offset += len(raw)
    return episodes


def append_episode(path, episode: Episode) -> None:
    """Single-record append (teleop sessions write one episode at a time)."""
    record = {
        "format_version": episode.format_version,
        "env": episode.env,
        "dt": episode.dt,
        "observations": episode.observations.tolist(),
        "actions": episode.actions.tolist(),
        "meta": episode.meta,
    }
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def average_jerk(trajectory, dt: float) -> float:
    """Mean norm of the third finite difference divided by dt^3.

    Stencil (x_{i+3} - 3 x_{i+2} + 3 x_{i+1} - x_i) / dt^3: zero on
    polynomials up to degree 2 and exact on cubics.
    """
    x = np.asarray(trajectory, dtype=np.float64)
    if len(x) < 4:
        raise ValueError(f"average_jerk: need at least 4 points, got {len(x)}")
    if dt <= 0:
        raise ValueError("average_jerk: dt must be positive")
    if x.ndim == 1:
        x = x[:, None]
    j = (x[3:] - 3 * x[2:-1] + 3 * x[1:-2] - x[:-3]) / dt**3
    return float(np.mean(np.linalg.norm(j, axis=1)))


def aggregate_eval(episodes: list[Episode]) -> dict:
    """Coverage, success rate, completion time, and jerk over a batch of runs.

    Success means reaching coverage >= 0.95; completion time is dt times the
    first step where that happens; episodes that never succeed are excluded
    from the time mean. Jerk is computed on the executed end-effector path.
    """
    if not episodes:
        raise ValueError("aggregate_eval: empty episode list")
    finals, times, jerks = [], [], []
    successes = 0
    for ep in episodes:
        coverages = np.asarray(ep.meta.get("coverages", [ep.meta.get("final_coverage", 0.0)]))
        final = float(coverages[-1])
        finals.append(final)
        hit = np.nonzero(coverages >= SUCCESS_COVERAGE)[0]
        if hit.size:
            successes += 1
            times.append(ep.dt * float(hit[0]))
        ee_path = ep.meta.get("ee_path")
        if ee_path is not None and len(ee_path) >= 4:
            jerks.append(average_jerk(np.asarray(ee_path), ep.dt))
    return {
        "episodes": len(episodes),
        "coverage_mean": float(np.mean(finals)),
        "coverage_std": float(np.std(finals)),
        "success_rate": successes / len(episodes),
        "time_to_complete_mean": float(np.mean(times)) if times else float("nan"),
        "jerk_mean": float(np.mean(jerks)) if jerks else float("nan"),
    }
