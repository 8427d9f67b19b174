"""Self-contained 2D Push-T environment with keypoint observations.

A circular end-effector pushes a T-shaped block toward a fixed goal pose in
a 500x500 workspace. Contacts use a quasi-static push model: per-substep
penetration depth along the contact normal translates the block and twists
it about the centroid. The dynamic variant adds a ball flying at 100
units/s that bounces off the walls and the end-effector and shoves the block
by the same rule.

All randomness flows through explicit seeds; stepping is purely
deterministic, so recorded episodes replay bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import Episode
from .util import rng_from

WORKSPACE = 500.0
EE_RADIUS = 15.0
BALL_RADIUS = 12.0
BALL_SPEED = 100.0
STEP_CAP = 10.0
DT = 0.1
GOAL_POSE = np.array([250.0, 250.0, np.pi / 4])
SUCCESS_COVERAGE = 0.95
COVERAGE_SAMPLES = 4096

# Canonical T: 120x30 top bar over a 30x90 stem, centroid at the origin.
_BAR_W, _BAR_H = 120.0, 30.0
_STEM_W, _STEM_H = 30.0, 90.0
_SHIFT = 75.0 / 7.0  # lifts the raw outline so the area centroid is (0, 0)
BAR_Y = (_SHIFT, _SHIFT + _BAR_H)          # canonical bar y-range
STEM_Y = (_SHIFT - _STEM_H, _SHIFT)        # canonical stem y-range

T_OUTLINE = np.array([
    (-_BAR_W / 2, BAR_Y[1]),
    (_BAR_W / 2, BAR_Y[1]),
    (_BAR_W / 2, BAR_Y[0]),
    (_STEM_W / 2, BAR_Y[0]),
    (_STEM_W / 2, STEM_Y[0]),
    (-_STEM_W / 2, STEM_Y[0]),
    (-_STEM_W / 2, BAR_Y[0]),
    (-_BAR_W / 2, BAR_Y[0]),
])
# nine keypoints: the eight outline corners plus the bar midpoint
T_KEYPOINTS = np.vstack([T_OUTLINE, [(0.0, (BAR_Y[0] + BAR_Y[1]) / 2)]])


def _gyration_sq() -> float:
    """Second moment of area over area for the composite T."""
    bar_c = np.array([0.0, (BAR_Y[0] + BAR_Y[1]) / 2])
    stem_c = np.array([0.0, (STEM_Y[0] + STEM_Y[1]) / 2])
    a_bar, a_stem = _BAR_W * _BAR_H, _STEM_W * _STEM_H
    i_bar = (_BAR_W**2 + _BAR_H**2) / 12 + bar_c @ bar_c
    i_stem = (_STEM_W**2 + _STEM_H**2) / 12 + stem_c @ stem_c
    return (a_bar * i_bar + a_stem * i_stem) / (a_bar + a_stem)


GYRATION_SQ = _gyration_sq()


@dataclass
class SimState:
    ee: np.ndarray                      # (2,)
    block: np.ndarray                   # (3,) x, y, theta
    goal: np.ndarray                    # (3,)
    ball: np.ndarray | None = None      # (2,) position
    ball_vel: np.ndarray | None = None  # (2,), speed BALL_SPEED when present
    t: int = 0
    dt: float = DT
    variant: str = "static"

    def copy(self) -> "SimState":
        return SimState(
            ee=self.ee.copy(), block=self.block.copy(), goal=self.goal.copy(),
            ball=None if self.ball is None else self.ball.copy(),
            ball_vel=None if self.ball_vel is None else self.ball_vel.copy(),
            t=self.t, dt=self.dt, variant=self.variant)


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_world(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return pts @ _rot(pose[2]).T + pose[:2]


def to_canonical(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return (np.atleast_2d(pts) - pose[:2]) @ _rot(pose[2])


def block_outline(pose: np.ndarray) -> np.ndarray:
    return to_world(pose, T_OUTLINE)


def block_keypoints(pose: np.ndarray) -> np.ndarray:
    return to_world(pose, T_KEYPOINTS)


def points_in_block(pose: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Membership test via the canonical frame's two axis-aligned rectangles."""
    local = to_canonical(pose, pts)
    x, y = local[:, 0], local[:, 1]
    in_bar = (np.abs(x) <= _BAR_W / 2) & (y >= BAR_Y[0]) & (y <= BAR_Y[1])
    in_stem = (np.abs(x) <= _STEM_W / 2) & (y >= STEM_Y[0]) & (y <= STEM_Y[1])
    return in_bar | in_stem


_EDGE_A = T_OUTLINE
_EDGE_AB = np.roll(T_OUTLINE, -1, axis=0) - T_OUTLINE
_EDGE_LEN_SQ = np.maximum(np.sum(_EDGE_AB * _EDGE_AB, axis=1), 1e-12)


def closest_boundary_point(pose: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Closest point on the T outline to p (world coordinates)."""
    local = to_canonical(pose, p)[0]
    t = np.clip(np.sum((local - _EDGE_A) * _EDGE_AB, axis=1) / _EDGE_LEN_SQ, 0.0, 1.0)
    cand = _EDGE_A + t[:, None] * _EDGE_AB
    d2 = np.sum((cand - local) ** 2, axis=1)
    return to_world(pose, cand[np.argmin(d2)][None])[0]


def circle_block_contact(pose: np.ndarray, center: np.ndarray, radius: float):
    """Penetration depth and push direction for a circle against the block.

    Returns (depth, push_dir, contact_point) or None. push_dir points from
    the circle into the block, i.e. the direction the block gets shoved.
    """
    contact = closest_boundary_point(pose, center)
    delta = contact - center
    dist = float(np.linalg.norm(delta))
    inside = bool(points_in_block(pose, center[None])[0])
    if inside:
        # overlap: shove the block away from the intruder, one radius at most
        away = pose[:2] - center
        n = away / max(np.linalg.norm(away), 1e-9)
        return radius, n, contact
    if dist >= radius:
        return None
    n = delta / max(dist, 1e-9)
    return radius - dist, n, contact


def _apply_push(state: SimState, depth: float, push_dir: np.ndarray,
                contact: np.ndarray) -> None:
    """Quasi-static response: translate along the normal, twist from torque."""
    state.block[:2] += depth * push_dir
    r = contact - state.block[:2]
    torque = r[0] * push_dir[1] - r[1] * push_dir[0]
    state.block[2] += depth * torque / GYRATION_SQ
    state.block[0] = np.clip(state.block[0], 0.0, WORKSPACE)
    state.block[1] = np.clip(state.block[1], 0.0, WORKSPACE)


def reset(seed: int, variant: str = "static") -> SimState:
    """Random non-overlapping block pose and ee position; ball in dynamic mode."""
    if variant not in ("static", "dynamic"):
        raise ValueError(f"reset: unknown variant {variant!r}")
    rng = rng_from(seed, 0x5E7)
    while True:
        block = np.array([rng.uniform(120, 380), rng.uniform(120, 380),
                          rng.uniform(-np.pi, np.pi)])
        ee = rng.uniform(30, WORKSPACE - 30, size=2)
        if circle_block_contact(block, ee, EE_RADIUS + 2.0) is None:
            break
    state = SimState(ee=ee, block=block, goal=GOAL_POSE.copy(), variant=variant)
    if variant == "dynamic":
        while True:
            pos = rng.uniform(60, WORKSPACE - 60, size=2)
            clear_of_block = circle_block_contact(block, pos, BALL_RADIUS + 2.0) is None
            if clear_of_block and np.linalg.norm(pos - ee) > EE_RADIUS + BALL_RADIUS + 5:
                break
        angle = rng.uniform(-np.pi, np.pi)
        state.ball = pos
        state.ball_vel = BALL_SPEED * np.array([np.cos(angle), np.sin(angle)])
    return state


def _advance_ball(state: SimState, dt: float) -> None:
    pos = state.ball + state.ball_vel * dt
    vel = state.ball_vel.copy()
    for axis in (0, 1):
        if pos[axis] < BALL_RADIUS:
            pos[axis] = 2 * BALL_RADIUS - pos[axis]
            vel[axis] = -vel[axis]
        elif pos[axis] > WORKSPACE - BALL_RADIUS:
            pos[axis] = 2 * (WORKSPACE - BALL_RADIUS) - pos[axis]
            vel[axis] = -vel[axis]
    # bounce off the end-effector disc
    d = pos - state.ee
    dist = float(np.linalg.norm(d))
    min_dist = BALL_RADIUS + EE_RADIUS
    if dist < min_dist:
        n = d / max(dist, 1e-9)
        vel = vel - 2.0 * np.dot(vel, n) * n
        pos = state.ee + n * min_dist
    # shove the block, then bounce off it
    hit = circle_block_contact(state.block, pos, BALL_RADIUS)
    if hit is not None:
        depth, push_dir, contact = hit
        _apply_push(state, depth, push_dir, contact)
        n = -push_dir
        vel = vel - 2.0 * np.dot(vel, n) * n
        pos = pos + n * (depth + 0.5)
    state.ball = np.clip(pos, BALL_RADIUS, WORKSPACE - BALL_RADIUS)
    state.ball_vel = vel / np.linalg.norm(vel) * BALL_SPEED


def step(state: SimState, action: np.ndarray) -> SimState:
    """Advance one control period toward the target ee position.

    The ee displacement is capped per step and integrated in unit-length
    substeps so contacts resolve before tunneling can happen.
    """
    out = state.copy()
    target = np.clip(np.asarray(action, dtype=np.float64), 0.0, WORKSPACE)
    move = target - out.ee
    dist = float(np.linalg.norm(move))
    if dist > STEP_CAP:
        move = move * (STEP_CAP / dist)
        dist = STEP_CAP
    n_sub = max(1, int(np.ceil(dist / 1.0)))
    ball_sub_dt = out.dt / max(n_sub, 1)
    for i in range(n_sub):
        out.ee = np.clip(out.ee + move / n_sub, 0.0, WORKSPACE)
        hit = circle_block_contact(out.block, out.ee, EE_RADIUS)
        if hit is not None:
            _apply_push(out, *hit)
        if out.ball is not None:
            _advance_ball(out, ball_sub_dt)
    out.t = state.t + 1
    return out


def observe(state: SimState) -> np.ndarray:
    """22 reals in [-1, 1]: 9 block keypoints, ee, ball (zeros when absent)."""
    kp = block_keypoints(state.block).reshape(-1)
    ball = state.ball if state.ball is not None else None
    parts = [kp, state.ee, ball if ball is not None else np.full(2, WORKSPACE / 2)]
    raw = np.concatenate(parts)
    scaled = raw / (WORKSPACE / 2) - 1.0
    if ball is None:
        scaled[-2:] = 0.0
    return scaled


def _halton(n: int, base: int) -> np.ndarray:
    out = np.zeros(n)
    for i in range(n):
        f, x, idx = 1.0, 0.0, i + 1
        while idx > 0:
            f /= base
            x += f * (idx % base)
            idx //= base
        out[i] = x
    return out


def _canonical_fill_points(n: int) -> np.ndarray:
    """Fixed low-discrepancy points covering the canonical T region."""
    lo = T_OUTLINE.min(axis=0)
    hi = T_OUTLINE.max(axis=0)
    pts, want = [], n
    h1, h2 = _halton(4 * n, 2), _halton(4 * n, 3)
    cand = np.stack([lo[0] + (hi[0] - lo[0]) * h1, lo[1] + (hi[1] - lo[1]) * h2], axis=1)
    identity = np.zeros(3)
    keep = cand[points_in_block(identity, cand)]
    if len(keep) < want:  # bounding-box fill ratio is ~0.58, 4x oversampling suffices
        raise RuntimeError("coverage: not enough low-discrepancy samples")
    return keep[:want]


_FILL_CACHE: dict[int, np.ndarray] = {}


def coverage(state: SimState, n_samples: int = COVERAGE_SAMPLES) -> float:
    """Monte-Carlo fraction of the goal T region covered by the block T."""
    if n_samples < 1:
        raise ValueError("coverage: n_samples must be >= 1")
    if n_samples not in _FILL_CACHE:
        _FILL_CACHE[n_samples] = _canonical_fill_points(n_samples)
    goal_pts = to_world(state.goal, _FILL_CACHE[n_samples])
    return float(np.mean(points_in_block(state.block, goal_pts)))


# -- scripted expert -----------------------------------------------------------

_ORBIT_RADIUS = 105.0
_PUSH_DEPTH = 22.0
_ROT_GATE_NEAR = 0.045
_POLISH_POS = 18.0


def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


def _ray_boundary_hit(pose: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Boundary point where the centroid-anchored ray exits the block (world)."""
    d = direction / max(np.linalg.norm(direction), 1e-9)
    ts = np.linspace(1.0, 130.0, 260)
    pts = pose[:2] + ts[:, None] * d
    inside = points_in_block(pose, pts)
    outside = np.nonzero(~inside)[0]
    t_exit = ts[outside[0]] if outside.size else 130.0
    return pose[:2] + t_exit * d


def _boundary_distance(pose: np.ndarray, p: np.ndarray) -> float:
    return float(np.linalg.norm(p - closest_boundary_point(pose, p)))


def _path_blocked(pose: np.ndarray, a: np.ndarray, b: np.ndarray,
                  clearance: float) -> bool:
    """True if the segment a->b grazes the block, ignoring the approach tail."""
    length = float(np.linalg.norm(b - a))
    if length < 1e-6:
        return False
    ts = np.linspace(0.0, 1.0, 25)
    pts = a[None] + ts[:, None] * (b - a)[None]
    keep = (1.0 - ts) * length > 28.0  # the tail is allowed to end at the block
    pts = pts[keep]
    if pts.size == 0:
        return False
    if np.any(points_in_block(pose, pts)):
        return True
    dists = [_boundary_distance(pose, p) for p in pts]
    return bool(min(dists) < clearance)


def _predict_ball_threat(state: SimState, lookahead_steps: int = 15):
    """First predicted ball position that would strike the block, if any."""
    if state.ball is None:
        return None
    pos = state.ball.copy()
    vel = state.ball_vel.copy()
    sub = state.dt
    for _ in range(lookahead_steps):
        pos = pos + vel * sub
        for axis in (0, 1):
            if pos[axis] < BALL_RADIUS or pos[axis] > WORKSPACE - BALL_RADIUS:
                vel[axis] = -vel[axis]
                pos[axis] = np.clip(pos[axis], BALL_RADIUS, WORKSPACE - BALL_RADIUS)
        if circle_block_contact(state.block, pos, BALL_RADIUS + 6.0) is not None:
            return pos, vel
    return None


def _greedy_cover_move(state: SimState, base_cov: float) -> np.ndarray | None:
    """Polish phase: simulate micro-moves, keep the one that lifts coverage.

    Candidate rollouts run without the ball so the choice depends only on
    controllable physics; None when nothing improves.
    """
    probe = state.copy()
    probe.ball = None
    probe.ball_vel = None
    best_cov, best_target = base_cov + 1e-3, None
    for radius in (10.0, 5.0, 2.5):
        for ang in np.linspace(0.0, 2 * np.pi, 12, endpoint=False):
            target = state.ee + radius * np.array([np.cos(ang), np.sin(ang)])
            if np.any(target < 0.0) or np.any(target > WORKSPACE):
                continue
            cov = coverage(step(probe, target))
            if cov > best_cov:
                best_cov, best_target = cov, target
    return best_target


def scripted_expert(state: SimState) -> np.ndarray:
    """Push controller: rotate within a gate of the goal angle, translate
    through the centroid, polish with simulated micro-moves; deterministic
    function of the state. In the dynamic variant the ee detours to
    intercept the ball when its predicted path threatens the block.
    """
    cov = coverage(state)
    if cov >= SUCCESS_COVERAGE:
        return state.ee.copy()

    threat = _predict_ball_threat(state)
    if threat is not None:
        hit_pos, hit_vel = threat
        guard = hit_pos - hit_vel / BALL_SPEED * (EE_RADIUS + BALL_RADIUS + 2.0)
        if np.linalg.norm(guard - state.ee) > 4.0:
            return np.clip(guard, 0.0, WORKSPACE)

    pose = state.block
    dpos = state.goal[:2] - pose[:2]
    dtheta = _wrap_angle(state.goal[2] - pose[2])
    pos_err = float(np.linalg.norm(dpos))
    # far away, translation dominates; close in, polish the angle first
    rot_gate = 0.30 if pos_err > 60 else (0.20 if pos_err > 15 else _ROT_GATE_NEAR)

    if pos_err <= _POLISH_POS and abs(dtheta) <= 0.25:
        polished = _greedy_cover_move(state, cov)
        if polished is not None:
            return np.clip(polished, 0.0, WORKSPACE)

    if abs(dtheta) > rot_gate:
        # torque push on the bar: up under the right end rotates CCW, and the
        # mirrored pair lets us also pick the side that helps translation
        if dtheta > 0:
            options = [((45.0, BAR_Y[0]), (0.0, 1.0)), ((-45.0, BAR_Y[1]), (0.0, -1.0))]
        else:
            options = [((-45.0, BAR_Y[0]), (0.0, 1.0)), ((45.0, BAR_Y[1]), (0.0, -1.0))]
        R = _rot(pose[2])
        best = max(options, key=lambda o: float((R @ np.array(o[1])) @ dpos))
        contact_local, dir_local = best
        contact = to_world(pose, np.array([contact_local]))[0]
        push_dir = R @ np.array(dir_local)
        depth = float(np.clip(4.0 + 40.0 * abs(dtheta), 6.0, 20.0))
    else:
        push_dir = dpos / max(pos_err, 1e-9)
        contact = _ray_boundary_hit(pose, -push_dir)
        cap = 30.0 if pos_err > 50.0 else _PUSH_DEPTH
        depth = float(np.clip(3.0 + 0.4 * pos_err, 5.0, cap))

    staging = contact - push_dir * (EE_RADIUS + 6.0)
    rel = state.ee - contact
    along = float(rel @ push_dir)
    lateral = float(np.linalg.norm(rel - along * push_dir))

    if along < 2.0 and lateral < 12.0:
        target = contact + push_dir * depth  # aligned behind: push through
    elif not _path_blocked(pose, state.ee, staging, EE_RADIUS + 2.0):
        target = staging
    else:
        # orbit around the block, stepping the angle toward the staging side
        off = state.ee - pose[:2]
        ang = np.arctan2(off[1], off[0])
        want = np.arctan2(staging[1] - pose[1], staging[0] - pose[0])
        ang += float(np.clip(_wrap_angle(want - ang), -0.45, 0.45))
        target = pose[:2] + _ORBIT_RADIUS * np.array([np.cos(ang), np.sin(ang)])
    return np.clip(target, 0.0, WORKSPACE)


# -- episode runner ------------------------------------------------------------


class ExpertPolicy:
    """Adapter exposing the scripted expert through the policy protocol."""

    wants_state = True

    def __call__(self, state: SimState) -> np.ndarray:
        return scripted_expert(state)[None]


def run_episode(policy, variant: str, seed: int, max_steps: int = 300,
                action_exec: int = 4, source: str = "policy") -> tuple[Episode, float]:
    """Receding-horizon rollout: plan, execute a prefix, replan.

    `policy(obs) -> (n, 2) array` of ee targets in workspace units; the first
    `action_exec` rows are applied (fewer if the plan is shorter). Policies
    with a truthy `wants_state` receive the full SimState instead of the
    observation vector. Ends at `max_steps` or when coverage reaches the
    success threshold.
    """
    state = reset(seed, variant)
    observations, actions, coverages, ee_path = [], [], [], [state.ee.copy()]
    cov = coverage(state)
    done = False
    while len(actions) < max_steps and not done:
        policy_input = state if getattr(policy, "wants_state", False) else observe(state)
        plan = np.atleast_2d(np.asarray(policy(policy_input), dtype=np.float64))
        for row in plan[:action_exec]:
            observations.append(observe(state))
            actions.append(np.clip(row, 0.0, WORKSPACE))
            state = step(state, row)
            ee_path.append(state.ee.copy())
            cov = coverage(state)
            coverages.append(cov)
            if cov >= SUCCESS_COVERAGE or len(actions) >= max_steps:
                done = cov >= SUCCESS_COVERAGE
                break
    episode = Episode(
        env=f"pusht-{variant}",
        dt=state.dt,
        observations=np.array(observations),
        actions=np.array(actions),
        meta={
            "seed": int(seed),
            "source": source,
            "variant": variant,
            "coverages": [float(c) for c in coverages],
            "final_coverage": float(cov),
            "ee_path": np.array(ee_path).tolist(),
        },
    )
    return episode, float(cov)


def replay_episode(episode: Episode) -> np.ndarray:
    """Re-simulate from the stored seed and actions, returning observations."""
    state = reset(episode.meta["seed"], episode.meta["variant"])
    observations = []
    for action in episode.actions:
        observations.append(observe(state))
        state = step(state, action)
    return np.array(observations)
