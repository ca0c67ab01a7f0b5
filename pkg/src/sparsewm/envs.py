"""Deterministic toy 2D environments with exact (non-antialiased)
renderers, so per-pixel ground-truth change masks are well defined.

Three tasks on the unit square:
  pointmaze — inertial ball steering between two offset bars
  wall      — a vertical wall with a narrow door
  pushbox   — a pusher disk quasi-statically pushing a square block

All arena quantities are fractions of the arena side. Velocities follow
v <- clamp(gamma*v + alpha*a); positions resolve against walls axis by
axis so the agent slides rather than sticks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image_io import read_ppm, write_ppm

GAMMA = 0.9          # velocity retention (friction)
ALPHA = 0.05         # acceleration gain
V_MAX = 0.1          # speed cap
BETA = 0.04          # pusher step gain
R_SUCC = 0.05        # position success radius
THETA_SUCC = 0.2     # orientation success tolerance (rad)
ROT_GAIN = 0.5       # block torque gain

AGENT_RADIUS = 0.06
BLOCK_HALF = 0.08

IMAGE_HW = 64

# exact multiples of 1/255 so PPM persistence round-trips bit-exactly
BG_COLOR = (13 / 255, 13 / 255, 20 / 255)
WALL_COLOR = (140 / 255, 140 / 255, 140 / 255)
AGENT_COLOR = (217 / 255, 38 / 255, 38 / 255)
BLOCK_COLOR = (38 / 255, 89 / 255, 217 / 255)

ENV_IDS = ("pointmaze", "wall", "pushbox")


@dataclass
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    block_pos: np.ndarray | None = None
    block_angle: float | None = None

    def copy(self):
        return EnvState(
            self.agent_pos.copy(), self.agent_vel.copy(),
            None if self.block_pos is None else self.block_pos.copy(),
            self.block_angle,
        )

    def to_dict(self):
        d = {"agent_pos": self.agent_pos.tolist(), "agent_vel": self.agent_vel.tolist()}
        if self.block_pos is not None:
            d["block_pos"] = self.block_pos.tolist()
            d["block_angle"] = float(self.block_angle)
        return d

    @staticmethod
    def from_dict(d):
        return EnvState(
            np.array(d["agent_pos"], dtype=np.float64),
            np.array(d["agent_vel"], dtype=np.float64),
            np.array(d["block_pos"], dtype=np.float64) if "block_pos" in d else None,
            d.get("block_angle"),
        )


@dataclass
class Goal:
    state: EnvState
    image: np.ndarray


def _pixel_centers():
    c = (np.arange(IMAGE_HW) + 0.5) / IMAGE_HW
    return np.meshgrid(c, c)  # xc[i,j], yc[i,j] with row i -> y


_XC, _YC = _pixel_centers()


class ToyEnv:
    env_id = "base"
    walls: tuple = ()  # (x0, y0, x1, y1) rects
    has_block = False

    # -- geometry ---------------------------------------------------------

    def _disk_free(self, p, r=AGENT_RADIUS):
        if p[0] < r or p[0] > 1 - r or p[1] < r or p[1] > 1 - r:
            return False
        for (x0, y0, x1, y1) in self.walls:
            cx = min(max(p[0], x0), x1)
            cy = min(max(p[1], y0), y1)
            if (p[0] - cx) ** 2 + (p[1] - cy) ** 2 < r * r:
                return False
        return True

    def _sample_free(self, rng, r=AGENT_RADIUS):
        for _ in range(1000):
            p = rng.uniform(r + 1e-3, 1 - r - 1e-3, size=2)
            if self._disk_free(p, r):
                return p
        raise RuntimeError("could not sample a free position")

    def _line_of_sight(self, a, b, r=AGENT_RADIUS):
        steps = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.01)))
        for t in np.linspace(0.0, 1.0, steps):
            if not self._disk_free(a + t * (b - a), r):
                return False
        return True

    # -- protocol ---------------------------------------------------------

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        return EnvState(self._sample_free(rng), np.zeros(2))

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        v = GAMMA * state.agent_vel + ALPHA * a
        speed = np.linalg.norm(v)
        if speed > V_MAX:
            v = v * (V_MAX / speed)
        p = state.agent_pos
        if self._disk_free(p + v):
            p = p + v
        elif self._disk_free(p + np.array([v[0], 0.0])):
            p = p + np.array([v[0], 0.0])
            v = np.array([v[0], 0.0])
        elif self._disk_free(p + np.array([0.0, v[1]])):
            p = p + np.array([0.0, v[1]])
            v = np.array([0.0, v[1]])
        else:
            v = np.zeros(2)
        return EnvState(p, v)

    def render(self, state):
        img = np.empty((IMAGE_HW, IMAGE_HW, 3), dtype=np.float32)
        img[:] = BG_COLOR
        for (x0, y0, x1, y1) in self.walls:
            m = (_XC >= x0) & (_XC <= x1) & (_YC >= y0) & (_YC <= y1)
            img[m] = WALL_COLOR
        if self.has_block:
            self._draw_block(img, state)
        px, py = state.agent_pos
        m = (_XC - px) ** 2 + (_YC - py) ** 2 <= AGENT_RADIUS**2
        img[m] = AGENT_COLOR
        return img

    def _draw_block(self, img, state):
        c, s = np.cos(state.block_angle), np.sin(state.block_angle)
        dx, dy = _XC - state.block_pos[0], _YC - state.block_pos[1]
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        m = (np.abs(lx) <= BLOCK_HALF) & (np.abs(ly) <= BLOCK_HALF)
        img[m] = BLOCK_COLOR

    def success(self, state, goal):
        return bool(np.linalg.norm(state.agent_pos - goal.state.agent_pos) <= R_SUCC)

    def sample_goal(self, state, rng):
        for _ in range(1000):
            p = self._sample_free(rng)
            d = np.linalg.norm(p - state.agent_pos)
            if 0.25 <= d <= 0.6 and self._line_of_sight(state.agent_pos, p):
                gs = EnvState(p, np.zeros(2))
                return Goal(gs, self.render(gs))
        raise RuntimeError("could not sample a goal")


class PointMazeEnv(ToyEnv):
    env_id = "pointmaze"
    walls = ((0.0, 0.34, 0.62, 0.40), (0.38, 0.60, 1.0, 0.66))


class WallEnv(ToyEnv):
    env_id = "wall"
    walls = ((0.47, 0.0, 0.53, 0.40), (0.47, 0.60, 0.53, 1.0))


class PushBoxEnv(ToyEnv):
    env_id = "pushbox"
    has_block = True

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        block = rng.uniform(0.3, 0.7, size=2)
        for _ in range(1000):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(2.2 * AGENT_RADIUS + BLOCK_HALF, 0.3)
            p = block + dist * np.array([np.cos(ang), np.sin(ang)])
            if self._disk_free(p):
                break
        else:
            raise RuntimeError("could not place pusher")
        return EnvState(p, np.zeros(2), block, rng.uniform(0, 2 * np.pi))

    def step(self, state, action):
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        p = np.clip(state.agent_pos + BETA * a, AGENT_RADIUS, 1 - AGENT_RADIUS)
        block, angle = state.block_pos.copy(), state.block_angle
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        local = rot.T @ (p - block)
        closest = np.clip(local, -BLOCK_HALF, BLOCK_HALF)
        delta = local - closest
        dist = np.linalg.norm(delta)
        if dist < AGENT_RADIUS:
            if dist > 1e-9:
                n_local = delta / dist
                pen = AGENT_RADIUS - dist
            else:
                # pusher center inside the block: exit along the closest face
                gaps = BLOCK_HALF - np.abs(local)
                axis = int(np.argmin(gaps))
                n_local = np.zeros(2)
                n_local[axis] = np.sign(local[axis]) or 1.0
                pen = AGENT_RADIUS + gaps[axis]
            n_world = rot @ n_local
            push = -pen * n_world  # block recedes from pusher
            contact = block + rot @ closest
            rvec = contact - block
            block = block + push
            angle = angle + ROT_GAIN * (rvec[0] * push[1] - rvec[1] * push[0]) / BLOCK_HALF**2
            margin = BLOCK_HALF * np.sqrt(2.0)
            block = np.clip(block, margin, 1 - margin)
        return EnvState(p, np.zeros(2), block, angle)

    def success(self, state, goal):
        if np.linalg.norm(state.block_pos - goal.state.block_pos) > R_SUCC:
            return False
        # the square is invariant under quarter turns
        diff = (state.block_angle - goal.state.block_angle) % (np.pi / 2)
        diff = min(diff, np.pi / 2 - diff)
        return bool(diff <= THETA_SUCC)

    def sample_goal(self, state, rng):
        for _ in range(1000):
            ang = rng.uniform(0, 2 * np.pi)
            direction = np.array([np.cos(ang), np.sin(ang)])
            dist = rng.uniform(0.08, 0.2)
            block = state.block_pos + dist * direction
            margin = BLOCK_HALF * np.sqrt(2.0) + 1e-3
            if np.all(block > margin) and np.all(block < 1 - margin):
                break
        else:
            raise RuntimeError("could not sample a goal")
        angle = state.block_angle + rng.uniform(-0.25, 0.25)
        pusher = np.clip(block - direction * (BLOCK_HALF + AGENT_RADIUS + 0.01),
                         AGENT_RADIUS, 1 - AGENT_RADIUS)
        gs = EnvState(pusher, np.zeros(2), block, angle)
        return Goal(gs, self.render(gs))


_ENVS = {cls.env_id: cls for cls in (PointMazeEnv, WallEnv, PushBoxEnv)}


def make_env(env_id):
    if env_id not in _ENVS:
        raise ValueError(f"unknown env id '{env_id}' (choose from {sorted(_ENVS)})")
    return _ENVS[env_id]()


# -- episodes -------------------------------------------------------------


@dataclass
class EpisodeRecord:
    env_id: str
    seed: int
    frames: list = field(default_factory=list)    # T+1 images
    actions: list = field(default_factory=list)   # T actions (2,)
    states: list = field(default_factory=list)    # T+1 EnvState


def run_episode(env, seed, actions):
    """Roll a fixed action sequence from a seeded reset."""
    state = env.reset(seed)
    rec = EpisodeRecord(env.env_id, seed, [env.render(state)], [], [state])
    for a in actions:
        state = env.step(state, a)
        rec.actions.append(np.asarray(a, dtype=np.float64))
        rec.frames.append(env.render(state))
        rec.states.append(state)
    return rec


def random_episode(env, seed, T, action_rng):
    actions = action_rng.uniform(-1.0, 1.0, size=(T, 2))
    return run_episode(env, seed, actions)


def save_episode(rec, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "env_id": rec.env_id,
        "seed": rec.seed,
        "actions": [a.tolist() for a in rec.actions],
        "states": [s.to_dict() for s in rec.states],
        "frames": [f"frame_{i:04d}.ppm" for i in range(len(rec.frames))],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name, frame in zip(manifest["frames"], rec.frames):
        write_ppm(directory / name, frame)


def load_episode(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return EpisodeRecord(
        env_id=manifest["env_id"],
        seed=manifest["seed"],
        frames=[read_ppm(directory / f) for f in manifest["frames"]],
        actions=[np.array(a, dtype=np.float64) for a in manifest["actions"]],
        states=[EnvState.from_dict(d) for d in manifest["states"]],
    )
