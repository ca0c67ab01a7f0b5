"""CEM model-predictive control over the world model.

Planning cost is restricted to the patches where the current observation
and the goal image differ (the sparse cost-mask mode); dense mode uses
all tokens. The planner only ever queries the world model, never the
environment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import worldmodel as wm
from .encoder import encode
from .envs import EpisodeRecord

SIGMA_FLOOR = 1e-3


@dataclass
class PlanConfig:
    horizon: int = 5
    iterations: int = 10
    samples: int = 64
    elites: int = 8
    sigma0: float = 0.5
    action_low: float = -1.0
    action_high: float = 1.0
    mask_mode: str = "sparse"  # or "dense"
    seed: int = 0

    def validate(self):
        if self.elites > self.samples:
            raise ValueError("elites must not exceed samples")
        if self.horizon < 1 or self.sigma0 <= 0:
            raise ValueError("horizon >= 1 and sigma0 > 0 required")
        if self.mask_mode not in ("sparse", "dense"):
            raise ValueError("mask_mode must be 'sparse' or 'dense'")
        return self


@dataclass
class TaskMask:
    mask: np.ndarray        # (N,) uint8 over patches
    diff_image: np.ndarray  # (H, W) max-abs pixel difference


def compute_task_mask(o_t, o_goal, patch=8):
    """Patch marked 1 iff any pixel differs beyond 1/255; an all-zero
    result falls back to all-ones (visual equality does not guarantee
    latent equality)."""
    o_t, o_goal = np.asarray(o_t), np.asarray(o_goal)
    if o_t.shape != o_goal.shape:
        raise ValueError("observation and goal dimensions differ")
    diff = np.abs(o_t.astype(np.float64) - o_goal.astype(np.float64)).max(axis=-1)
    g = diff.shape[0] // patch
    per_patch = diff.reshape(g, patch, g, patch).max(axis=(1, 3)).reshape(-1)
    mask = (per_patch > 1.0 / 255.0).astype(np.uint8)
    if mask.sum() == 0:
        mask = np.ones_like(mask)
    return TaskMask(mask, diff)


def mpc_cost(z_pred, z_goal, mask):
    """MSE over (token, feature) entries of the masked patches.

    z_pred: (..., N, D); broadcasts over leading dims and returns a
    scalar or (...,) costs.
    """
    z_pred = np.asarray(getattr(z_pred, "data", z_pred))
    z_goal = np.asarray(getattr(z_goal, "data", z_goal))
    m = np.asarray(mask.mask if isinstance(mask, TaskMask) else mask, dtype=np.float64)
    if m.sum() == 0:
        raise ValueError("empty cost mask")
    sq = (z_pred.astype(np.float64) - z_goal.astype(np.float64)) ** 2
    per_token = sq.sum(axis=-1)
    return (per_token * m).sum(axis=-1) / (m.sum() * z_pred.shape[-1])


@dataclass
class CemState:
    mu: np.ndarray      # (H, action_dim)
    sigma: np.ndarray   # (H, action_dim)
    iteration: int = 0
    best_cost: float = np.inf


def cem_plan(z_t, hist, z_goal, mask, model, config, rollout_fn=None):
    """K iterations of sample -> rollout -> cost -> elite refit on a
    diagonal Gaussian. Returns (final mean, CemState, per-iteration
    elite-mean cost trace).

    `rollout_fn(actions (B, H, 2)) -> final latents (B, N, D)` may be
    supplied for oracle tests; by default the world model rolls out.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    H = config.horizon
    state = CemState(np.zeros((H, 2)), np.full((H, 2), config.sigma0, dtype=np.float64))
    if rollout_fn is None:
        params, variant, dense_params = model
        z0 = np.broadcast_to(z_t, (config.samples,) + z_t.shape[-2:])
        h0 = None
        if hist is not None and hist.shape[-2] > 0:
            h0 = np.broadcast_to(hist, (config.samples,) + hist.shape[-2:])

        def rollout_fn(actions):
            with T.no_grad():
                latents = wm.rollout(z0, h0, actions, params, variant,
                                     seed=config.seed, dense_params=dense_params)
            return latents[-1].data

    trace = []
    for it in range(config.iterations):
        actions = rng.normal(state.mu, state.sigma, size=(config.samples, H, 2))
        actions = np.clip(actions, config.action_low, config.action_high)
        z_final = rollout_fn(actions)
        costs = mpc_cost(z_final, z_goal, mask)
        order = np.argsort(costs, kind="stable")
        elite = actions[order[: config.elites]]
        state.mu = elite.mean(axis=0)
        state.sigma = np.maximum(elite.std(axis=0), SIGMA_FLOOR)
        state.iteration = it + 1
        state.best_cost = min(state.best_cost, float(costs[order[0]]))
        trace.append(float(costs[order[: config.elites]].mean()))
    mu = np.clip(state.mu, config.action_low, config.action_high)
    return mu, state, trace


@dataclass
class ControlResult:
    success: bool
    steps: int
    record: EpisodeRecord
    plan_traces: list = field(default_factory=list)


def control_loop(env, goal, enc_params, model, config, max_steps=20, seed=0):
    """Receding-horizon MPC: encode -> plan -> execute first action ->
    repeat; the task mask is recomputed every decision step."""
    state = env.reset(seed) if isinstance(seed, int) else seed
    obs = env.render(state)
    z_goal = encode(goal.image, enc_params)
    rec = EpisodeRecord(env.env_id, seed if isinstance(seed, int) else -1,
                        [obs], [], [state.copy()])
    result = ControlResult(False, 0, rec)
    if env.success(state, goal):
        result.success = True
        return result
    params, _, dense_params = model
    keep = (params.cfg if params is not None else dense_params.cfg).history - 1
    hist_latents = []
    for step_i in range(max_steps):
        z_t = encode(obs, enc_params)
        if config.mask_mode == "sparse":
            mask = compute_task_mask(obs, goal.image)
        else:
            mask = TaskMask(np.ones(z_t.shape[0], dtype=np.uint8), None)
        hist = None
        if hist_latents:
            hist = np.concatenate(hist_latents, axis=0)
        step_cfg = PlanConfig(**{**config.__dict__, "seed": config.seed + step_i})
        mu, _, trace = cem_plan(z_t, hist, z_goal, mask, model, step_cfg)
        action = mu[0]
        state = env.step(state, action)
        obs = env.render(state)
        rec.actions.append(np.asarray(action, dtype=np.float64))
        rec.frames.append(obs)
        rec.states.append(state.copy())
        result.plan_traces.append(trace)
        result.steps = step_i + 1
        hist_latents = (hist_latents + [z_t])[-keep:] if keep > 0 else []
        if env.success(state, goal):
            result.success = True
            return result
    return result
