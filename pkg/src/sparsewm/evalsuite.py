"""Measurement battery: open-loop pixel error, analytic FLOPs model,
throughput benchmark, mask-quality metrics, cost-landscape scans, and
PCA of background updates.

FLOPs are analytic bookkeeping (matmul m*k*n costs 2mkn), never
measured; throughput acceptance is ratio-based because absolute numbers
are hardware-specific.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from . import worldmodel as wm
from .planner import mpc_cost
from .tensor import Tensor
from .training import patch_labels

PIXEL_ERROR_THRESHOLD = 16.0 / 255.0


# -- pixel error ----------------------------------------------------------


def pixel_error(windows, model, decoder, steps=5, threshold=PIXEL_ERROR_THRESHOLD,
                episodes=100, seed=0):
    """Mean count of pixels deviating beyond `threshold` after a
    `steps`-step open-loop rollout, decoded through the shared frozen
    decoder.

    `windows` is a WindowDataset; evaluation start points are sampled
    from its held-out split with a fixed seed. `model` is
    (params, variant, dense_params) or the string "oracle" (ground-truth
    latents, measuring decoder error only).
    """
    if not decoder.frozen:
        raise RuntimeError("pixel_error requires a frozen decoder (protocol violation)")
    from .encoder import decode

    starts = _rollout_starts(windows, steps, episodes, seed)
    hist, z_t, acts, targets, target_frames = _rollout_batch(windows, starts, steps)
    if model == "oracle":
        z_final = targets[:, -1]
    else:
        params, variant, dense_params = model
        with T.no_grad():
            latents = wm.rollout(z_t, hist, acts, params, variant,
                                 seed=seed, dense_params=dense_params)
        z_final = latents[-1].data
    decoded = decode(z_final, decoder)
    err = np.abs(decoded.astype(np.float64) - target_frames.astype(np.float64)).max(axis=-1)
    counts = (err > threshold).sum(axis=(1, 2))
    return float(counts.mean())


def _rollout_starts(windows, steps, episodes, seed):
    """Held-out (episode, t) pairs with `steps` future frames available."""
    h = windows.history
    ok = []
    heldout = set(windows.heldout_idx.tolist())
    for i in windows.heldout_idx:
        # window i predicts frame_idx[i, h]; need steps-1 further windows
        # in the same episode
        e = windows.episode_of[i]
        j = i + steps - 1
        if j < windows.n_windows and windows.episode_of[j] == e and j in heldout:
            ok.append(i)
    if not ok:
        raise ValueError("no held-out rollout windows available")
    rng = np.random.default_rng(seed)
    take = min(episodes, len(ok))
    return rng.choice(np.asarray(ok), size=take, replace=False)


def _rollout_batch(windows, starts, steps):
    h = windows.history
    hist, z_t, _, _, _ = windows.batch(starts)
    acts = np.stack([windows.actions[starts + k] for k in range(steps)], axis=1)
    targets = np.stack([windows.latents[windows.frame_idx[starts + k, h]] for k in range(steps)], axis=1)
    final_frame_idx = windows.frame_idx[starts + steps - 1, h]
    frames_flat = np.concatenate([f for f in windows.frames], axis=0)
    target_frames = frames_flat[final_frame_idx]
    return hist, z_t, acts, targets, target_frames


# -- analytic FLOPs -------------------------------------------------------


def matmul_flops(m, k, n):
    return 2 * m * k * n


def attention_projection_flops(n, d):
    return 8 * n * d * d


def attention_score_flops(n, d):
    return 4 * n * n * d


def self_attention_flops(n, d):
    return attention_projection_flops(n, d) + attention_score_flops(n, d)


def cross_attention_flops(nq, nk, d, out_rank=None):
    if out_rank is not None:
        # factored output projection: d -> rank -> d
        out_proj = 4 * nq * d * out_rank
    else:
        out_proj = 2 * nq * d * d
    return 2 * nq * d * d + out_proj + 4 * nk * d * d + 4 * nq * nk * d


def mlp_flops(n, d, ratio):
    return int(4 * n * d * d * ratio)


def vit_layer_flops(n, d, ratio):
    return self_attention_flops(n, d) + mlp_flops(n, d, ratio)


@dataclass
class FlopsBreakdown:
    variant: str
    stages: dict
    total: int


def flops_count(cfg, variant, k_batch):
    """Analytic per-stage FLOPs for one forward transition step
    (encoder excluded)."""
    if variant not in wm.VARIANTS:
        raise ValueError(f"unknown variant '{variant}'")
    n, d, w = cfg.n_tokens, cfg.dim, cfg.loc_width
    stages = {}
    if variant == "dense":
        tokens = cfg.history * n + 1
        stages["predictor"] = cfg.dense_layers * vit_layer_flops(tokens, d, cfg.mlp_ratio) \
            + matmul_flops(1, 2, d)
    else:
        stages["fusion"] = cross_attention_flops(n, (cfg.history - 1) * n, d)
        stages["localizer"] = (
            matmul_flops(n + 1, d, w)
            + cfg.loc_layers * vit_layer_flops(n + 1, w, cfg.mlp_ratio)
            + matmul_flops(n + 1, w, cfg.loc_head_out)
            + matmul_flops(1, 2, d)
        )
        stages["predictor"] = cfg.pred_layers * vit_layer_flops(k_batch + 1, d, cfg.mlp_ratio) \
            + matmul_flops(1, 2, d)
        if variant == "full":
            stages["lrm"] = cross_attention_flops(n - k_batch, k_batch, d,
                                                  out_rank=max(1, d // 8))
    return FlopsBreakdown(variant, stages, int(sum(stages.values())))


# -- throughput -----------------------------------------------------------


def throughput_bench(model, enc_dim, n_tokens, batch=32, repetitions=7, warmup=2, seed=0):
    """Median single-step throughput (transitions/second) on synthetic
    latents. Returns a report dict with the hardware descriptor."""
    params, variant, dense_params = model
    cfg = params.cfg if params is not None else dense_params.cfg
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, n_tokens, enc_dim)).astype(np.float32)
    hist = rng.standard_normal((batch, (cfg.history - 1) * n_tokens, enc_dim)).astype(np.float32)
    acts = rng.uniform(-1, 1, size=(batch, 2)).astype(np.float32)
    times = []
    for rep in range(warmup + repetitions):
        t0 = time.perf_counter()
        with T.no_grad():
            wm.step(z, hist, acts, params, variant, seed=seed, dense_params=dense_params)
        dt = time.perf_counter() - t0
        if rep >= warmup:
            times.append(dt)
    median = float(np.median(times))
    return {
        "variant": variant,
        "batch": batch,
        "steps_per_second": batch / median,
        "median_seconds": median,
        "hardware": platform.processor() or platform.machine(),
    }


# -- mask quality ---------------------------------------------------------


class MaskMetrics(NamedTuple):
    iou: float
    precision: float
    recall: float


def mask_metrics(predicted, truth):
    """Micro-averaged (IoU, precision, recall) over all patches of all
    frames; degenerate empty denominators count as perfect."""
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if predicted.shape != truth.shape:
        raise ValueError("mask stream lengths differ")
    tp = np.sum(predicted & truth)
    fp = np.sum(predicted & ~truth)
    fn = np.sum(~predicted & truth)
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return MaskMetrics(float(iou), float(precision), float(recall))


# -- cost landscapes ------------------------------------------------------


@dataclass
class LandscapeScan:
    offsets: np.ndarray   # (R,) grid offsets per axis
    costs: np.ndarray     # (R,) or (R, R)
    roughness: float
    axes: np.ndarray


def landscape_scan(model, z_t, hist, base_actions, axes, grid_range, grid_res,
                   mask, z_goal, seed=0, rollout_fn=None):
    """Perturb the last action of `base_actions` along orthonormal
    `axes` over a symmetric grid and record the rollout cost; roughness
    is the range-normalized mean absolute second difference."""
    axes = np.asarray(axes, dtype=np.float64)
    if grid_res < 3 or grid_res % 2 == 0:
        raise ValueError("grid_res must be odd and >= 3")
    gram = axes @ axes.T
    if not np.allclose(gram, np.eye(len(axes)), atol=1e-8):
        raise ValueError("axes must be orthonormal")
    base_actions = np.asarray(base_actions, dtype=np.float64)
    offsets = np.linspace(-grid_range, grid_range, grid_res)
    if len(axes) == 2:
        uu, vv = np.meshgrid(offsets, offsets, indexing="ij")
        deltas = uu[..., None] * axes[0] + vv[..., None] * axes[1]
    else:
        deltas = offsets[:, None] * axes[0]
    flat = deltas.reshape(-1, 2)
    acts = np.repeat(base_actions[None], len(flat), axis=0)
    acts[:, -1, :] = np.clip(acts[:, -1, :] + flat, -1.0, 1.0)

    if rollout_fn is None:
        params, variant, dense_params = model

        def rollout_fn(a):
            z0 = np.broadcast_to(z_t, (len(a),) + z_t.shape[-2:])
            h0 = None
            if hist is not None and hist.shape[-2] > 0:
                h0 = np.broadcast_to(hist, (len(a),) + hist.shape[-2:])
            with T.no_grad():
                latents = wm.rollout(z0, h0, a, params, variant,
                                     seed=seed, dense_params=dense_params)
            return latents[-1].data

    costs = np.asarray(mpc_cost(rollout_fn(acts), z_goal, mask)).reshape(deltas.shape[:-1])
    return LandscapeScan(offsets, costs, _roughness(costs), axes)


def _roughness(costs):
    diffs = []
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim == 1:
        diffs.append(np.abs(np.diff(c, n=2)))
    else:
        diffs.append(np.abs(np.diff(c, n=2, axis=0)).reshape(-1))
        diffs.append(np.abs(np.diff(c, n=2, axis=1)).reshape(-1))
    d2 = np.concatenate(diffs)
    span = c.max() - c.min()
    if span <= 0:
        return 0.0
    return float(d2.mean() / span)


# -- PCA of background updates -------------------------------------------


@dataclass
class PcaReport:
    singular_values: np.ndarray
    explained: np.ndarray          # per-component variance fractions
    cumulative: np.ndarray
    rank90: int
    rank99: int


def _pca_report(deltas):
    d = deltas.shape[-1]
    if deltas.shape[0] < d:
        raise ValueError(f"need at least {d} delta samples, got {deltas.shape[0]}")
    centered = deltas - deltas.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centered, compute_uv=False)
    var = s**2
    explained = var / var.sum()
    cumulative = np.cumsum(explained)
    return PcaReport(
        singular_values=s,
        explained=explained,
        cumulative=cumulative,
        rank90=int(np.searchsorted(cumulative, 0.90) + 1),
        rank99=int(np.searchsorted(cumulative, 0.99) + 1),
    )


def pca_background_updates(windows, mode="ground_truth", params=None, max_samples=20000, seed=0):
    """PCA of background-token update vectors.

    ground_truth: next-frame minus current encoder tokens at patches
    whose pixels did not change. lrm: the model's predicted background
    update (corrected prediction minus current encoder tokens) at the
    same positions — the model-side counterpart of the ground-truth
    delta, so the two spectra are directly comparable (requires a
    trained model).
    """
    if mode not in ("ground_truth", "lrm"):
        raise ValueError("mode must be 'ground_truth' or 'lrm'")
    h = windows.history
    idx = windows.heldout_idx if len(windows.heldout_idx) else np.arange(windows.n_windows)
    bg = patch_labels(windows.labels[idx])[:, :, 0] == 0  # (S, N)
    if mode == "ground_truth":
        z_t = windows.latents[windows.frame_idx[idx, h - 1]]
        z_next = windows.latents[windows.frame_idx[idx, h]]
        deltas = (z_next - z_t)[bg]
    else:
        if params is None:
            raise ValueError("lrm mode requires trained params")
        deltas = _lrm_deltas(windows, params, idx)[bg]
    rng = np.random.default_rng(seed)
    if len(deltas) > max_samples:
        deltas = deltas[rng.choice(len(deltas), size=max_samples, replace=False)]
    return _pca_report(np.asarray(deltas, dtype=np.float64))


def _lrm_deltas(windows, params, idx, chunk=256):
    from . import nn

    out = np.empty((len(idx), windows.latents.shape[1], windows.latents.shape[2]), dtype=np.float32)
    with T.no_grad():
        for lo in range(0, len(idx), chunk):
            sub = idx[lo : lo + chunk]
            hist, z_t, acts, _, _ = windows.batch(sub)
            z_f = wm.fuse_history(Tensor(z_t), Tensor(hist), params)
            probs = wm.localize(z_f, acts, params)
            mask = wm.threshold_mask(probs.data, params.cfg.tau)
            k_batch = min(wm.adaptive_batch_size(mask.sum(axis=1), params.cfg.k_min), mask.shape[1])
            index, counts = wm.gather_and_pad(mask, k_batch, seed=0)
            fg = np.take_along_axis(z_f.data, index[:, :, None], axis=1)
            fg_pred = wm.predict_foreground(Tensor(fg), acts, params)
            key_mask = np.arange(k_batch)[None, :] < np.maximum(counts, 1)[:, None]
            valid = (counts > 0).astype(np.float32)[:, None, None]
            update = nn.cross_attention(Tensor(z_t), fg_pred, params.lrm, key_mask=key_mask)
            # model-side background update relative to the raw current
            # tokens, mirroring the ground-truth z_next - z_t
            out[lo : lo + len(sub)] = update.data * valid
    return out
