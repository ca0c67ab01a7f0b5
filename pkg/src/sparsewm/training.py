"""Dataset generation, ground-truth change labels, and the stepwise
training curriculum: localizer (+history fusion) -> sparse predictor ->
background correction, each stage frozen before the next begins. The
dense baseline and the pixel decoder are trained separately.

Supervision for the localizer comes from exact pixel-diff labels at
2x2 sub-region granularity (the renderer is exact, so these labels are
noise-free).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from . import worldmodel as wm
from .encoder import DecoderParams, encode, patchify
from .envs import make_env, random_episode, save_episode
from .tensor import Tensor

PIXEL_TOL = 1.0 / 255.0
STAGE_ORDER = ("localizer", "predictor", "lrm")


def collect_dataset(env_id, episodes, T_steps, seed, out_dir=None):
    """Seeded uniform-random-policy episodes; optionally persisted."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    env = make_env(env_id)
    action_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xAC710)))
    records = []
    for i in range(episodes):
        rec = random_episode(env, seed + i, T_steps, action_rng)
        records.append(rec)
        if out_dir is not None:
            save_episode(rec, Path(out_dir) / f"episode_{i:04d}")
    return records


def compute_change_labels(o_t, o_tp1, patch=8):
    """(N, 4) binary labels: bit set iff any pixel of that 2x2 sub-region
    of the patch differs beyond 1/255 between the two frames."""
    o_t, o_tp1 = np.asarray(o_t), np.asarray(o_tp1)
    if o_t.shape != o_tp1.shape:
        raise ValueError("frame dimensions differ")
    diff = np.abs(o_t.astype(np.float64) - o_tp1.astype(np.float64)).max(axis=-1)
    h = diff.shape[0]
    g, q = h // patch, patch // 2
    # (g, 2, q, g, 2, q) -> patch-major, quadrant row-major
    x = diff.reshape(g, 2, q, g, 2, q)
    sub = x.max(axis=(2, 5)).transpose(0, 2, 1, 3).reshape(g * g, 4)
    return (sub > PIXEL_TOL).astype(np.uint8)


def patch_labels(labels_sub):
    """Collapse sub-region labels to patch level (OR over the 4 bits)."""
    return labels_sub.max(axis=-1, keepdims=True)


@dataclass
class WindowDataset:
    """Encoded transition windows with full history context.

    Latents are cached once (the encoder is frozen); windows reference
    frames by index to avoid duplicating arrays.
    """

    env_id: str
    history: int
    latents: np.ndarray          # (total_frames, N, D)
    frames: list                 # list of (T+1, H, W, 3) arrays per episode
    actions: np.ndarray          # (S, 2)
    frame_idx: np.ndarray        # (S, history + 1) indices into `latents`
    labels: np.ndarray           # (S, N, 4)
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    episode_of: np.ndarray       # (S,)

    @property
    def n_windows(self):
        return self.actions.shape[0]

    def batch(self, idx):
        h = self.history
        fi = self.frame_idx[idx]
        hist = self.latents[fi[:, : h - 1]].reshape(len(idx), -1, self.latents.shape[-1])
        z_t = self.latents[fi[:, h - 1]]
        z_next = self.latents[fi[:, h]]
        return hist, z_t, self.actions[idx], z_next, self.labels[idx]


def build_windows(records, enc_params, history=3, heldout_frac=0.15):
    """Encode all frames once and index (h-1)-history windows."""
    all_latents, all_frames = [], []
    offsets = []
    total = 0
    for rec in records:
        frames = np.stack(rec.frames)
        all_frames.append(frames)
        all_latents.append(encode(frames, enc_params))
        offsets.append(total)
        total += len(rec.frames)
    latents = np.concatenate(all_latents, axis=0)

    actions, frame_idx, labels, episode_of = [], [], [], []
    for e, (rec, off) in enumerate(zip(records, offsets)):
        T_steps = len(rec.actions)
        for t in range(history - 1, T_steps):
            frame_idx.append([off + t - history + 1 + i for i in range(history + 1)])
            actions.append(rec.actions[t])
            labels.append(compute_change_labels(rec.frames[t], rec.frames[t + 1]))
            episode_of.append(e)
    episode_of = np.array(episode_of)
    n_heldout_ep = max(1, int(round(len(records) * heldout_frac)))
    heldout_eps = set(range(len(records) - n_heldout_ep, len(records)))
    heldout = np.array([e in heldout_eps for e in episode_of])
    idx = np.arange(len(actions))
    return WindowDataset(
        env_id=records[0].env_id,
        history=history,
        latents=latents,
        frames=all_frames,
        actions=np.asarray(actions, dtype=np.float32),
        frame_idx=np.asarray(frame_idx),
        labels=np.stack(labels),
        train_idx=idx[~heldout],
        heldout_idx=idx[heldout],
        episode_of=episode_of,
    )


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.stage not in STAGE_ORDER + ("dense", "decoder"):
            raise ValueError(f"unknown stage '{self.stage}'")
        return self


def require_stages(done, needed):
    """Stepwise ordering (localizer -> predictor -> lrm) is a hard
    requirement, not a convention."""
    for stage in needed:
        if stage not in done:
            raise RuntimeError(f"stage '{stage}' must be trained first")


def _batches(n_or_idx, batch_size, rng):
    idx = np.asarray(n_or_idx)
    perm = rng.permutation(idx)
    return [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]


def _mse_masked(pred, target, weight):
    """Mean squared error over entries selected by `weight` (B, n, 1)."""
    diff = pred - Tensor(target)
    wsum = max(float(weight.sum()) * target.shape[-1], 1.0)
    return T.reduce_sum(T.square(diff) * Tensor(weight)) * (1.0 / wsum)


def train_localizer(dataset, params, config, log=None):
    """Stage 1: BCE on sub-region change labels; fusion co-trained."""
    config.validate()
    if dataset.n_windows == 0:
        raise ValueError("empty dataset")
    group = {**params.fusion_group(), **params.localizer_group()}
    _freeze_all_but(params, group)
    opt = nn.AdamW(group, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    labels = dataset.labels[dataset.train_idx]
    if params.cfg.loc_head_out == 1:
        labels = None  # recomputed per batch via patch_labels
    pos = float(_stage_labels(dataset, params, dataset.train_idx).sum())
    total = _stage_labels(dataset, params, dataset.train_idx).size
    pos_weight = (total - pos) / max(pos, 1.0)

    history = []
    for epoch in range(config.epochs):
        losses = []
        for idx in _batches(dataset.train_idx, config.batch_size, rng):
            hist, z_t, acts, _, lab = dataset.batch(idx)
            if params.cfg.loc_head_out == 1:
                lab = patch_labels(lab)
            z_f = wm.fuse_history(Tensor(z_t), Tensor(hist), params)
            logits = wm.localize_logits(z_f, acts, params)
            loss = T.bce_with_logits(logits, lab.astype(np.float32), pos_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(_log_row(log, "localizer", epoch, float(np.mean(losses))))
    return history


def _stage_labels(dataset, params, idx):
    lab = dataset.labels[idx]
    return patch_labels(lab) if params.cfg.loc_head_out == 1 else lab


def localizer_eval(dataset, params, idx=None, tau=None):
    """Predicted vs ground-truth patch masks on a window subset."""
    idx = dataset.heldout_idx if idx is None else idx
    tau = params.cfg.tau if tau is None else tau
    with T.no_grad():
        hist, z_t, acts, _, lab = dataset.batch(idx)
        z_f = wm.fuse_history(Tensor(z_t), Tensor(hist), params)
        probs = wm.localize(z_f, acts, params)
    pred = wm.threshold_mask(probs.data, tau)
    truth = lab.max(axis=-1)
    return pred, truth


def precompute_fused(dataset, params, idx, chunk=256):
    """Frozen-upstream cache: fused latents and predicted masks."""
    z_f_all = np.empty((len(idx), dataset.latents.shape[1], dataset.latents.shape[2]), dtype=np.float32)
    mask_all = np.empty((len(idx), dataset.latents.shape[1]), dtype=np.uint8)
    with T.no_grad():
        for lo in range(0, len(idx), chunk):
            sub = idx[lo : lo + chunk]
            hist, z_t, acts, _, _ = dataset.batch(sub)
            z_f = wm.fuse_history(Tensor(z_t), Tensor(hist), params)
            probs = wm.localize(z_f, acts, params)
            z_f_all[lo : lo + len(sub)] = z_f.data
            mask_all[lo : lo + len(sub)] = wm.threshold_mask(probs.data, params.cfg.tau)
    return z_f_all, mask_all


def train_predictor(dataset, params, config, done_stages=("localizer",), log=None):
    """Stage 2: foreground-only MSE against next-frame encoder tokens;
    localizer and fusion frozen; padding rows excluded from the loss."""
    config.validate()
    require_stages(done_stages, ("localizer",))
    group = params.predictor_group()
    _freeze_all_but(params, group)
    opt = nn.AdamW(group, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    idx = dataset.train_idx
    z_f_all, mask_all = precompute_fused(dataset, params, idx)
    pos_of = {int(g): i for i, g in enumerate(idx)}

    history = []
    for epoch in range(config.epochs):
        losses = []
        for bidx in _batches(idx, config.batch_size, rng):
            rows = np.array([pos_of[int(i)] for i in bidx])
            z_f, mask = z_f_all[rows], mask_all[rows]
            _, _, acts, z_next, _ = dataset.batch(bidx)
            k_batch = min(wm.adaptive_batch_size(mask.sum(axis=1), params.cfg.k_min), mask.shape[1])
            index, counts = wm.gather_and_pad(mask, k_batch, config.seed)
            fg = np.take_along_axis(z_f, index[:, :, None], axis=1)
            target = np.take_along_axis(z_next, index[:, :, None], axis=1)
            weight = (np.arange(k_batch)[None, :] < counts[:, None]).astype(np.float32)[:, :, None]
            pred = wm.predict_foreground(Tensor(fg), acts, params)
            loss = _mse_masked(pred, target, weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(_log_row(log, "predictor", epoch, float(np.mean(losses))))
    return history


def train_lrm(dataset, params, config, done_stages=("localizer", "predictor"), log=None):
    """Stage 3: background-only MSE; localizer and predictor frozen."""
    config.validate()
    require_stages(done_stages, ("localizer", "predictor"))
    group = params.lrm_group()
    _freeze_all_but(params, group)
    opt = nn.AdamW(group, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    idx = dataset.train_idx
    z_f_all, mask_all = precompute_fused(dataset, params, idx)
    pos_of = {int(g): i for i, g in enumerate(idx)}

    # frozen upstream: cache foreground predictions per fixed batch grouping
    grouping = _batches(idx, config.batch_size, np.random.default_rng(config.seed))
    cache = []
    with T.no_grad():
        for bidx in grouping:
            rows = np.array([pos_of[int(i)] for i in bidx])
            z_f, mask = z_f_all[rows], mask_all[rows]
            _, z_t, acts, z_next, _ = dataset.batch(bidx)
            k_batch = min(wm.adaptive_batch_size(mask.sum(axis=1), params.cfg.k_min), mask.shape[1])
            index, counts = wm.gather_and_pad(mask, k_batch, config.seed)
            fg = np.take_along_axis(z_f, index[:, :, None], axis=1)
            fg_pred = wm.predict_foreground(Tensor(fg), acts, params).data
            key_mask = np.arange(k_batch)[None, :] < np.maximum(counts, 1)[:, None]
            valid = (counts > 0).astype(np.float32)[:, None, None]
            bg_weight = (1.0 - mask)[:, :, None].astype(np.float32) * valid
            cache.append((z_t, fg_pred, key_mask, valid, z_next, bg_weight))

    history = []
    for epoch in range(config.epochs):
        losses = []
        for z_t, fg_pred, key_mask, valid, z_next, bg_weight in cache:
            update = nn.cross_attention(Tensor(z_t), Tensor(fg_pred), params.lrm, key_mask=key_mask)
            out = Tensor(z_t) + update * Tensor(valid)
            loss = _mse_masked(out, z_next, bg_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(_log_row(log, "lrm", epoch, float(np.mean(losses))))
    return history


def train_dense_baseline(dataset, dense_params, config, log=None):
    """Equal-budget dense ViT over all history tokens, all-token MSE."""
    config.validate()
    opt = nn.AdamW(dense_params.named(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for bidx in _batches(dataset.train_idx, config.batch_size, rng):
            hist, z_t, acts, z_next, _ = dataset.batch(bidx)
            pred = wm._dense_step(Tensor(z_t), Tensor(hist), acts, dense_params)
            loss = T.reduce_mean(T.square(pred - Tensor(z_next)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(_log_row(log, "dense", epoch, float(np.mean(losses))))
    return history


def train_decoder(records, enc_params, ridge=1e-4, log=None):
    """Closed-form ridge regression from tokens to patch pixels, frozen
    on return. Deterministic, so identical datasets give identical
    decoders."""
    xs, ys = [], []
    for rec in records:
        frames = np.stack(rec.frames)
        lat = encode(frames, enc_params)
        xs.append(lat.reshape(-1, lat.shape[-1]))
        ys.append(patchify(frames, enc_params.patch).reshape(len(frames) * lat.shape[1], -1))
    x = np.concatenate(xs).astype(np.float64)
    y = np.concatenate(ys).astype(np.float64)
    x1 = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    gram = x1.T @ x1 + ridge * np.eye(x1.shape[1])
    wfull = np.linalg.solve(gram, x1.T @ y)
    dec = DecoderParams(
        w=wfull[:-1].astype(np.float32), b=wfull[-1].astype(np.float32),
        patch=enc_params.patch, image_hw=enc_params.image_hw, frozen=True,
    )
    mae = float(np.abs(x1 @ wfull - y).mean())
    _log_row(log, "decoder", 0, mae)
    return dec, mae


def copy_baseline_losses(dataset, params, idx=None):
    """Foreground / background MSE of the verbatim-copy predictor
    (foreground copies the fused tokens, background the raw ones); the
    zero-initialized stages must reproduce these exactly at epoch 0."""
    idx = dataset.heldout_idx if idx is None else idx
    z_f_all, mask_all = precompute_fused(dataset, params, idx)
    _, z_t, _, z_next, _ = dataset.batch(idx)
    m = mask_all[:, :, None].astype(np.float64)
    sq_fg = (z_f_all.astype(np.float64) - z_next.astype(np.float64)) ** 2
    sq_bg = (z_t.astype(np.float64) - z_next.astype(np.float64)) ** 2
    fg = float((sq_fg * m).sum() / max(m.sum() * sq_fg.shape[-1], 1.0))
    bg = float((sq_bg * (1 - m)).sum() / max((1 - m).sum() * sq_bg.shape[-1], 1.0))
    return fg, bg


def _freeze_all_but(params, group):
    wm.set_requires_grad(params.named(), False)
    wm.set_requires_grad(group, True)


def _log_row(log, stage, epoch, loss, **metrics):
    row = {"stage": stage, "epoch": epoch, "loss": loss, **metrics}
    if log is not None:
        log.append(row)
    return row


def write_training_log(rows, path):
    cols = ["stage", "epoch", "loss"]
    extra = sorted({k for r in rows for k in r} - set(cols))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols + extra)
        writer.writeheader()
        writer.writerows(rows)
