"""Four-stage transition model over patch tokens.

    fuse history -> localize changes -> predict sparse foreground
      -> low-rank background correction -> recombine

plus the ablation variants: `naive_sparse` (background copied verbatim,
no correction) and `dense` (one ViT over all history tokens, the dense
baseline; history frames are stacked as extra tokens).

All ops are batch-first: latents are (B, N, D). Padding of the sparse
foreground batch follows the adaptive-size rule
k_batch = max(k_min, max_i k'_i) with seeded background sampling; the
padding stream is derived per sample from (seed, step, foreground set)
so results do not depend on how samples are grouped into batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

VARIANTS = ("full", "naive_sparse", "dense")


@dataclass
class ModelConfig:
    n_tokens: int = 64
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    loc_layers: int = 3
    loc_width: int = 48
    loc_heads: int = 4
    loc_head_out: int = 4       # 4 sub-region probs; 1 = patch-level ablation
    pred_layers: int = 4
    dense_layers: int = 4
    tau: float = 0.5
    k_min: int = 8
    history: int = 3

    def validate(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 1 <= self.k_min <= self.n_tokens:
            raise ValueError("k_min must lie in [1, n_tokens]")
        if self.dim % self.heads or self.loc_width % self.loc_heads:
            raise ValueError("width must divide head count")
        return self


@dataclass
class WorldModelParams:
    cfg: ModelConfig
    fusion: nn.AttentionParams
    loc_action_w: Tensor
    loc_action_b: Tensor
    loc_inproj_w: Tensor
    loc_inproj_b: Tensor
    loc_blocks: list
    loc_head_w: Tensor
    loc_head_b: Tensor
    pred_action_w: Tensor
    pred_action_b: Tensor
    pred_blocks: list
    lrm: nn.AttentionParams

    def fusion_group(self):
        return self.fusion.named("fusion.")

    def localizer_group(self):
        out = {
            "loc.action_w": self.loc_action_w, "loc.action_b": self.loc_action_b,
            "loc.inproj_w": self.loc_inproj_w, "loc.inproj_b": self.loc_inproj_b,
            "loc.head_w": self.loc_head_w, "loc.head_b": self.loc_head_b,
        }
        out.update(nn.named_block_list(self.loc_blocks, "loc.block"))
        return out

    def predictor_group(self):
        out = {"pred.action_w": self.pred_action_w, "pred.action_b": self.pred_action_b}
        out.update(nn.named_block_list(self.pred_blocks, "pred.block"))
        return out

    def lrm_group(self):
        return self.lrm.named("lrm.")

    def named(self):
        out = {}
        out.update(self.fusion_group())
        out.update(self.localizer_group())
        out.update(self.predictor_group())
        out.update(self.lrm_group())
        return out


@dataclass
class DenseParams:
    cfg: ModelConfig
    action_w: Tensor
    action_b: Tensor
    blocks: list

    def named(self):
        out = {"dense.action_w": self.action_w, "dense.action_b": self.action_b}
        out.update(nn.named_block_list(self.blocks, "dense.block"))
        return out


def init_world_model(cfg, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, w = cfg.dim, cfg.loc_width
    return WorldModelParams(
        cfg=cfg,
        fusion=nn.init_attention(rng, d, cfg.heads),
        loc_action_w=nn.uniform_init(rng, (2, d), 2),
        loc_action_b=nn.zeros_param((d,)),
        loc_inproj_w=nn.uniform_init(rng, (d, w), d),
        loc_inproj_b=nn.zeros_param((w,)),
        loc_blocks=[nn.init_vit_block(rng, w, cfg.loc_heads, cfg.mlp_ratio) for _ in range(cfg.loc_layers)],
        loc_head_w=nn.uniform_init(rng, (w, cfg.loc_head_out), w),
        loc_head_b=nn.zeros_param((cfg.loc_head_out,)),
        pred_action_w=nn.uniform_init(rng, (2, d), 2),
        pred_action_b=nn.zeros_param((d,)),
        pred_blocks=[nn.init_vit_block(rng, d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.pred_layers)],
        lrm=nn.init_attention(rng, d, cfg.heads, out_rank=max(1, d // 8)),
    )


def init_dense_model(cfg, seed):
    cfg.validate()
    rng = np.random.default_rng(seed)
    return DenseParams(
        cfg=cfg,
        action_w=nn.uniform_init(rng, (2, cfg.dim), 2),
        action_b=nn.zeros_param((cfg.dim,)),
        blocks=[nn.init_vit_block(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.dense_layers)],
    )


def set_requires_grad(group, flag):
    for p in group.values():
        p.requires_grad = bool(flag)
        if not flag:
            p.grad = None


def load_group(group, arrays):
    for name, p in group.items():
        p.data = np.asarray(arrays[name], dtype=p.data.dtype).reshape(p.data.shape)


# -- stages ---------------------------------------------------------------


def embed_action(actions, w, b):
    """Raw 2-vector actions (B, 2) -> embedded (B, D). Errors on
    out-of-range components."""
    arr = np.asarray(getattr(actions, "data", actions))
    if np.any(np.abs(arr) > 1.0 + 1e-9):
        raise ValueError("action components must lie in [-1, 1]")
    return nn.linear(T.as_tensor(actions), w, b)


def fuse_history(z_t, hist, params):
    """z'_t = z_t + CA(Q=z_t, K/V=hist); empty history passes z_t through.

    z_t: (B, N, D); hist: (B, M, D) with M = 0 or a multiple of N.
    """
    z_t = T.as_tensor(z_t)
    if hist is None or (getattr(hist, "shape", np.shape(hist)) or (0,))[-2] == 0:
        return z_t
    return z_t + nn.cross_attention(z_t, T.as_tensor(hist), params.fusion)


def localize_logits(z_fused, actions, params):
    cfg = params.cfg
    act = embed_action(actions, params.loc_action_w, params.loc_action_b)
    tokens = T.concat([z_fused, T.reshape(act, (act.shape[0], 1, cfg.dim))], axis=1)
    x = nn.linear(tokens, params.loc_inproj_w, params.loc_inproj_b)
    x = nn.vit_forward(x, params.loc_blocks)
    logits = nn.linear(x, params.loc_head_w, params.loc_head_b)
    return T.slice_axis(logits, 1, 0, cfg.n_tokens)  # drop the action token


def localize(z_fused, actions, params):
    """Per-patch change probabilities (B, N, 4), sigmoid range (0, 1)."""
    return T.sigmoid(localize_logits(z_fused, actions, params))


def threshold_mask(probs, tau):
    """Binary mask (B, N): 1 iff max sub-region probability strictly
    exceeds tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    probs = np.asarray(getattr(probs, "data", probs))
    return (probs.max(axis=-1) > tau).astype(np.uint8)


def mask_index_lists(mask_row):
    """Sorted foreground / background patch index lists for one sample."""
    idx = np.arange(mask_row.shape[0])
    return idx[mask_row == 1], idx[mask_row == 0]


def adaptive_batch_size(foreground_counts, k_min):
    counts = np.asarray(foreground_counts)
    if counts.size == 0:
        raise ValueError("empty batch")
    if np.any(counts < 0):
        raise ValueError("negative foreground count")
    return int(max(k_min, counts.max()))


def _padding_rng(seed, step_index, fg_idx):
    entropy = (int(seed) & 0xFFFFFFFF, int(step_index)) + tuple(int(i) for i in fg_idx)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def gather_and_pad(mask, k_batch, seed, step_index=0):
    """Token index plan for the sparse batch.

    Returns (index (B, k_batch) int array, counts (B,)). Row b lists the
    foreground patches of sample b in ascending order, followed by
    k_batch - k'_b background patches sampled without replacement from a
    per-sample seeded stream.
    """
    mask = np.asarray(mask)
    B, n = mask.shape
    if k_batch > n:
        raise ValueError(f"k_batch {k_batch} exceeds token count {n}")
    index = np.empty((B, k_batch), dtype=np.int64)
    counts = np.empty(B, dtype=np.int64)
    for b in range(B):
        fg, bg = mask_index_lists(mask[b])
        if fg.size > k_batch:
            raise ValueError("k_batch smaller than a sample's foreground")
        counts[b] = fg.size
        pad = k_batch - fg.size
        if pad:
            rng = _padding_rng(seed, step_index, fg)
            chosen = rng.choice(bg, size=pad, replace=False)
            index[b] = np.concatenate([fg, chosen])
        else:
            index[b] = fg
    return index, counts


def predict_foreground(fg_tokens, actions, params):
    """Primary-predictor ViT over k_batch tokens + 1 action token;
    output rows correspond 1:1 to input rows."""
    fg_tokens = T.as_tensor(fg_tokens)
    k = fg_tokens.shape[1]
    act = embed_action(actions, params.pred_action_w, params.pred_action_b)
    tokens = T.concat([fg_tokens, T.reshape(act, (act.shape[0], 1, params.cfg.dim))], axis=1)
    out = nn.vit_forward(tokens, params.pred_blocks)
    return T.slice_axis(out, 1, 0, k)


def lrm_update(z_bg, fg_pred, params, key_mask=None):
    """Background tokens passively query the predicted foreground:
    z_bg + CA(Q=z_bg, K/V=fg_pred). Empty foreground returns the
    background unchanged."""
    z_bg = T.as_tensor(z_bg)
    if fg_pred is None or fg_pred.shape[-2] == 0:
        return z_bg
    return z_bg + nn.cross_attention(z_bg, T.as_tensor(fg_pred), params.lrm, key_mask=key_mask)


@dataclass
class StepInfo:
    mask: np.ndarray          # (B, N) uint8
    probs: np.ndarray | None  # (B, N, head_out)
    index: np.ndarray | None  # (B, k_batch)
    counts: np.ndarray | None
    k_batch: int | None


def step(z_t, hist, actions, params, variant="full", seed=0, step_index=0,
         dense_params=None, bg_perturb=None):
    """One transition: (B, N, D) latents + (B, 2) actions -> next latents.

    `bg_perturb`, if given, is added to the background stream AFTER the
    foreground gather; it exists to demonstrate that foreground
    predictions cannot depend on background content.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}'")
    z_t = T.as_tensor(z_t)
    B, n, d = z_t.shape

    if variant == "dense":
        if dense_params is None:
            raise ValueError("dense variant requires dense_params")
        z_next = _dense_step(z_t, hist, actions, dense_params)
        info = StepInfo(np.ones((B, n), dtype=np.uint8), None, None, None, None)
        return z_next, info

    z_f = fuse_history(z_t, hist, params)
    probs = localize(z_f, actions, params)
    mask = threshold_mask(probs.data, params.cfg.tau)
    counts_all = mask.sum(axis=1)
    k_batch = min(adaptive_batch_size(counts_all, params.cfg.k_min), n)
    index, counts = gather_and_pad(mask, k_batch, seed, step_index)

    fg = T.take_tokens(z_f, index)
    fg_pred = predict_foreground(fg, actions, params)

    # the background stream is anchored on the raw current tokens: the
    # fused latent is a working representation for localization and
    # foreground gathering, while background tokens only receive the
    # small context-driven correction (or none, for naive_sparse)
    bg_base = z_t if bg_perturb is None else z_t + T.as_tensor(bg_perturb)

    # scatter predictions to patch positions; padding rows are selected
    # away by the foreground mask below
    scattered = T.overwrite_tokens(z_t.detach() * 0.0, fg_pred, index)

    if variant == "full":
        key_mask = np.arange(k_batch)[None, :] < np.maximum(counts, 1)[:, None]
        valid = (counts > 0).astype(z_t.dtype.type)[:, None, None]
        update = nn.cross_attention(bg_base, fg_pred, params.lrm, key_mask=key_mask)
        bg = bg_base + update * Tensor(valid)
    else:  # naive_sparse: verbatim copy
        bg = bg_base

    m = Tensor(mask[:, :, None].astype(z_t.dtype.type))
    z_next = scattered * m + bg * (1.0 - m)
    return z_next, StepInfo(mask, probs.data, index, counts, k_batch)


def _dense_step(z_t, hist, actions, dense_params):
    cfg = dense_params.cfg
    B, n, d = z_t.shape
    frames = []
    m = 0 if hist is None else hist.shape[-2]
    n_hist = cfg.history - 1
    have = m // n
    for i in range(n_hist - have):
        frames.append(z_t)  # left-pad short histories with the current frame
    if have:
        frames.append(T.as_tensor(hist))
    frames.append(z_t)
    act = embed_action(actions, dense_params.action_w, dense_params.action_b)
    tokens = T.concat(frames + [T.reshape(act, (B, 1, d))], axis=1)
    out = nn.vit_forward(tokens, dense_params.blocks)
    total = tokens.shape[1]
    return T.slice_axis(out, 1, total - 1 - n, total - 1)


def rollout(z_0, hist_0, actions, params, variant="full", seed=0,
            dense_params=None, start_index=0):
    """Open-loop iteration of step(); each prediction is pushed into the
    history buffer. actions: (B, H, 2). Returns list of H latents."""
    actions = np.asarray(getattr(actions, "data", actions))
    if actions.ndim != 3 or actions.shape[1] < 1:
        raise ValueError("actions must be (B, H>=1, 2)")
    z = T.as_tensor(z_0)
    n = z.shape[1]
    hist_frames = []
    if hist_0 is not None and hist_0.shape[-2] > 0:
        m = hist_0.shape[-2]
        h0 = T.as_tensor(hist_0)
        hist_frames = [T.slice_axis(h0, 1, i * n, (i + 1) * n) for i in range(m // n)]
    cfg = params.cfg if params is not None else dense_params.cfg
    keep = cfg.history - 1
    out = []
    for t in range(actions.shape[1]):
        hist = T.concat(hist_frames, axis=1) if hist_frames else None
        z_next, _ = step(z, hist, actions[:, t], params, variant, seed,
                         step_index=start_index + t, dense_params=dense_params)
        out.append(z_next)
        hist_frames = (hist_frames + [z])[-keep:] if keep > 0 else []
        z = z_next
    return out
