"""Frozen observation model: patchify -> linear projection -> sinusoidal
positions -> one global self-attention mixing layer with residual.

The mixing layer is what couples every token to the whole scene; without
it the background tokens would be constant whenever their pixels are,
and the background-update pathway of the world model would be vacuous.
Its output projection is rank-limited to D/8: every mixing contribution
— and therefore every feature change of a visually static patch — lives
in a fixed D/8-dimensional subspace, which is what makes the background
updates genuinely low-rank and the single-layer correction module
adequate. A small per-token linear decoder (trained once, then frozen)
supports the pixel-space diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import checkpoint_checksum


@dataclass
class EncoderParams:
    patch_proj: np.ndarray  # (patch_pixels, D)
    patch_bias: np.ndarray  # (D,)
    pos_table: np.ndarray   # (N, D)
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int
    patch: int
    image_hw: int
    seed: int
    frozen: bool = True

    @property
    def dim(self):
        return self.patch_proj.shape[1]

    @property
    def n_tokens(self):
        return self.pos_table.shape[0]

    @property
    def grid(self):
        return self.image_hw // self.patch

    def named(self, prefix="encoder."):
        return {
            f"{prefix}patch_proj": self.patch_proj, f"{prefix}patch_bias": self.patch_bias,
            f"{prefix}pos_table": self.pos_table,
            f"{prefix}wq": self.wq, f"{prefix}wk": self.wk,
            f"{prefix}wv": self.wv, f"{prefix}wo": self.wo,
        }

    def checksum(self):
        return checkpoint_checksum(self.named())


def sinusoidal_positions(n, dim):
    pos = np.arange(n)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((n, dim), dtype=np.float32)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def make_encoder(seed=0, image_hw=64, patch=8, dim=64, heads=4):
    rng = np.random.default_rng(seed)
    patch_pixels = patch * patch * 3
    n = (image_hw // patch) ** 2

    def u(shape, fan_in):
        return rng.uniform(-np.sqrt(1.0 / fan_in), np.sqrt(1.0 / fan_in), size=shape).astype(np.float32)

    mix_rank = max(1, dim // 8)
    return EncoderParams(
        patch_proj=u((patch_pixels, dim), patch_pixels),
        patch_bias=np.zeros(dim, dtype=np.float32),
        pos_table=sinusoidal_positions(n, dim),
        wq=u((dim, dim), dim), wk=u((dim, dim), dim),
        wv=u((dim, dim), dim),
        wo=(u((dim, mix_rank), dim) @ u((mix_rank, dim), mix_rank)).astype(np.float32),
        heads=heads, patch=patch, image_hw=image_hw, seed=seed,
    )


def patchify(images, patch):
    """(..., H, W, 3) -> (..., N, patch*patch*3), row-major patch order."""
    images = np.asarray(images, dtype=np.float32)
    *lead, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


def unpatchify(tokens, patch, image_hw):
    """(..., N, patch*patch*3) -> (..., H, W, 3)."""
    tokens = np.asarray(tokens)
    *lead, n, _ = tokens.shape
    g = image_hw // patch
    x = tokens.reshape(*lead, g, g, patch, patch, 3)
    x = np.moveaxis(x, -3, -4)  # (..., g, patch, g, patch, 3)
    return x.reshape(*lead, image_hw, image_hw, 3)


def _mix_attention(x, params):
    # plain-numpy multi-head self-attention with residual; frozen, no grads
    heads = params.heads
    n, d = x.shape[-2], x.shape[-1]
    dh = d // heads

    def split(y):
        return np.swapaxes(y.reshape(*y.shape[:-1], heads, dh), -2, -3)

    q, k, v = split(x @ params.wq), split(x @ params.wk), split(x @ params.wv)
    scores = (q @ np.swapaxes(k, -1, -2)) * float(1.0 / np.sqrt(dh))
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(axis=-1, keepdims=True)
    out = np.swapaxes(att @ v, -2, -3).reshape(*x.shape[:-1], d)
    return x + out @ params.wo


def encode(obs, params):
    """Image(s) in [0, 1] -> patch tokens (..., N, D), float32.

    Pure and frozen: identical inputs give bit-identical outputs.
    """
    obs = np.asarray(obs, dtype=np.float32)
    if obs.shape[-3] != params.image_hw or obs.shape[-2] != params.image_hw:
        raise ValueError(f"expected {params.image_hw}x{params.image_hw} images, got {obs.shape}")
    tokens = patchify(obs, params.patch) @ params.patch_proj + params.patch_bias
    tokens = tokens + params.pos_table
    return _mix_attention(tokens, params).astype(np.float32)


def clamp_action(a):
    return np.clip(np.asarray(a, dtype=np.float32), -1.0, 1.0)


@dataclass
class DecoderParams:
    w: np.ndarray  # (D, patch_pixels)
    b: np.ndarray  # (patch_pixels,)
    patch: int
    image_hw: int
    frozen: bool = False

    def named(self, prefix="decoder."):
        return {f"{prefix}w": self.w, f"{prefix}b": self.b}

    def checksum(self):
        return checkpoint_checksum(self.named())


def decode(tokens, params):
    """Per-token linear map back to patch pixels, clamped to [0, 1]."""
    tokens = np.asarray(tokens, dtype=np.float32)
    flat = tokens @ params.w + params.b
    return unpatchify(np.clip(flat, 0.0, 1.0), params.patch, params.image_hw)
