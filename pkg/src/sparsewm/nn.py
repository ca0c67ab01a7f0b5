"""Attention / MLP building blocks, parameter containers, AdamW, and a
finite-difference gradient checker.

All residual-branch output projections are zero-initialized so each
stage starts as an exact identity map; remaining weights are seeded
uniform in +-sqrt(1/fan_in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng, shape, fan_in, dtype=None):
    bound = np.sqrt(1.0 / fan_in)
    dtype = dtype or T.default_dtype()
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=None):
    dtype = dtype or T.default_dtype()
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=None):
    dtype = dtype or T.default_dtype()
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def linear(x, w, b):
    # flatten leading dims so the projection is one large fused GEMM
    # instead of a batched loop of small ones
    if len(x.shape) > 2:
        flat = T.reshape(x, (-1, x.shape[-1]))
        return T.reshape(T.affine(flat, w, b), tuple(x.shape[:-1]) + (w.shape[-1],))
    return T.affine(x, w, b)


@dataclass
class AttentionParams:
    """Multi-head attention projections; `wo` zero-initialized by default
    so the residual branch vanishes at init.

    With `out_rank` set, the output projection is the factored product
    `wo @ wo_v` (wo: dim x rank, wo_v: rank x dim, wo_v zero-initialized),
    confining outputs to a rank-limited subspace while keeping the
    residual branch zero at init with non-vanishing gradients.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int
    wo_v: Tensor = None

    @property
    def dim(self):
        return self.wq.shape[0]

    def named(self, prefix=""):
        out = {
            f"{prefix}wq": self.wq, f"{prefix}bq": self.bq,
            f"{prefix}wk": self.wk, f"{prefix}bk": self.bk,
            f"{prefix}wv": self.wv, f"{prefix}bv": self.bv,
            f"{prefix}wo": self.wo, f"{prefix}bo": self.bo,
        }
        if self.wo_v is not None:
            out[f"{prefix}wo_v"] = self.wo_v
        return out


def init_attention(rng, dim, heads, zero_out_proj=True, dtype=None, out_rank=None):
    if dim % heads != 0:
        raise ValueError(f"width {dim} not divisible by {heads} heads")
    if out_rank is not None:
        if not 1 <= out_rank <= dim:
            raise ValueError("out_rank must lie in [1, dim]")
        wo = uniform_init(rng, (dim, out_rank), dim, dtype)
        wo_v = zeros_param((out_rank, dim), dtype)
    else:
        wo = zeros_param((dim, dim), dtype) if zero_out_proj else uniform_init(rng, (dim, dim), dim, dtype)
        wo_v = None
    return AttentionParams(
        wq=uniform_init(rng, (dim, dim), dim, dtype), bq=zeros_param((dim,), dtype),
        wk=uniform_init(rng, (dim, dim), dim, dtype), bk=zeros_param((dim,), dtype),
        wv=uniform_init(rng, (dim, dim), dim, dtype), bv=zeros_param((dim,), dtype),
        wo=wo, bo=zeros_param((dim,), dtype),
        heads=heads, wo_v=wo_v,
    )


def _split_heads(x, heads):
    # (..., n, D) -> (..., heads, n, dh)
    n, d = x.shape[-2], x.shape[-1]
    dh = d // heads
    x = T.reshape(x, x.shape[:-1] + (heads, dh))
    axes = list(range(len(x.shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return T.transpose(x, tuple(axes))


def _merge_heads(x):
    # (..., heads, n, dh) -> (..., n, heads*dh)
    axes = list(range(len(x.shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = T.transpose(x, tuple(axes))
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def cross_attention(q_tokens, kv_tokens, params, key_mask=None):
    """Multi-head scaled dot-product attention, pre-residual.

    q_tokens: (..., Nq, D), kv_tokens: (..., Nk, D). `key_mask` is a
    bool array broadcastable to (..., Nk); masked keys receive zero
    attention weight. Callers add the residual themselves.
    """
    q_tokens, kv_tokens = T.as_tensor(q_tokens), T.as_tensor(kv_tokens)
    if q_tokens.shape[-1] != params.dim or kv_tokens.shape[-1] != params.dim:
        raise ValueError("token width does not match attention params")
    if kv_tokens.shape[-2] < 1:
        raise ValueError("empty key/value set")
    heads = params.heads
    dh = params.dim // heads
    q = _split_heads(linear(q_tokens, params.wq, params.bq), heads)
    k = _split_heads(linear(kv_tokens, params.wk, params.bk), heads)
    v = _split_heads(linear(kv_tokens, params.wv, params.bv), heads)
    scores = T.matmul(q, T.transpose(k, tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2)))
    scores = scores * float(1.0 / np.sqrt(dh))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        # broadcast over heads and queries: (..., Nk) -> (..., 1, 1, Nk)
        key_mask = key_mask[..., None, None, :]
    att = T.softmax_rows(scores, key_mask=key_mask)
    out = _merge_heads(T.matmul(att, v))
    if params.wo_v is not None:
        return linear(T.matmul(out, params.wo), params.wo_v, params.bo)
    return linear(out, params.wo, params.bo)


@dataclass
class VitBlockParams:
    attn: AttentionParams
    ln1_scale: Tensor
    ln1_shift: Tensor
    ln2_scale: Tensor
    ln2_shift: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix=""):
        out = self.attn.named(prefix + "attn.")
        out.update({
            f"{prefix}ln1_scale": self.ln1_scale, f"{prefix}ln1_shift": self.ln1_shift,
            f"{prefix}ln2_scale": self.ln2_scale, f"{prefix}ln2_shift": self.ln2_shift,
            f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
            f"{prefix}w2": self.w2, f"{prefix}b2": self.b2,
        })
        return out


def init_vit_block(rng, dim, heads, mlp_ratio=4.0, dtype=None):
    hidden = int(round(dim * mlp_ratio))
    return VitBlockParams(
        attn=init_attention(rng, dim, heads, zero_out_proj=True, dtype=dtype),
        ln1_scale=ones_param((dim,), dtype), ln1_shift=zeros_param((dim,), dtype),
        ln2_scale=ones_param((dim,), dtype), ln2_shift=zeros_param((dim,), dtype),
        w1=uniform_init(rng, (dim, hidden), dim, dtype), b1=zeros_param((hidden,), dtype),
        w2=zeros_param((hidden, dim), dtype), b2=zeros_param((dim,), dtype),
    )


def vit_forward(tokens, blocks, key_mask=None):
    """Pre-norm transformer: x += SA(LN(x)); x += MLP(LN(x)) per block."""
    x = T.as_tensor(tokens)
    for blk in blocks:
        if x.shape[-1] != blk.attn.dim:
            raise ValueError("token width does not match block width")
        h = T.layer_norm(x, blk.ln1_scale, blk.ln1_shift)
        x = x + cross_attention(h, h, blk.attn, key_mask=key_mask)
        h = T.layer_norm(x, blk.ln2_scale, blk.ln2_shift)
        x = x + linear(T.gelu(linear(h, blk.w1, blk.b1)), blk.w2, blk.b2)
    return x


def named_block_list(blocks, prefix):
    out = {}
    for i, blk in enumerate(blocks):
        out.update(blk.named(f"{prefix}{i}."))
    return out


# -- optimizer ------------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(params)
        self.state = AdamWState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        st = self.state
        st.step_count += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1**st.step_count
        c2 = 1.0 - b2**st.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for '{name}'")
            st.m[name] = b1 * st.m[name] + (1 - b1) * g
            st.v[name] = b2 * st.v[name] + (1 - b2) * g * g
            mhat = st.m[name] / c1
            vhat = st.v[name] / c2
            update = mhat / (np.sqrt(vhat) + st.eps)
            if st.weight_decay:
                update = update + st.weight_decay * p.data
            p.data = (p.data - st.lr * update).astype(p.data.dtype)


# -- gradient checking ----------------------------------------------------


def grad_check(f, params, n_coords=5, step=1e-4, rng=None):
    """Max relative error between reverse-mode and central-difference
    gradients of scalar `f(params)`, sampled over `n_coords` coordinates
    per tensor. Parameters must be float64.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params ('{name}' is {p.data.dtype})")
        p.grad = None
    out = f()
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    max_err = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with T.no_grad():
                hi = f().item()
            flat[c] = orig - step
            with T.no_grad():
                lo = f().item()
            flat[c] = orig
            fd = (hi - lo) / (2 * step)
            an = analytic[name].reshape(-1)[c]
            # absolute floor keeps FD truncation noise on near-zero
            # coordinates from masquerading as relative error
            denom = max(abs(fd), abs(an), 1e-4)
            max_err = max(max_err, abs(fd - an) / denom)
    return max_err


def params_to_float64(params):
    """Copy of a named parameter dict cast to float64 (for grad checks)."""
    return {n: Tensor(p.data.astype(np.float64), requires_grad=True) for n, p in params.items()}
