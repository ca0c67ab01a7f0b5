"""Minimal reverse-mode autodiff over dense numpy arrays.

Float32 is the working precision; float64 is available for gradient
checking via `default_dtype`. Every op validates finiteness of its
output, so NaN/Inf surfaces at the op that produced it instead of three
modules later.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


def _check_finite(arr, opname):
    # Fast path: a single fused reduction. Any NaN poisons the sum and an
    # Inf saturates it, so a finite sum almost always clears the array in
    # one pass. A non-finite sum can also come from benign overflow of
    # large finite values, so only then pay for the exact elementwise scan.
    if np.isfinite(arr.sum()):
        return
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by '{opname}'")


class Tensor:
    """Dense array node of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            # adopt matching temporaries directly; accumulation below never
            # mutates in place, so aliased passthrough grads stay intact
            if (isinstance(grad, np.ndarray) and grad.dtype == self.data.dtype
                    and grad.shape == self.data.shape):
                self.grad = grad
            else:
                self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None):
        """Reverse-mode sweep from this node. Requires a scalar unless
        an explicit output gradient is given."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _pair(a, b):
    """Coerce operands, matching plain scalars to the tensor's dtype so
    float32 graphs stay float32."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data, parents, backward, opname):
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = requires
    if requires:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def reciprocal(a):
    a = as_tensor(a)
    out_data = 1.0 / a.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g * out_data * out_data)

    return _make(out_data, (a,), backward, "reciprocal")


def square(a):
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward, "square")


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward, "sigmoid")


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward, "tanh")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Tanh-approximation GELU (the standard ViT MLP nonlinearity)."""
    a = as_tensor(a)
    x = a.data
    if not (_GRAD_ENABLED and a.requires_grad):
        # inference path: one scratch buffer, in-place ufuncs
        y = x * x
        y *= x
        y *= 0.044715
        y += x
        y *= _GELU_C
        np.tanh(y, out=y)
        y += 1.0
        y *= x
        y *= 0.5
        return _make(y, (a,), None, "gelu")
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

    return _make(out_data, (a,), backward, "gelu")


# -- shape ops ------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(in_shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward, "slice")


def take_tokens(a, index):
    """Gather token rows: a is (B, N, D), index is (B, K) -> (B, K, D)."""
    a = as_tensor(a)
    index = np.asarray(index)
    batch = np.arange(a.data.shape[0])[:, None]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (batch, index), g)
            a._accumulate(full)

    return _make(a.data[batch, index], (a,), backward, "take_tokens")


def overwrite_tokens(base, values, index):
    """Scatter token rows: out = base with out[b, index[b]] = values[b].

    Indices must be unique within each batch row; the gradient to `base`
    is zeroed at overwritten positions.
    """
    base, values = as_tensor(base), as_tensor(values)
    index = np.asarray(index)
    batch = np.arange(base.data.shape[0])[:, None]
    out_data = base.data.copy()
    out_data[batch, index] = values.data

    def backward(g):
        if values.requires_grad:
            values._accumulate(g[batch, index])
        if base.requires_grad:
            gb = g.copy()
            gb[batch, index] = 0.0
            base._accumulate(gb)

    return _make(out_data, (base, values), backward, "overwrite_tokens")


# -- reductions -----------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires >=2-d operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    ad, bd = a.data, b.data
    # batched gufunc matmul is much faster on contiguous operands
    if ad.ndim > 2 and not ad.flags.c_contiguous:
        ad = np.ascontiguousarray(ad)
    if bd.ndim > 2 and not bd.flags.c_contiguous:
        bd = np.ascontiguousarray(bd)
    return _make(ad @ bd, (a, b), backward, "matmul")


def affine(x, w, b):
    """Fused x @ w + b for 2-d x; one output buffer, bias added in place."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("affine expects x (n, k), w (k, m), b (m,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"affine shapes disagree: {x.data.shape} @ {w.data.shape} + {b.data.shape}")
    out_data = x.data @ w.data
    out_data += b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(out_data, (x, w, b), backward, "affine")


def softmax_rows(a, key_mask=None):
    """Row-stabilized softmax over the last axis.

    `key_mask` (broadcastable bool, True = keep) excludes entries before
    normalization; fully-masked rows are an error.
    """
    a = as_tensor(a)
    x = a.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        neg = np.finfo(x.dtype).min / 4
        x = np.where(key_mask, x, neg)
        if not np.all(key_mask.any(axis=-1)):
            raise ValueError("softmax row with all keys masked out")
    if not (_GRAD_ENABLED and a.requires_grad):
        e = x - x.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
        e /= e.sum(axis=-1, keepdims=True)
        if key_mask is not None:
            e[~np.broadcast_to(key_mask, e.shape)] = 0.0
        return _make(e, (a,), None, "softmax")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)
    if key_mask is not None:
        out_data = np.where(key_mask, out_data, 0.0)

    def backward(g):
        if a.requires_grad:
            dot = np.sum(g * out_data, axis=-1, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), backward, "softmax")


def bce_with_logits(logits, targets, pos_weight=1.0):
    """Mean binary cross-entropy on logits, numerically stable, with an
    optional positive-class weight."""
    a = as_tensor(logits)
    y = np.asarray(getattr(targets, "data", targets))
    x = a.data
    w = np.where(y > 0.5, pos_weight, 1.0).astype(x.dtype)
    # log(1 + exp(-|x|)) + max(x, 0) - x*y, weighted
    loss = w * (np.logaddexp(0.0, -np.abs(x)) + np.maximum(x, 0.0) - x * y)
    out_data = np.asarray(loss.mean(), dtype=x.dtype)
    scale = 1.0 / x.size

    def backward(g):
        if a.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            a._accumulate(g * scale * w * (sig - y))

    return _make(out_data, (a,), backward, "bce_with_logits")


def layer_norm(a, scale, shift, eps=1e-5):
    """Per-row (last axis) normalization followed by an affine map."""
    a, scale, shift = as_tensor(a), as_tensor(scale), as_tensor(shift)
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    if not (_GRAD_ENABLED and (a.requires_grad or scale.requires_grad or shift.requires_grad)):
        y = x - mean
        y *= inv
        y *= scale.data
        y += shift.data
        return _make(y, (a, scale, shift), None, "layer_norm")
    xhat = (x - mean) * inv
    out_data = xhat * scale.data + shift.data

    def backward(g):
        if scale.requires_grad:
            scale._accumulate((g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if a.requires_grad:
            n = x.shape[-1]
            gx = g * scale.data
            gsum = gx.sum(axis=-1, keepdims=True)
            gdot = (gx * xhat).sum(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - gsum / n - xhat * gdot / n))

    return _make(out_data, (a, scale, shift), backward, "layer_norm")
