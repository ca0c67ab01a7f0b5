"""Autodiff core: forward values, reverse-mode gradients, broadcasting,
dtype discipline, and the non-finite guard."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsewm import tensor as T
from sparsewm.tensor import Tensor


def _finite_arrays(shape=(3, 4), lo=-5.0, hi=5.0):
    return st.lists(
        st.floats(lo, hi, allow_nan=False, width=32),
        min_size=int(np.prod(shape)), max_size=int(np.prod(shape)),
    ).map(lambda xs: np.array(xs, dtype=np.float64).reshape(shape))


def _num_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


ELEMENTWISE = [
    (T.exp, np.exp, (-3, 3)),
    (T.log, np.log, (0.1, 5)),
    (T.sigmoid, lambda x: 1 / (1 + np.exp(-x)), (-5, 5)),
    (T.tanh, np.tanh, (-5, 5)),
    (T.sqrt, np.sqrt, (0.1, 5)),
    (T.square, np.square, (-3, 3)),
]


@pytest.mark.parametrize("op,ref,rng_range", ELEMENTWISE)
def test_elementwise_forward_and_grad(op, ref, rng_range, rng):
    x = rng.uniform(*rng_range, size=(3, 5))
    with T.use_dtype(np.float64):
        t = Tensor(x, requires_grad=True)
        out = op(t)
        assert np.allclose(out.data, ref(x), rtol=1e-12)
        T.reduce_sum(out).backward()
        num = _num_grad(lambda v: ref(v).sum(), x.copy())
        assert np.allclose(t.grad, num, atol=1e-6)


def test_gelu_matches_tanh_approximation(rng):
    x = rng.normal(0, 2, size=(4, 7))
    c = np.sqrt(2.0 / np.pi)
    ref = 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))
    with T.use_dtype(np.float64):
        t = Tensor(x, requires_grad=True)
        out = T.gelu(t)
        assert np.allclose(out.data, ref, rtol=1e-12)
        T.reduce_sum(out).backward()
        num = _num_grad(
            lambda v: (0.5 * v * (1 + np.tanh(c * (v + 0.044715 * v**3)))).sum(), x.copy())
        assert np.allclose(t.grad, num, atol=1e-6)


def test_gelu_paths_bit_identical(rng):
    """The inference fast path must agree exactly with the training path."""
    x = rng.normal(0, 2, size=(64, 33)).astype(np.float32)
    with_grad = T.gelu(Tensor(x, requires_grad=True)).data
    with T.no_grad():
        without = T.gelu(Tensor(x, requires_grad=True)).data
    assert np.array_equal(with_grad, without)


def test_add_mul_broadcasting_grads(rng):
    with T.use_dtype(np.float64):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        T.reduce_sum((a + b) * b).backward()
        assert a.grad.shape == (4, 3)
        assert b.grad.shape == (3,)
        # d/db sum((a+b)*b) = sum_rows(a) + 2*4*b
        assert np.allclose(b.grad, a.data.sum(axis=0) + 8 * b.data)


def test_scalar_ops_preserve_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    for out in (x * 0.5, x + 1.0, 1.0 - x, x * np.float64(2.0)):
        assert out.data.dtype == np.float32


def test_matmul_grads_batched(rng):
    with T.use_dtype(np.float64):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        T.reduce_sum(T.square(T.matmul(a, b))).backward()
        num = _num_grad(lambda v: np.square(v @ b.data).sum(), a.data.copy())
        assert np.allclose(a.grad, num, atol=1e-5)
        numb = _num_grad(lambda v: np.square(a.data @ v).sum(), b.data.copy())
        assert np.allclose(b.grad, numb, atol=1e-5)


def test_affine_equals_matmul_plus_bias(rng):
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        out = T.affine(x, w, b)
        assert np.allclose(out.data, x.data @ w.data + b.data)
        T.reduce_sum(T.square(out)).backward()
        g = 2 * out.data
        assert np.allclose(x.grad, g @ w.data.T)
        assert np.allclose(w.grad, x.data.T @ g)
        assert np.allclose(b.grad, g.sum(axis=0))


def test_softmax_rows_stable_at_large_logits():
    x = np.array([[1000.0, 1000.0, -1000.0]], dtype=np.float64)
    out = T.softmax_rows(Tensor(x)).data
    assert np.allclose(out, [[0.5, 0.5, 0.0]])
    assert np.isfinite(out).all()


def test_softmax_rows_key_mask(rng):
    x = rng.normal(size=(2, 5))
    mask = np.array([[True, True, False, True, False]] * 2)
    out = T.softmax_rows(Tensor(x), key_mask=mask).data
    assert np.allclose(out[:, [2, 4]], 0.0)
    assert np.allclose(out.sum(axis=-1), 1.0)
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(x), key_mask=np.zeros((2, 5), dtype=bool))


def test_softmax_grad(rng):
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        w = rng.normal(size=(3, 6))
        T.reduce_sum(T.softmax_rows(x) * Tensor(w)).backward()

        def ref(v):
            e = np.exp(v - v.max(-1, keepdims=True))
            return ((e / e.sum(-1, keepdims=True)) * w).sum()

        num = _num_grad(ref, x.data.copy())
        assert np.allclose(x.grad, num, atol=1e-6)


def test_layer_norm_forward_and_grad(rng):
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        sc = Tensor(rng.normal(size=(8,)) + 1, requires_grad=True)
        sh = Tensor(rng.normal(size=(8,)), requires_grad=True)
        out = T.layer_norm(x, sc, sh)
        mu = x.data.mean(-1, keepdims=True)
        sd = np.sqrt(x.data.var(-1, keepdims=True) + 1e-5)
        assert np.allclose(out.data, (x.data - mu) / sd * sc.data + sh.data)
        T.reduce_sum(T.square(out)).backward()

        def ref(v):
            m = v.mean(-1, keepdims=True)
            s = np.sqrt(v.var(-1, keepdims=True) + 1e-5)
            return np.square((v - m) / s * sc.data + sh.data).sum()

        num = _num_grad(ref, x.data.copy())
        assert np.allclose(x.grad, num, atol=1e-5)


def test_bce_with_logits_matches_reference(rng):
    x = rng.normal(0, 3, size=(5, 4))
    y = (rng.random((5, 4)) > 0.7).astype(np.float64)
    w = 3.0
    with T.use_dtype(np.float64):
        t = Tensor(x, requires_grad=True)
        loss = T.bce_with_logits(t, y, pos_weight=w)
        p = 1 / (1 + np.exp(-x))
        ref = -(w * y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
        assert np.allclose(loss.item(), ref, rtol=1e-10)
        loss.backward()
        num = _num_grad(
            lambda v: -(w * y * np.log(1 / (1 + np.exp(-v)))
                        + (1 - y) * np.log(1 - 1 / (1 + np.exp(-v)))).mean(), x.copy())
        assert np.allclose(t.grad, num, atol=1e-6)


def test_bce_with_logits_stable_at_extreme_logits():
    x = np.array([[60.0, -60.0]], dtype=np.float32)
    y = np.array([[1.0, 0.0]], dtype=np.float32)
    assert T.bce_with_logits(Tensor(x), y).item() < 1e-6


def test_take_tokens_gather_and_grad(rng):
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        idx = np.array([[0, 2, 2], [4, 1, 0]])
        out = T.take_tokens(x, idx)
        for b in range(2):
            assert np.array_equal(out.data[b], x.data[b, idx[b]])
        T.reduce_sum(out).backward()
        # duplicated index 2 in row 0 accumulates twice
        assert np.allclose(x.grad[0, 2], 2.0)
        assert np.allclose(x.grad[0, 1], 0.0)


def test_overwrite_tokens_scatter_and_grad(rng):
    with T.use_dtype(np.float64):
        base = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        vals = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
        idx = np.array([[1, 3], [0, 4]])
        out = T.overwrite_tokens(base, vals, idx)
        assert np.array_equal(out.data[0, 1], vals.data[0, 0])
        assert np.array_equal(out.data[0, 0], base.data[0, 0])
        T.reduce_sum(out * out).backward()
        # overwritten rows contribute no grad to base
        assert np.allclose(base.grad[0, 1], 0.0)
        assert np.allclose(base.grad[0, 0], 2 * out.data[0, 0])


def test_concat_slice_transpose_roundtrip(rng):
    with T.use_dtype(np.float64):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        cat = T.concat([a, b], axis=1)
        assert cat.shape == (2, 5, 4)
        back = T.slice_axis(cat, 1, 0, 3)
        T.reduce_sum(back * back).backward()
        assert np.allclose(a.grad, 2 * a.data)
        assert np.allclose(b.grad, 0.0)


def test_reduce_mean_grad(rng):
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.reduce_mean(x).backward()
        assert np.allclose(x.grad, np.full((3, 4), 1 / 12))


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.square(x)
    assert not out.requires_grad
    assert out._backward is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(FloatingPointError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        T.exp(Tensor(np.array([1e5], dtype=np.float64)))
    with pytest.raises(FloatingPointError):
        T.log(Tensor(np.array([0.0])))
    with pytest.raises(FloatingPointError):
        T.reciprocal(Tensor(np.array([0.0])))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_large_finite_values_do_not_raise():
    # the fast finiteness check must not false-positive on benign overflow
    # of the one-pass sum
    big = np.full(4096, 1e38, dtype=np.float32)
    out = Tensor(big) * 1.0
    assert np.isfinite(out.data).all()


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        T.square(x).backward()


def test_repeated_subexpression_accumulates(rng):
    with T.use_dtype(np.float64):
        a = Tensor(rng.normal(size=(3,)), requires_grad=True)
        T.reduce_sum(T.square(a + a)).backward()
        assert np.allclose(a.grad, 8 * a.data)


@settings(max_examples=50, deadline=None)
@given(_finite_arrays((2, 3)), _finite_arrays((2, 3)))
def test_add_mul_agree_with_numpy(x, y):
    assert np.allclose((Tensor(x) + Tensor(y)).data, x + y)
    assert np.allclose((Tensor(x) * Tensor(y)).data, x * y)
    assert np.allclose((Tensor(x) - Tensor(y)).data, x - y)


@settings(max_examples=30, deadline=None)
@given(_finite_arrays((4, 6), lo=-10, hi=10))
def test_softmax_rows_normalized(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-10)
