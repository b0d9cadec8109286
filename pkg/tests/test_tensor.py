from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import grad_rel_error, network_case, op_cases
from revtlab import tensor as T
from revtlab.tensor import DimensionError, Tensor, UsageError

OPS = sorted(op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OPS)
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(name, seed):
    build, inputs = op_cases(np.random.default_rng(seed))[name]
    assert grad_rel_error(build, inputs, seed) <= 1e-4


@pytest.mark.parametrize("kind", ["mit", "conv"])
def test_network_gradient(kind):
    build, inputs = network_case(3, kind)
    assert grad_rel_error(build, inputs, seed=3, max_entries=3) <= 1e-3


def _conv_loop(x, w, b, stride, padding, groups):
    bsz, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    og = o // groups
    for n in range(bsz):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, g * cg:(g + 1) * cg, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, oc, i, j] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,padding,groups,cin,cout", [
    (1, 0, 1, 3, 2), (2, 1, 1, 2, 4), (1, 1, 2, 4, 6), (2, 1, 3, 3, 3), (1, 2, 1, 1, 1),
])
def test_conv2d_matches_direct_loop(stride, padding, groups, cin, cout):
    rng = np.random.default_rng(stride * 10 + groups)
    x = rng.normal(size=(2, cin, 7, 6))
    w = rng.normal(size=(cout, cin // groups, 3, 3))
    b = rng.normal(size=cout)
    with T.precision(np.float64):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups).data
    np.testing.assert_allclose(got, _conv_loop(x, w, b, stride, padding, groups), atol=1e-12)


def test_interp_matrix_half_pixel_values():
    # 4 -> 2 samples at source coordinates 0.5 and 2.5
    np.testing.assert_allclose(T.interp_matrix(2, 4), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    # 2 -> 4 samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    np.testing.assert_allclose(T.interp_matrix(4, 2), [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])


def test_interp_rows_sum_to_one():
    for n_out, n_in in [(3, 7), (7, 3), (5, 5), (1, 4)]:
        np.testing.assert_allclose(T.interp_matrix(n_out, n_in).sum(axis=1), 1.0)


def test_resize_same_size_is_identity():
    x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    assert T.resize_bilinear(x, (3, 4)) is x


def test_cross_entropy_ignores_masked_pixels():
    logits = np.zeros((1, 2, 1, 2), dtype=np.float32)
    logits[0, 0, 0, 0] = 5.0
    full = T.cross_entropy(Tensor(logits), np.array([[[0, 1]]])).item()
    masked = T.cross_entropy(Tensor(logits), np.array([[[0, 255]]])).item()
    assert masked == pytest.approx(np.log1p(np.exp(-5.0)), rel=1e-5)
    assert full == pytest.approx((np.log1p(np.exp(-5.0)) + np.log(2)) / 2, rel=1e-5)


def test_cross_entropy_uniform_logits_give_log_classes():
    loss = T.cross_entropy(Tensor(np.zeros((2, 5, 3, 3))), np.zeros((2, 3, 3), dtype=int)).item()
    assert loss == pytest.approx(np.log(5), rel=1e-6)


def test_layernorm_output_statistics():
    x = np.random.default_rng(1).normal(3.0, 2.0, size=(4, 16))
    with T.precision(np.float64):
        y = T.layernorm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_backward_clears_tape_and_accumulates():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(T.mul(a, a)))
    assert len(T.get_tape()) == 0
    np.testing.assert_allclose(a.grad, [2.0, 4.0])
    T.backward(T.tsum(a))
    np.testing.assert_allclose(a.grad, [3.0, 5.0])
    a.zero_grad()
    assert a.grad is None


def test_shared_input_gradients_sum():
    a = Tensor(np.array([3.0]), requires_grad=True)
    T.backward(T.tsum(T.add(T.mul(a, a), a)))
    np.testing.assert_allclose(a.grad, [7.0])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.relu(a)
    assert len(T.get_tape()) == 0 and not out.requires_grad


def test_constants_are_not_recorded():
    T.relu(Tensor(np.ones(3)))
    assert len(T.get_tape()) == 0


def test_backward_requires_scalar_and_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    out = T.relu(a)
    with pytest.raises(UsageError):
        T.backward(out)
    T.get_tape().clear()
    with pytest.raises(UsageError):
        T.backward(Tensor(np.array(1.0)))


def test_non_finite_values_raise():
    with pytest.raises(FloatingPointError):
        T.add(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_precision_context_restores_dtype():
    assert T.default_dtype() is np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


@pytest.mark.parametrize("fn", [
    lambda: T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
    lambda: T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda: T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2)))),
    lambda: T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3)))),
    lambda: T.conv2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 5, 5)))),
    lambda: T.reshape(Tensor(np.ones(6)), (4, 2)),
    lambda: T.cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 3)),
    lambda: T.mean(Tensor(np.ones((2, 2))), axis=2),
])
def test_shape_errors(fn):
    with pytest.raises(DimensionError):
        fn()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_softmax_rows_are_distributions(n, s, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(n, s))
    y = T.softmax(Tensor(x), axis=1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 9), st.integers(1, 9))
def test_bilinear_resize_preserves_constants(h, w, ho, wo):
    x = Tensor(np.full((1, 1, h, w), 2.5))
    np.testing.assert_allclose(T.resize_bilinear(x, (ho, wo)).data, 2.5, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reshape_transpose_roundtrip_gradient_is_identity(seed):
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 3, 4)), requires_grad=True)
    y = T.transpose(T.reshape(T.transpose(x, (1, 0, 2)), (3, 8)), (1, 0))
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
