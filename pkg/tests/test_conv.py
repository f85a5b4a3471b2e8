import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnet.conv import (DepthwiseKernel, conv2d, conv2d_backward, conv_output_size,
                       depthwise_conv2d, depthwise_conv2d_backward)
from bnet.tensor import TensorError
from oracles import central_difference, naive_conv_oracle, naive_depthwise_oracle, rel_err


def _kern(rng, c, k, d=1, dtype=np.float64):
    return DepthwiseKernel(rng.standard_normal((c, k, k)).astype(dtype),
                           rng.standard_normal(c).astype(dtype), d)


def test_k1_is_affine():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 5))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    y = depthwise_conv2d(x, DepthwiseKernel(g[:, None, None], b))
    np.testing.assert_array_equal(y, x * g[None, :, None, None] + b[None, :, None, None])


def test_all_ones_3x3():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    y = depthwise_conv2d(x, DepthwiseKernel(np.ones((1, 3, 3)), np.zeros(1)))
    ref = naive_depthwise_oracle(x, np.ones((1, 3, 3)), np.zeros(1))
    assert ref[0, 0, 1, 1] == 45 and ref[0, 0, 0, 0] == 12
    assert y[0, 0, 1, 1] == 45 and y[0, 0, 0, 0] == 12
    np.testing.assert_array_equal(y, ref)


def test_zero_weights_constant_bias():
    x = np.random.default_rng(1).standard_normal((2, 1, 4, 4))
    y = depthwise_conv2d(x, DepthwiseKernel(np.zeros((1, 3, 3)), np.array([7.0])))
    assert np.all(y == 7.0)


def test_errors():
    with pytest.raises(TensorError, match="kernel size must be odd"):
        DepthwiseKernel(np.zeros((2, 2, 2)), np.zeros(2))
    with pytest.raises(TensorError, match="channel mismatch"):
        depthwise_conv2d(np.zeros((1, 3, 4, 4)), DepthwiseKernel.identity(2, 3))
    with pytest.raises(TensorError):
        conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)))
    with pytest.raises(TensorError):
        depthwise_conv2d_backward(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 4, 4)),
                                  DepthwiseKernel.identity(2, 3))


def test_identity_kernel_padding():
    kern = DepthwiseKernel.identity(4, 5, dilation=2)
    assert kern.padding == 4
    x = np.random.default_rng(2).standard_normal((2, 4, 6, 6))
    np.testing.assert_array_equal(depthwise_conv2d(x, kern), x)


def test_backward_k1_closed_form():
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4))
    gy = np.ones_like(x)
    _, gw, gb = depthwise_conv2d_backward(gy, x, DepthwiseKernel.identity(3, 1))
    np.testing.assert_allclose(gb, [32.0] * 3)
    np.testing.assert_allclose(gw[:, 0, 0], x.sum(axis=(0, 2, 3)))


def test_backward_zero_grad():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5))
    gx, gw, gb = depthwise_conv2d_backward(np.zeros_like(x), x, _kern(rng, 3, 3))
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("k,d", [(3, 1), (5, 1), (3, 2), (1, 1)])
def test_backward_finite_differences(k, d):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 5, 6))
    kern = _kern(rng, 2, k, d)
    r = rng.standard_normal(x.shape)
    out = lambda: depthwise_conv2d(x, kern)
    gx, gw, gb = depthwise_conv2d_backward(r, x, kern)
    assert rel_err(gx, central_difference(out, x, proj=r)) <= 1e-7
    assert rel_err(gw, central_difference(out, kern.weight, proj=r)) <= 1e-7
    assert rel_err(gb, central_difference(out, kern.bias, proj=r)) <= 1e-7


def test_conv_channel_permutation():
    x = np.random.default_rng(6).standard_normal((2, 3, 4, 4))
    perm = [2, 0, 1]
    w = np.zeros((3, 3, 1, 1))
    for o, i in enumerate(perm):
        w[o, i] = 1
    np.testing.assert_array_equal(conv2d(x, w), x[:, perm])


def test_conv_shape_arithmetic():
    assert conv_output_size(224, 3, 2, 1) == 112
    y = conv2d(np.zeros((1, 1, 224, 224), np.float32), np.zeros((2, 1, 3, 3), np.float32), 2, 1)
    assert y.shape == (1, 2, 112, 112)


def test_conv_random_seed11():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    y = conv2d(x, w, 2, 1)
    ref = naive_conv_oracle(x, w, stride=2, padding=1)
    assert y.dtype == np.float32
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (7, 2, 3), (5, 1, 0)])
def test_conv_backward_finite_differences(k, stride, pad):
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((2, 3, k, k))
    y = conv2d(x, w, stride, pad)
    r = rng.standard_normal(y.shape)
    out = lambda: conv2d(x, w, stride, pad)
    gx, gw = conv2d_backward(r, x, w, stride, pad)
    assert rel_err(gx, central_difference(out, x, proj=r)) <= 1e-7
    assert rel_err(gw, central_difference(out, w, proj=r)) <= 1e-7


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 3, 5]))
def test_depthwise_linearity(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    z = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    a, b = rng.uniform(-2, 2, 2).astype(np.float32)
    kern = DepthwiseKernel(rng.standard_normal((3, k, k)).astype(np.float32), np.zeros(3, np.float32))
    lhs = depthwise_conv2d(a * x + b * z, kern)
    rhs = a * depthwise_conv2d(x, kern) + b * depthwise_conv2d(z, kern)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * np.abs(rhs).max())


@pytest.mark.parametrize("k,d", [(3, 1), (5, 1), (3, 2)])
def test_translation_equivariance(k, d):
    rng = np.random.default_rng(21)
    kern = _kern(rng, 2, k, d)
    x = rng.standard_normal((1, 2, 14, 14))
    shifted = np.zeros_like(x)
    shifted[:, :, 1:, 1:] = x[:, :, :-1, :-1]
    y, ys = depthwise_conv2d(x, kern), depthwise_conv2d(shifted, kern)
    p = d * (k - 1) // 2
    inner = slice(p + 1, 14 - p)
    np.testing.assert_allclose(ys[:, :, inner, inner],
                               y[:, :, p:14 - p - 1, p:14 - p - 1], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("k,d", [(3, 1), (5, 1), (3, 2), (7, 1)])
def test_receptive_field(k, d):
    rng = np.random.default_rng(22)
    kern = _kern(rng, 1, k, d)
    x = rng.standard_normal((1, 1, 17, 17))
    base = depthwise_conv2d(x, kern)
    radius = d * (k - 1) // 2
    for r in range(17):
        for s in range(17):
            xp = x.copy()
            xp[0, 0, r, s] += 1.0
            changed = depthwise_conv2d(xp, kern) != base
            cheb = np.maximum(np.abs(np.arange(17)[:, None] - r), np.abs(np.arange(17)[None, :] - s))
            assert not np.any(changed[0, 0][cheb > radius])
