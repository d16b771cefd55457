import numpy as np
import pytest

from occudet.ops import (NonFiniteError, Param, channel_mix, conv2d, conv3d,
                         dense, ensure_finite, layer_norm, relu, sigmoid,
                         softmax, upsample_nearest)
from occudet.rng import Rng


def gen(seed=0):
    return Rng(seed).stream(99).generator()


def test_dense_identity():
    g = gen()
    x = g.standard_normal((3, 4))
    y, _ = dense(x, np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(y, x)


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        dense(np.zeros((2, 3)), np.zeros((4, 2)))


def test_conv2d_identity_1x1():
    g = gen(1)
    x = g.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    y, _ = conv2d(x, w)
    np.testing.assert_allclose(y, x)


def test_conv3d_identity_1x1():
    g = gen(2)
    x = g.standard_normal((1, 2, 4, 4, 3))
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0], w[1, 1] = 1.0, 1.0
    y, _ = conv3d(x, w)
    np.testing.assert_allclose(y, x)


def test_conv_even_kernel_rejected():
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        conv3d(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 3, 3, 2)))


def test_conv2d_stride2_shape():
    y, _ = conv2d(np.zeros((1, 2, 8, 6)), np.zeros((4, 2, 3, 3)), stride=2)
    assert y.shape == (1, 4, 4, 3)


def test_conv2d_matches_direct_loop():
    # independent oracle: plain nested loops over output pixels and taps
    g = gen(3)
    x = g.standard_normal((1, 2, 5, 4))
    w = g.standard_normal((3, 2, 3, 3))
    b = g.standard_normal(3)
    y, _ = conv2d(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros_like(y)
    for o in range(3):
        for i in range(5):
            for j in range(4):
                acc = b[o]
                for c in range(2):
                    for a in range(3):
                        for bb in range(3):
                            acc += w[o, c, a, bb] * xp[0, c, i + a, j + bb]
                want[0, o, i, j] = acc
    np.testing.assert_allclose(y, want, rtol=1e-12)


def test_softmax_constant_vector():
    y, _ = softmax(np.full((1, 9), 2.5), axis=1)
    np.testing.assert_allclose(y, 1.0 / 9)


def test_softmax_sums_to_one():
    g = gen(4)
    y, _ = softmax(g.standard_normal((3, 5, 7)), axis=1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_relu_sigmoid_ranges():
    g = gen(5)
    x = g.standard_normal(50)
    r, _ = relu(x)
    assert (r >= 0).all()
    s, _ = sigmoid(x)
    assert ((s > 0) & (s < 1)).all()


def test_layer_norm_normalizes():
    g = gen(6)
    x = g.standard_normal((6, 10)) * 3 + 2
    y, _ = layer_norm(x, np.ones(6), np.zeros(6), axis=0)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-2)


def test_channel_mix_matches_dense():
    g = gen(7)
    x = g.standard_normal((3, 4, 5))
    w = g.standard_normal((2, 3))
    y, _ = channel_mix(x, w)
    want = np.einsum("oc,cxy->oxy", w, x)
    np.testing.assert_allclose(y, want, rtol=1e-12)


def test_upsample_nearest_roundtrip():
    g = gen(8)
    x = g.standard_normal((2, 3, 4))
    y, vjp = upsample_nearest(x, 2, (1, 2))
    assert y.shape == (2, 6, 8)
    np.testing.assert_array_equal(y[:, ::2, ::2], x)
    (dx,) = vjp(np.ones_like(y))
    np.testing.assert_allclose(dx, 4.0)


def test_nonfinite_surfaced():
    with pytest.raises(NonFiniteError):
        ensure_finite("x", np.array([1.0, np.nan]))
    bad = np.array([[np.inf, 1.0]])
    with pytest.raises(NonFiniteError):
        dense(bad, np.ones((2, 1)))


def test_param_grad_shape():
    p = Param(name="w", value=np.zeros((2, 3)))
    assert p.grad.shape == (2, 3)
    p.grad += 1.0
    p.zero_grad()
    assert not p.grad.any()
