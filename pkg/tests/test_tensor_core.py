import math

import numpy as np
import pytest

from reshape_transfer import tensor_core as tc
from reshape_transfer.errors import InvalidClass, ShapeError

SEEDS = range(5)


def naive_conv(x, kernels, bias):
    """Loop oracle: out[o,y,x] = b[o] + sum_{i,dy,dx} x[i,y+dy,x+dx] * K[o,i,dy,dx]."""
    out_ch, in_ch, k, _ = kernels.shape
    _, h, w = x.shape
    out = np.zeros((out_ch, h - k + 1, w - k + 1))
    for o in range(out_ch):
        for r in range(h - k + 1):
            for c in range(w - k + 1):
                s = bias[o]
                for i in range(in_ch):
                    for dy in range(k):
                        for dx in range(k):
                            s += x[i, r + dy, c + dx] * kernels[o, i, dy, dx]
                out[o, r, c] = s
    return out


def _conv(rng, in_ch, out_ch, k, dtype=np.float64):
    return tc.ConvLayer(rng.normal(size=(out_ch, in_ch, k, k)).astype(dtype),
                        rng.normal(size=out_ch).astype(dtype))


# -- convolution -------------------------------------------------------------

def test_conv_identity_kernel():
    layer = tc.ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))
    x = np.ones((1, 3, 3))
    np.testing.assert_array_equal(tc.conv2d_forward(x, layer), x)


def test_conv_hand_value():
    layer = tc.ConvLayer(np.array([[[[1.0, 0], [0, 1]]]]), np.array([1.0]))
    assert tc.conv2d_forward(np.array([[[1.0, 2], [3, 4]]]), layer).tolist() == [[[6.0]]]


def test_conv_reference_first_layer_shape():
    layer = tc.ConvLayer(np.zeros((16, 1, 11, 11), np.float32), np.zeros(16, np.float32))
    assert tc.conv2d_forward(np.zeros((1, 210, 210), np.float32), layer).shape == (16, 200, 200)


@pytest.mark.parametrize("method", ["cols", "fft"])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv_matches_loop_oracle(method, seed):
    rng = np.random.default_rng(seed)
    layer = _conv(rng, 2, 3, 3)
    x = rng.normal(size=(2, 7, 6))
    np.testing.assert_allclose(tc.conv2d_forward(x, layer, method), naive_conv(x, layer.kernels, layer.bias),
                               rtol=1e-10, atol=1e-10)


def test_conv_batch_equals_single():
    rng = np.random.default_rng(0)
    layer = _conv(rng, 2, 4, 3)
    xb = rng.normal(size=(3, 2, 8, 8))
    batch = tc.conv2d_forward(xb, layer)
    for i in range(3):
        np.testing.assert_allclose(batch[i], tc.conv2d_forward(xb[i], layer), atol=1e-12)


def test_conv_linearity():
    rng = np.random.default_rng(1)
    layer = _conv(rng, 1, 2, 3)
    zero_bias = tc.ConvLayer(layer.kernels, np.zeros(2))
    x, y = rng.normal(size=(2, 1, 6, 6))
    a, b = 2.5, -0.7
    lhs = tc.conv2d_forward(a * x + b * y, layer)
    rhs = a * tc.conv2d_forward(x, zero_bias) + b * tc.conv2d_forward(y, zero_bias) + layer.bias[:, None, None]
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_conv_shape_errors():
    layer = tc.ConvLayer(np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        tc.conv2d_forward(np.zeros((1, 5, 5)), layer)
    with pytest.raises(ShapeError):
        tc.conv2d_forward(np.zeros((2, 2, 2)), layer)


@pytest.mark.parametrize("method", ["cols", "fft"])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv_backward_finite_differences(method, seed):
    rng = np.random.default_rng(seed)
    layer = _conv(rng, 2, 2, 3)
    x = rng.normal(size=(2, 6, 6))
    r = rng.normal(size=(2, 4, 4))
    f = lambda: float(np.sum(tc.conv2d_forward(x, layer, method) * r))
    dx, dk, db = tc.conv2d_backward(layer, x, r, method)
    assert tc.gradient_check(f, x, dx) < 1e-4
    assert tc.gradient_check(f, layer.kernels, dk) < 1e-4
    assert tc.gradient_check(f, layer.bias, db) < 1e-4


def test_conv_backward_trivia():
    rng = np.random.default_rng(0)
    layer = _conv(rng, 1, 2, 3)
    x = rng.normal(size=(1, 5, 5))
    dx, dk, db = tc.conv2d_backward(layer, x, np.zeros((2, 3, 3)))
    assert not dx.any() and not dk.any() and not db.any()
    ident = tc.ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))
    g = rng.normal(size=(1, 5, 5))
    dx, _, db = tc.conv2d_backward(ident, x, g)
    np.testing.assert_allclose(dx, g)
    assert db[0] == pytest.approx(g.sum())


# -- pooling -----------------------------------------------------------------

def test_pool_basic():
    out, _ = tc.maxpool_forward(np.array([[[1.0, 2], [3, 4]]]), tc.PoolLayer(2))
    assert out.tolist() == [[[4.0]]]


def test_pool_ties_first_index():
    out, mask = tc.maxpool_forward(np.full((2, 4, 6), 7.0), tc.PoolLayer(2))
    assert np.all(out == 7.0)
    assert not mask.index.any()


def test_pool_reference_shape():
    out, _ = tc.maxpool_forward(np.zeros((16, 44, 44), np.float32), tc.PoolLayer(2))
    assert out.shape == (16, 22, 22) and out.size == 7744


def test_pool_matches_loop_oracle():
    x = np.random.default_rng(0).normal(size=(3, 9, 7))
    out, _ = tc.maxpool_forward(x, tc.PoolLayer(3))
    ref = np.array([[[x[c, 3 * i:3 * i + 3, 3 * j:3 * j + 3].max() for j in range(2)] for i in range(3)]
                    for c in range(3)])
    np.testing.assert_array_equal(out, ref)


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_backward_finite_differences(seed):
    rng = np.random.default_rng(seed)
    # values spaced far apart compared to eps so no window has near-ties
    x = rng.permutation(16).reshape(1, 4, 4).astype(np.float64)
    r = rng.normal(size=(1, 2, 2))
    layer = tc.PoolLayer(2)
    f = lambda: float(np.sum(tc.maxpool_forward(x, layer)[0] * r))
    _, mask = tc.maxpool_forward(x, layer)
    assert tc.gradient_check(f, x, tc.maxpool_backward(mask, r)) < 1e-4


def test_pool_backward_conservation():
    x = np.random.default_rng(2).normal(size=(2, 6, 6))
    _, mask = tc.maxpool_forward(x, tc.PoolLayer(2))
    g = tc.maxpool_backward(mask, np.ones((2, 3, 3)))
    assert g.sum() == 18
    assert not tc.maxpool_backward(mask, np.zeros((2, 3, 3))).any()
    with pytest.raises(ShapeError):
        tc.maxpool_backward(mask, np.zeros((2, 2, 2)))


def test_pool_too_small():
    with pytest.raises(ShapeError):
        tc.maxpool_forward(np.zeros((1, 1, 3)), tc.PoolLayer(2))


# -- relu / flatten / dense --------------------------------------------------

def test_relu_values():
    assert tc.relu(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = np.abs(np.random.default_rng(0).normal(size=5))
    np.testing.assert_array_equal(tc.relu(x), x)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=20)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.normal(size=20)
    f = lambda: float(np.sum(tc.relu(x) * r))
    assert tc.gradient_check(f, x, tc.relu_backward(x, r)) < 1e-4


def test_flatten():
    x = np.arange(16 * 22 * 22, dtype=float).reshape(16, 22, 22)
    v = tc.flatten(x)
    assert v.shape == (7744,)
    np.testing.assert_array_equal(tc.unflatten(v, x.shape), x)
    assert tc.flatten(np.zeros((1, 1, 1))).shape == (1,)


def test_dense_values():
    eye = tc.DenseLayer(np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(tc.dense_forward(np.array([1.0, 2, 3]), eye), [1, 2, 3])
    layer = tc.DenseLayer(np.array([[1.0, 1.0]]), np.array([1.0]))
    assert tc.dense_forward(np.array([2.0, 3.0]), layer).tolist() == [6.0]
    with pytest.raises(ShapeError):
        tc.dense_forward(np.zeros(3), layer)


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_finite_differences(seed):
    rng = np.random.default_rng(seed)
    layer = tc.DenseLayer(rng.normal(size=(4, 6)), rng.normal(size=4))
    x = rng.normal(size=6)
    r = rng.normal(size=4)
    f = lambda: float(tc.dense_forward(x, layer) @ r)
    dx, dw, db = tc.dense_backward(layer, x, r)
    # linear map: central differences are exact up to roundoff
    assert tc.gradient_check(f, x, dx) < 1e-6
    assert tc.gradient_check(f, layer.weights, dw) < 1e-6
    assert tc.gradient_check(f, layer.bias, db) < 1e-6


def test_dense_batch_sums():
    rng = np.random.default_rng(0)
    layer = tc.DenseLayer(rng.normal(size=(2, 3)), rng.normal(size=2))
    x, g = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    _, dw, db = tc.dense_backward(layer, x, g)
    np.testing.assert_allclose(dw, sum(np.outer(g[i], x[i]) for i in range(5)))
    np.testing.assert_allclose(db, g.sum(axis=0))


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    loss, probs, _ = tc.softmax_cross_entropy(np.zeros(3), 0)
    np.testing.assert_allclose(probs, [1 / 3] * 3)
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_softmax_stable():
    loss, probs, grad = tc.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(probs)) and np.all(np.isfinite(grad))


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=4)
    t = int(rng.integers(4))
    _, probs, grad = tc.softmax_cross_entropy(z, t)
    assert abs(probs.sum() - 1) < 1e-12 and np.all(probs > 0)
    assert tc.gradient_check(lambda: tc.softmax_cross_entropy(z, t)[0], z, grad) < 1e-5


def test_softmax_batch_mean():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 3))
    t = np.array([0, 2, 1, 1])
    loss, _, grad = tc.softmax_cross_entropy(z, t)
    singles = [tc.softmax_cross_entropy(z[i], t[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grad, np.stack([s[2] for s in singles]) / 4)


def test_softmax_invalid_class():
    with pytest.raises(InvalidClass):
        tc.softmax_cross_entropy(np.zeros(3), 3)


# -- optimiser / checker -----------------------------------------------------

def test_sgd_steps():
    p, v = np.zeros(1), np.zeros(1)
    tc.sgd_momentum_step(p, np.ones(1), v, 0.1, 0.0)
    assert p[0] == pytest.approx(-0.1)
    p, v = np.array([3.0]), np.zeros(1)
    tc.sgd_momentum_step(p, np.zeros(1), v, 0.1, 0.9)
    assert p[0] == 3.0
    p, v = np.zeros(1), np.zeros(1)
    for _ in range(2):
        tc.sgd_momentum_step(p, np.ones(1), v, 0.1, 0.9)
    assert p[0] == pytest.approx(-0.29, abs=1e-15)
    with pytest.raises(ShapeError):
        tc.sgd_momentum_step(np.zeros(2), np.zeros(1), np.zeros(2), 0.1, 0.9)


def test_checker_catches_corrupt_bias_gradient():
    rng = np.random.default_rng(0)
    layer = tc.DenseLayer(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=4)
    r = rng.normal(size=3)
    f = lambda: float(np.sum(np.tanh(tc.dense_forward(x, layer)) * r))
    g = (1 - np.tanh(tc.dense_forward(x, layer)) ** 2) * r
    _, _, db = tc.dense_backward(layer, x, g)
    assert tc.gradient_check(f, layer.bias, db) < 1e-6
    assert tc.gradient_check(f, layer.bias, db * 1.1) > 1e-2


def test_checker_requires_float64():
    with pytest.raises(TypeError):
        tc.gradient_check(lambda: 0.0, np.zeros(2, np.float32), np.zeros(2, np.float32))
