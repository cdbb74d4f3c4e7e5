"""Finite-difference checks of the array layers' backward passes."""

import numpy as np
import pytest
from recatvton import layers


def numeric_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        plus = f()
        x[idx] = old - h
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_conv2d_backward(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    weight = rng.normal(size=(2, 3, 3, 3))
    bias = rng.normal(size=2)
    r = rng.normal(size=(2, 2, 4, 5))

    def loss():
        return (layers.conv2d_forward(x, weight, bias)[0] * r).sum()

    _, cache = layers.conv2d_forward(x, weight, bias)
    dx, dweight, dbias = layers.conv2d_backward(r, cache)
    assert np.allclose(dx, numeric_grad(loss, x), atol=1e-6)
    assert np.allclose(dweight, numeric_grad(loss, weight), atol=1e-6)
    assert np.allclose(dbias, numeric_grad(loss, bias), atol=1e-6)


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    weight = np.zeros((1, 1, 3, 3))
    weight[0, 0, 1, 1] = 1.0
    out, _ = layers.conv2d_forward(x, weight, np.zeros(1))
    assert np.allclose(out, x)


def test_conv2d_flops():
    assert layers.conv2d_flops(3, 9, 16, 64, 24) == 3_981_312 + 24_576


def test_group_norm_backward(rng):
    x = rng.normal(size=(2, 4, 3, 2))
    gamma = rng.normal(size=4)
    beta = rng.normal(size=4)
    r = rng.normal(size=x.shape)

    def loss():
        return (layers.group_norm_forward(x, gamma, beta, 2)[0] * r).sum()

    _, cache = layers.group_norm_forward(x, gamma, beta, 2)
    dx, dgamma, dbeta = layers.group_norm_backward(r, cache)
    assert np.allclose(dx, numeric_grad(loss, x), atol=1e-5)
    assert np.allclose(dgamma, numeric_grad(loss, gamma), atol=1e-6)
    assert np.allclose(dbeta, numeric_grad(loss, beta), atol=1e-6)


def test_silu_backward(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    r = rng.normal(size=x.shape)
    _, cache = layers.silu_forward(x)
    dx = layers.silu_backward(r, cache)
    assert np.allclose(dx, numeric_grad(lambda: (layers.silu_forward(x)[0] * r).sum(), x))


def test_pool_and_upsample_backward(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    pooled, shape = layers.avg_pool2_forward(x)
    r = rng.normal(size=pooled.shape)
    dx = layers.avg_pool2_backward(r, shape)
    assert np.allclose(dx, numeric_grad(lambda: (layers.avg_pool2_forward(x)[0] * r).sum(), x))

    up = layers.upsample2_forward(pooled)
    assert up.shape == x.shape
    r_up = rng.normal(size=up.shape)
    dpooled = layers.upsample2_backward(r_up)
    expected = numeric_grad(lambda: (layers.upsample2_forward(pooled) * r_up).sum(), pooled)
    assert np.allclose(dpooled, expected)


def test_linear_backward(rng):
    x = rng.normal(size=(3, 4))
    weight = rng.normal(size=(2, 4))
    bias = rng.normal(size=2)
    r = rng.normal(size=(3, 2))

    def loss():
        return (layers.linear_forward(x, weight, bias)[0] * r).sum()

    dx, dweight, dbias = layers.linear_backward(r, x, weight)
    assert np.allclose(dx, numeric_grad(loss, x))
    assert np.allclose(dweight, numeric_grad(loss, weight))
    assert np.allclose(dbias, numeric_grad(loss, bias))
