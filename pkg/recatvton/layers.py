"""Array layers with hand-derived backward passes.

Activations are batched ``(N, C, H, W)`` float64 arrays. Each ``*_forward``
returns the output and a cache; the matching ``*_backward`` maps the output
gradient and the cache to input and parameter gradients.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

GROUP_NORM_EPS = 1e-5


# ----------------------------------------------------------------------
# Convolution

def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-1 'same' convolution with an odd square kernel."""
    k = weight.shape[-1]
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(padded, (k, k), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", cols, weight, optimize=True)
    out += bias[None, :, None, None]
    return out, (cols, x.shape, weight)


def conv2d_backward(dout: np.ndarray, cache):
    cols, x_shape, weight = cache
    k = weight.shape[-1]
    pad = k // 2
    n, c, h, w = x_shape
    dweight = np.einsum("nchwij,nohw->ocij", cols, dout, optimize=True)
    dbias = dout.sum(axis=(0, 2, 3))
    dcols = np.einsum("nohw,ocij->nchwij", dout, weight, optimize=True)
    dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dpadded[:, :, i:i + h, j:j + w] += dcols[..., i, j]
    dx = dpadded[:, :, pad:pad + h, pad:pad + w]
    return dx, dweight, dbias


def conv2d_flops(k: int, c_in: int, c_out: int, h: int, w: int) -> int:
    """Multiply-adds counted as two FLOPs, plus one add per output for the bias."""
    return 2 * k * k * c_in * c_out * h * w + c_out * h * w


# ----------------------------------------------------------------------
# Normalization and activation

def group_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int):
    n, c, h, w = x.shape
    grouped = x.reshape(n, groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + GROUP_NORM_EPS)
    x_hat = ((grouped - mean) * inv_std).reshape(n, c, h, w)
    out = x_hat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (x_hat, inv_std, gamma, groups)


def group_norm_backward(dout: np.ndarray, cache):
    x_hat, inv_std, gamma, groups = cache
    n, c, h, w = x_hat.shape
    dgamma = (dout * x_hat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dx_hat = (dout * gamma[None, :, None, None]).reshape(n, groups, -1)
    x_hat_g = x_hat.reshape(n, groups, -1)
    m = dx_hat.shape[2]
    dx = (inv_std / m) * (
        m * dx_hat
        - dx_hat.sum(axis=2, keepdims=True)
        - x_hat_g * (dx_hat * x_hat_g).sum(axis=2, keepdims=True)
    )
    return dx.reshape(n, c, h, w), dgamma, dbeta


def silu_forward(x: np.ndarray):
    sig = expit(x)
    return x * sig, (x, sig)


def silu_backward(dout: np.ndarray, cache):
    x, sig = cache
    return dout * sig * (1.0 + x * (1.0 - sig))


# ----------------------------------------------------------------------
# Resolution changes

def avg_pool2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), x.shape


def avg_pool2_backward(dout: np.ndarray, x_shape):
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3).reshape(x_shape) / 4.0


def upsample2_forward(x: np.ndarray):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dout: np.ndarray):
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ----------------------------------------------------------------------
# Dense

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    return x @ weight.T + bias, x


def linear_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)
