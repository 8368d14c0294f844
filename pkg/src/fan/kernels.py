"""Dense numerical kernels and their analytic vector-Jacobian products.

Every function here is a pure function of numpy arrays. The differentiable
wrappers in :mod:`fan.autodiff` pair each forward kernel with its backward.
Arrays use the token layout ``(..., d, n)``: channels on the second-last
axis, tokens on the last.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError

LN_EPS = 1e-6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes are batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise DimensionError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    return np.matmul(a, b)


def reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes that were broadcast to reach its shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul_backward(a, b, g):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return reduce_to_shape(ga, a.shape), reduce_to_shape(gb, b.shape)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (g - np.sum(g * y, axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def _param_view(p: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = p.shape[0]
    return p.reshape(shape)


def layer_norm(x, gamma, beta, axis: int = -2, eps: float = LN_EPS):
    """Normalize slices along ``axis`` to zero mean, unit variance, then affine.

    Returns ``(y, cache)``; the cache feeds :func:`layer_norm_backward`.
    """
    axis = axis % x.ndim
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * _param_view(gamma, x.ndim, axis) + _param_view(beta, x.ndim, axis)
    return y, (xhat, inv, axis)


def layer_norm_backward(gamma, cache, g):
    xhat, inv, axis = cache
    others = tuple(i for i in range(g.ndim) if i != axis)
    ggamma = (g * xhat).sum(axis=others)
    gbeta = g.sum(axis=others)
    gx_hat = g * _param_view(gamma, g.ndim, axis)
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=axis, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
    )
    return gx, ggamma, gbeta


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.sum(np.exp(s), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0):
    """Mean label-smoothed cross-entropy over a batch of ``(B, K)`` logits."""
    b, k = logits.shape
    target = np.full((b, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - smoothing
    logp = log_softmax(logits, axis=-1)
    loss = -(target * logp).sum() / b
    return loss, (np.exp(logp), target)


def cross_entropy_backward(cache, g):
    p, target = cache
    return g * (p - target) / p.shape[0]
