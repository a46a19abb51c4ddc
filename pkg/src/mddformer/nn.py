"""Differentiable primitives shared by the model modules.

Every forward function returns ``(out, cache)`` and has a matching
``*_backward(dout, cache)``. Arrays may carry arbitrary leading batch axes;
the feature axis is always last.
"""

import numpy as np

LAYER_NORM_EPS = 1e-5


def init_uniform(rng, fan_in, shape, dtype=np.float32):
    """Zero-mean uniform init with variance ``1 / fan_in``."""
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _sum_leading(x, ndim):
    """Sum ``x`` over every axis except the trailing ``ndim``."""
    return x.reshape(-1, *x.shape[x.ndim - ndim:]).sum(axis=0)


def linear(x, W, b=None):
    out = x @ W
    if b is not None:
        out = out + b
    return out, (x, W, b is not None)


def linear_backward(dout, cache):
    x, W, has_bias = cache
    dx = dout @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = _sum_leading(dout, 1) if has_bias else None
    return dx, dW, db


def elu(x):
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    return out, x


def elu_backward(dout, x):
    return dout * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(dout.dtype)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def dropout_mask(rng, shape, rate, dtype):
    """Inverted-dropout mask, or ``None`` when dropout is inactive."""
    if rng is None or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def apply_mask(x, mask):
    return x if mask is None else x * mask


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    dgamma = _sum_leading(dout * xhat, 1)
    dbeta = _sum_leading(dout, 1)
    dxhat = dout * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta
