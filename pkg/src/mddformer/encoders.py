"""Modality encoders: linear projection for audio, causal TCN for visual.

Parameters live in flat ``{name: array}`` dicts. TCN dilations are not
stored; block ``i`` always uses dilation ``2**i``.
"""

import numpy as np

from .errors import ShapeError
from .nn import elu, elu_backward, init_uniform, linear, linear_backward


def _check_last(x, dim, what):
    if x.shape[-1] != dim:
        raise ShapeError(f"{what}: expected trailing dim {dim}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Audio projection
# ---------------------------------------------------------------------------

def init_audio_proj(rng, d_audio, d_model, dtype=np.float32):
    return {"W": init_uniform(rng, d_audio, (d_audio, d_model), dtype),
            "b": np.zeros(d_model, dtype=dtype)}


def audio_project(X, params):
    """``H = X @ W + b`` applied to every frame."""
    W, b = params["W"], params["b"]
    _check_last(X, W.shape[0], "audio_project")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"audio_project: bias shape {b.shape} does not match W {W.shape}")
    return linear(X, W, b)


def audio_project_backward(dH, cache):
    dX, dW, db = linear_backward(dH, cache)
    return dX, {"W": dW, "b": db}


# ---------------------------------------------------------------------------
# Causal dilated convolution
# ---------------------------------------------------------------------------

def causal_conv1d(X, kernel, dilation=1, bias=None):
    """Dilated causal convolution over the time axis (second to last).

    Args:
        X: ``(..., N, C_in)`` input.
        kernel: ``(k_w, C_in, C_out)``; tap ``k_w - 1`` sees the current
            frame and tap ``j`` sees frame ``t - (k_w - 1 - j) * dilation``.
        dilation: spacing between taps, at least 1.
        bias: optional ``(C_out,)``.

    Returns:
        ``(out, cache)`` with ``out`` of shape ``(..., N, C_out)``. Frames
        before the start are treated as zeros.
    """
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (k_w, C_in, C_out), got shape {kernel.shape}")
    _check_last(X, kernel.shape[1], "causal_conv1d")
    k_w = kernel.shape[0]
    n = X.shape[-2]
    pad = (k_w - 1) * dilation
    widths = [(0, 0)] * (X.ndim - 2) + [(pad, 0), (0, 0)]
    Xp = np.pad(X, widths)
    out = Xp[..., 0:n, :] @ kernel[0]
    for j in range(1, k_w):
        s = j * dilation
        out = out + Xp[..., s:s + n, :] @ kernel[j]
    if bias is not None:
        out = out + bias
    return out, (Xp, kernel, dilation, pad, bias is not None)


def causal_conv1d_backward(dout, cache):
    Xp, kernel, dilation, pad, has_bias = cache
    n = dout.shape[-2]
    dXp = np.zeros_like(Xp)
    dK = np.empty_like(kernel)
    d2 = dout.reshape(-1, dout.shape[-1])
    for j in range(kernel.shape[0]):
        s = j * dilation
        dXp[..., s:s + n, :] += dout @ kernel[j].T
        xs = Xp[..., s:s + n, :]
        dK[j] = xs.reshape(-1, xs.shape[-1]).T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dXp[..., pad:, :], dK, db


# ---------------------------------------------------------------------------
# TCN
# ---------------------------------------------------------------------------

def init_tcn(rng, d_visual, d_model, n_blocks=2, kernel_size=3, dtype=np.float32):
    """Residual TCN parameters.

    Block 0 gets a 1x1 input projection on its residual path when
    ``d_visual != d_model``; later blocks use identity residuals.
    """
    params = {}
    if d_visual != d_model:
        params["in_proj.W"] = init_uniform(rng, d_visual, (d_visual, d_model), dtype)
        params["in_proj.b"] = np.zeros(d_model, dtype=dtype)
    for i in range(n_blocks):
        c_in = d_visual if i == 0 else d_model
        params[f"block{i}.conv1.W"] = init_uniform(rng, kernel_size * c_in, (kernel_size, c_in, d_model), dtype)
        params[f"block{i}.conv1.b"] = np.zeros(d_model, dtype=dtype)
        params[f"block{i}.conv2.W"] = init_uniform(rng, kernel_size * d_model, (kernel_size, d_model, d_model), dtype)
        params[f"block{i}.conv2.b"] = np.zeros(d_model, dtype=dtype)
    return params


def tcn_num_blocks(params):
    n = 0
    while f"block{n}.conv1.W" in params:
        n += 1
    return n


def tcn_encode(X, params):
    """Stack of residual blocks ``out = ELU(conv2(ELU(conv1(x)))) + res(x)``.

    Block ``i`` uses dilation ``2**i``. Output keeps the time length of
    ``X`` and every output frame depends only on current and past frames.
    """
    n_blocks = tcn_num_blocks(params)
    if n_blocks == 0:
        raise ShapeError("TCN has no blocks")
    _check_last(X, params["block0.conv1.W"].shape[1], "tcn_encode")
    caches = []
    x = X
    for i in range(n_blocks):
        d = 2 ** i
        if i == 0 and "in_proj.W" in params:
            res, res_cache = linear(x, params["in_proj.W"], params["in_proj.b"])
        else:
            res, res_cache = x, None
        z1, c1 = causal_conv1d(x, params[f"block{i}.conv1.W"], d, params[f"block{i}.conv1.b"])
        a1, e1 = elu(z1)
        z2, c2 = causal_conv1d(a1, params[f"block{i}.conv2.W"], d, params[f"block{i}.conv2.b"])
        a2, e2 = elu(z2)
        if res.shape != a2.shape:
            raise ShapeError(f"tcn block {i}: residual shape {res.shape} vs conv output {a2.shape}")
        x = a2 + res
        caches.append((res_cache, c1, e1, c2, e2))
    return x, caches


def tcn_encode_backward(dH, caches):
    grads = {}
    dx = dH
    for i in reversed(range(len(caches))):
        res_cache, c1, e1, c2, e2 = caches[i]
        dz2 = elu_backward(dx, e2)
        da1, grads[f"block{i}.conv2.W"], grads[f"block{i}.conv2.b"] = causal_conv1d_backward(dz2, c2)
        dz1 = elu_backward(da1, e1)
        dxin, grads[f"block{i}.conv1.W"], grads[f"block{i}.conv1.b"] = causal_conv1d_backward(dz1, c1)
        if res_cache is not None:
            dres, grads["in_proj.W"], grads["in_proj.b"] = linear_backward(dx, res_cache)
            dxin = dxin + dres
        else:
            dxin = dxin + dx
        dx = dxin
    return dx, grads
