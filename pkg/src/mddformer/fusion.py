"""Cross-fusion transformer block.

Both modalities are projected to queries, keys and values. The two
self-similarity maps ``Q_a K_a^T`` and ``Q_v K_v^T`` are merged into one
fused logit map per head, and that single softmax weight matrix attends over
the audio values *and* the visual values. Each branch is then projected,
added to its input, and the two streams are concatenated and passed through a
position-wise FFN with add & layer-norm.

Two merge rules are available:

``"mean"`` (default)
    ``L = (Q_a K_a^T + Q_v K_v^T) / 2``.
``"concat"``
    ``L = [Q_a K_a^T, Q_v K_v^T] @ R`` with a learned ``(2N, N)`` reduction
    ``R``, initialised to ``[I/2; I/2]`` so it starts equal to ``"mean"``.

Stacked projection matrices are ``(d_model, d_model)``; head ``j`` uses
columns ``j*d_head:(j+1)*d_head``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import (apply_mask, dropout_mask, elu, elu_backward, init_uniform, layer_norm,
                 layer_norm_backward, linear, linear_backward, softmax, softmax_backward)

FUSION_MODES = ("mean", "concat")
QKV_NAMES = ("W_Qa", "W_Ka", "W_Va", "W_Qv", "W_Kv", "W_Vv")


def init_fusion(rng, d_model, n_heads, d_ff, seq_len=None, mode="mean", dtype=np.float32):
    if d_model % n_heads:
        raise ShapeError(f"n_heads={n_heads} does not divide d_model={d_model}")
    if mode not in FUSION_MODES:
        raise ShapeError(f"unknown fusion mode {mode!r}")
    d_fused = 2 * d_model
    params = {name: init_uniform(rng, d_model, (d_model, d_model), dtype) for name in QKV_NAMES}
    params["W_a"] = init_uniform(rng, d_model, (d_model, d_model), dtype)
    params["W_v"] = init_uniform(rng, d_model, (d_model, d_model), dtype)
    params["ffn.W1"] = init_uniform(rng, d_fused, (d_fused, d_ff), dtype)
    params["ffn.b1"] = np.zeros(d_ff, dtype=dtype)
    params["ffn.W2"] = init_uniform(rng, d_ff, (d_ff, d_fused), dtype)
    params["ffn.b2"] = np.zeros(d_fused, dtype=dtype)
    params["norm.gamma"] = np.ones(d_fused, dtype=dtype)
    params["norm.beta"] = np.zeros(d_fused, dtype=dtype)
    if mode == "concat":
        if seq_len is None:
            raise ShapeError("concat fusion needs the sequence length")
        eye = np.eye(seq_len, dtype=dtype) / 2
        params["reduce.W"] = np.concatenate([eye, eye], axis=0)
    return params


def head_params(params, head, n_heads):
    """Per-head ``(d_model, d_head)`` views of the six QKV matrices."""
    d_model = params["W_Qa"].shape[0]
    dh = d_model // n_heads
    sl = slice(head * dh, (head + 1) * dh)
    return {name: params[name][:, sl] for name in QKV_NAMES}


def split_heads(x, n_heads):
    """``(..., N, d) -> (..., h, N, d/h)``."""
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, n_heads, d // n_heads), -2, -3)


def merge_heads(x):
    """``(..., h, N, d_head) -> (..., N, h*d_head)``."""
    x = np.swapaxes(x, -2, -3)
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def _t(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# Single operations
# ---------------------------------------------------------------------------

def project_qkv(H, head, modality):
    """Queries, keys and values of one modality for one head.

    ``head`` maps ``W_Q{a,v}``, ``W_K{a,v}``, ``W_V{a,v}`` to
    ``(d_model, d_head)`` matrices (see :func:`head_params`).
    """
    suffix = {"audio": "a", "visual": "v"}.get(modality)
    if suffix is None:
        raise ShapeError(f"modality must be 'audio' or 'visual', got {modality!r}")
    outs, caches = [], []
    for kind in "QKV":
        W = head[f"W_{kind}{suffix}"]
        if H.shape[-1] != W.shape[0]:
            raise ShapeError(f"project_qkv: H has width {H.shape[-1]}, W_{kind}{suffix} expects {W.shape[0]}")
        out, cache = linear(H, W)
        outs.append(out)
        caches.append(cache)
    return tuple(outs), caches


def project_qkv_backward(dQ, dK, dV, caches):
    dH = 0
    grads = []
    for d, cache in zip((dQ, dK, dV), caches):
        dx, dW, _ = linear_backward(d, cache)
        dH = dH + dx
        grads.append(dW)
    return dH, grads


def fused_logits(Q_a, K_a, Q_v, K_v, reduce_W=None):
    """Cross-modal logit map shared by both attention branches."""
    for name, x in (("K_a", K_a), ("Q_v", Q_v), ("K_v", K_v)):
        if x.shape != Q_a.shape:
            raise ShapeError(f"fused_logits: {name} shape {x.shape} differs from Q_a {Q_a.shape}")
    F_a = Q_a @ _t(K_a)
    F_v = Q_v @ _t(K_v)
    if reduce_W is None:
        L = (F_a + F_v) / 2
        stacked = None
    else:
        n = Q_a.shape[-2]
        if reduce_W.shape != (2 * n, n):
            raise ShapeError(f"reduction matrix must be {(2 * n, n)}, got {reduce_W.shape}")
        stacked = np.concatenate([F_a, F_v], axis=-1)
        L = stacked @ reduce_W
    return L, (Q_a, K_a, Q_v, K_v, reduce_W, stacked)


def fused_logits_backward(dL, cache):
    Q_a, K_a, Q_v, K_v, reduce_W, stacked = cache
    dR = None
    if reduce_W is None:
        dF_a = dF_v = dL / 2
    else:
        n = Q_a.shape[-2]
        ds = dL @ reduce_W.T
        dF_a, dF_v = ds[..., :n], ds[..., n:]
        dR = stacked.reshape(-1, 2 * n).T @ dL.reshape(-1, n)
    return (dF_a @ K_a, _t(dF_a) @ Q_a, dF_v @ K_v, _t(dF_v) @ Q_v, dR)


def attention_weights(L, d_k):
    if d_k < 1:
        raise ShapeError(f"d_k must be >= 1, got {d_k}")
    return softmax(L / np.sqrt(d_k))


def cross_attention(L, V, d_k):
    """``softmax(L / sqrt(d_k)) @ V`` with the softmax taken row-wise."""
    if L.shape[-1] != V.shape[-2] or L.shape[-2] != L.shape[-1]:
        raise ShapeError(f"cross_attention: logits {L.shape} incompatible with values {V.shape}")
    P = attention_weights(L, d_k)
    return P @ V, (P, V, d_k)


def cross_attention_backward(dout, cache):
    P, V, d_k = cache
    dP = dout @ _t(V)
    dV = _t(P) @ dout
    dL = softmax_backward(dP, P) / np.sqrt(d_k)
    return dL, dV


# ---------------------------------------------------------------------------
# Full block
# ---------------------------------------------------------------------------

@dataclass
class FusionState:
    """Intermediate tensors of one block forward pass (per-head tensors are ``(..., h, N, d_head)``)."""

    Q_a: np.ndarray
    K_a: np.ndarray
    V_a: np.ndarray
    Q_v: np.ndarray
    K_v: np.ndarray
    V_v: np.ndarray
    logits: np.ndarray
    weights_audio: np.ndarray
    weights_visual: np.ndarray
    A_a: np.ndarray
    A_v: np.ndarray
    F_f: np.ndarray
    F_n: np.ndarray | None = None


def multihead_fuse(H_a, H_v, params, n_heads, rng=None, dropout=0.0):
    """Attention half of the block; returns ``F_f`` of width ``2 * d_model``.

    Dropout (active only when ``rng`` is given) follows the ``W_a``/``W_v``
    output projections.
    """
    d_model = params["W_Qa"].shape[0]
    if n_heads < 1 or d_model % n_heads:
        raise ShapeError(f"n_heads={n_heads} does not divide d_model={d_model}")
    if H_a.shape != H_v.shape or H_a.shape[-1] != d_model:
        raise ShapeError(f"multihead_fuse: H_a {H_a.shape} and H_v {H_v.shape} must both end in d_model={d_model}")
    d_head = d_model // n_heads

    proj, proj_caches = {}, {}
    for name in QKV_NAMES:
        src = H_a if name.endswith("a") else H_v
        full, proj_caches[name] = linear(src, params[name])
        proj[name] = split_heads(full, n_heads)

    L, logit_cache = fused_logits(proj["W_Qa"], proj["W_Ka"], proj["W_Qv"], proj["W_Kv"],
                                  params.get("reduce.W"))
    P = attention_weights(L, d_head)
    A_a = merge_heads(P @ proj["W_Va"])
    A_v = merge_heads(P @ proj["W_Vv"])

    O_a, oa_cache = linear(A_a, params["W_a"])
    O_v, ov_cache = linear(A_v, params["W_v"])
    mask_a = dropout_mask(rng, O_a.shape, dropout, O_a.dtype)
    mask_v = dropout_mask(rng, O_v.shape, dropout, O_v.dtype)
    F_f = np.concatenate([apply_mask(O_a, mask_a) + H_a, apply_mask(O_v, mask_v) + H_v], axis=-1)

    state = FusionState(proj["W_Qa"], proj["W_Ka"], proj["W_Va"], proj["W_Qv"], proj["W_Kv"],
                        proj["W_Vv"], L, P, P, A_a, A_v, F_f)
    cache = (n_heads, d_head, proj, proj_caches, logit_cache, P, oa_cache, ov_cache, mask_a, mask_v)
    return F_f, cache, state


def multihead_fuse_backward(dF_f, cache):
    n_heads, d_head, proj, proj_caches, logit_cache, P, oa_cache, ov_cache, mask_a, mask_v = cache
    d_model = dF_f.shape[-1] // 2
    grads = {}
    dres_a, dres_v = dF_f[..., :d_model], dF_f[..., d_model:]

    dA_a, grads["W_a"], _ = linear_backward(apply_mask(dres_a, mask_a), oa_cache)
    dA_v, grads["W_v"], _ = linear_backward(apply_mask(dres_v, mask_v), ov_cache)
    dA_a = split_heads(dA_a, n_heads)
    dA_v = split_heads(dA_v, n_heads)

    dP = dA_a @ _t(proj["W_Va"]) + dA_v @ _t(proj["W_Vv"])
    dhead = {"W_Va": _t(P) @ dA_a, "W_Vv": _t(P) @ dA_v}
    dL = softmax_backward(dP, P) / np.sqrt(d_head)
    dhead["W_Qa"], dhead["W_Ka"], dhead["W_Qv"], dhead["W_Kv"], dR = fused_logits_backward(dL, logit_cache)
    if dR is not None:
        grads["reduce.W"] = dR

    dH_a, dH_v = dres_a.copy(), dres_v.copy()
    for name in QKV_NAMES:
        dsrc, grads[name], _ = linear_backward(merge_heads(dhead[name]), proj_caches[name])
        if name.endswith("a"):
            dH_a += dsrc
        else:
            dH_v += dsrc
    return dH_a, dH_v, grads


def ffn_addnorm(F_f, params, rng=None, dropout=0.0):
    """``Norm(FFN(F_f) + F_f)`` with an ELU FFN and learned scale/shift."""
    if F_f.shape[-1] != params["ffn.W1"].shape[0]:
        raise ShapeError(f"ffn_addnorm: input width {F_f.shape[-1]}, expected {params['ffn.W1'].shape[0]}")
    z1, c1 = linear(F_f, params["ffn.W1"], params["ffn.b1"])
    a1, e1 = elu(z1)
    mask = dropout_mask(rng, a1.shape, dropout, a1.dtype)
    z2, c2 = linear(apply_mask(a1, mask), params["ffn.W2"], params["ffn.b2"])
    F_n, ln_cache = layer_norm(z2 + F_f, params["norm.gamma"], params["norm.beta"])
    return F_n, (c1, e1, mask, c2, ln_cache)


def ffn_addnorm_backward(dF_n, cache):
    c1, e1, mask, c2, ln_cache = cache
    grads = {}
    dR, grads["norm.gamma"], grads["norm.beta"] = layer_norm_backward(dF_n, ln_cache)
    da1, grads["ffn.W2"], grads["ffn.b2"] = linear_backward(dR, c2)
    dz1 = elu_backward(apply_mask(da1, mask), e1)
    dF_f, grads["ffn.W1"], grads["ffn.b1"] = linear_backward(dz1, c1)
    return dF_f + dR, grads


def fusion_block(H_a, H_v, params, n_heads, rng=None, dropout=0.0):
    F_f, c_attn, state = multihead_fuse(H_a, H_v, params, n_heads, rng, dropout)
    F_n, c_ffn = ffn_addnorm(F_f, params, rng, dropout)
    state.F_n = F_n
    return F_n, (c_attn, c_ffn), state


def fusion_block_backward(dF_n, cache):
    c_attn, c_ffn = cache
    dF_f, grads = ffn_addnorm_backward(dF_n, c_ffn)
    dH_a, dH_v, g_attn = multihead_fuse_backward(dF_f, c_attn)
    grads.update(g_attn)
    return dH_a, dH_v, grads
