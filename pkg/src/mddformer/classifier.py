"""Temporal pooling, two-layer softmax head and the binary cross-entropy loss."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import apply_mask, dropout_mask, elu, elu_backward, init_uniform, linear, linear_backward, softmax

PROB_CLIP = 1e-7


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    probs: tuple[float, float]

    @property
    def p_depressed(self) -> float:
        return self.probs[1]

    @property
    def label(self) -> int:
        return int(self.probs[1] > self.probs[0])


def init_head(rng, d_in, d_hidden, dtype=np.float32):
    return {"fc1.W": init_uniform(rng, d_in, (d_in, d_hidden), dtype),
            "fc1.b": np.zeros(d_hidden, dtype=dtype),
            "fc2.W": init_uniform(rng, d_hidden, (d_hidden, 2), dtype),
            "fc2.b": np.zeros(2, dtype=dtype)}


def pool_sequence(F):
    """Mean over the time axis: ``(..., N, D) -> (..., D)``."""
    if F.ndim < 2 or F.shape[-2] == 0:
        raise ShapeError(f"pool_sequence: need at least one frame, got shape {F.shape}")
    return F.mean(axis=-2)


def pool_sequence_backward(dpooled, n):
    return np.repeat(dpooled[..., None, :] / n, n, axis=-2)


def classify(pooled, params, rng=None, dropout=0.0):
    """Dropout -> FC1 -> ELU -> Dropout -> FC2 -> softmax.

    Returns ``(logits, probs, cache)``.
    """
    if pooled.shape[-1] != params["fc1.W"].shape[0]:
        raise ShapeError(f"classify: input width {pooled.shape[-1]}, expected {params['fc1.W'].shape[0]}")
    m0 = dropout_mask(rng, pooled.shape, dropout, pooled.dtype)
    z1, c1 = linear(apply_mask(pooled, m0), params["fc1.W"], params["fc1.b"])
    a1, e1 = elu(z1)
    m1 = dropout_mask(rng, a1.shape, dropout, a1.dtype)
    logits, c2 = linear(apply_mask(a1, m1), params["fc2.W"], params["fc2.b"])
    return logits, softmax(logits), (m0, c1, e1, m1, c2)


def classify_backward(dlogits, cache):
    m0, c1, e1, m1, c2 = cache
    grads = {}
    da1, grads["fc2.W"], grads["fc2.b"] = linear_backward(dlogits, c2)
    dz1 = elu_backward(apply_mask(da1, m1), e1)
    dx, grads["fc1.W"], grads["fc1.b"] = linear_backward(dz1, c1)
    return apply_mask(dx, m0), grads


def bce_loss(probs, labels):
    """Mean binary cross-entropy on ``p = probs[:, 1]``, clipped to ``[1e-7, 1 - 1e-7]``.

    Returns:
        ``(loss, dlogits)`` where ``dlogits = (probs - onehot(labels)) / B`` is
        the gradient with respect to the pre-softmax logits.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != 2 or probs.shape[0] == 0:
        raise ShapeError(f"bce_loss: expected a non-empty (B, 2) batch, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"bce_loss: labels shape {labels.shape} does not match batch {probs.shape[0]}")
    p = np.clip(probs[:, 1].astype(np.float64), PROB_CLIP, 1 - PROB_CLIP)
    y = labels.astype(np.float64)
    loss = float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels.astype(np.int64)] = 1
    return loss, (probs - onehot) / len(labels)
