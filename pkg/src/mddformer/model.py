"""End-to-end MDDformer: encoders, fusion block and classifier head.

Parameters are a flat ``{name: array}`` dict whose names carry the owning
component as prefix (``audio.``, ``tcn.``, ``fusion.``, ``head.``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from safetensors import safe_open
from safetensors.numpy import load_file, save_file

from .classifier import bce_loss, classify, classify_backward, init_head, pool_sequence, pool_sequence_backward
from .encoders import (audio_project, audio_project_backward, init_audio_proj, init_tcn, tcn_encode,
                       tcn_encode_backward)
from .errors import ShapeError
from .fusion import FUSION_MODES, fusion_block, fusion_block_backward, init_fusion


@dataclass(frozen=True)
class ModelConfig:
    d_audio: int = 128
    d_visual: int = 171
    seq_len: int = 256
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    d_hidden: int | None = None
    tcn_blocks: int = 2
    tcn_kernel: int = 3
    fusion_mode: str = "mean"

    def __post_init__(self):
        for name in ("d_audio", "d_visual", "seq_len", "d_model", "n_heads", "d_ff", "tcn_blocks", "tcn_kernel"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ShapeError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.fusion_mode not in FUSION_MODES:
            raise ShapeError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")

    @property
    def head_width(self) -> int:
        return self.d_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def _strip(prefix, d):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in d.items() if k.startswith(prefix + ".")}


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters; ``rng`` is consumed in a fixed component order."""
    params = {}
    params.update(_prefixed("audio", init_audio_proj(rng, config.d_audio, config.d_model, dtype)))
    params.update(_prefixed("tcn", init_tcn(rng, config.d_visual, config.d_model, config.tcn_blocks,
                                             config.tcn_kernel, dtype)))
    params.update(_prefixed("fusion", init_fusion(rng, config.d_model, config.n_heads, config.d_ff,
                                                   config.seq_len, config.fusion_mode, dtype)))
    params.update(_prefixed("head", init_head(rng, 2 * config.d_model, config.head_width, dtype)))
    return params


class MDDformer:
    """Stateless forward/backward over a parameter dict."""

    def __init__(self, config: ModelConfig):
        self.config = config

    def forward(self, params, X_a, X_v, rng=None, dropout=0.0):
        """Run a batch ``X_a: (B, N, D_a)``, ``X_v: (B, N, D_v)``.

        Dropout is applied only when ``rng`` is given. Returns
        ``(logits, probs, cache)``; ``cache`` also exposes the fusion state.
        """
        cfg = self.config
        if X_a.ndim != 3 or X_v.ndim != 3:
            raise ShapeError(f"expected batched (B, N, D) inputs, got {X_a.shape} and {X_v.shape}")
        if X_a.shape[:2] != X_v.shape[:2]:
            raise ShapeError(f"audio {X_a.shape} and visual {X_v.shape} batches must share (B, N)")
        if cfg.fusion_mode == "concat" and X_a.shape[1] != cfg.seq_len:
            raise ShapeError(f"concat fusion was built for N={cfg.seq_len}, got N={X_a.shape[1]}")
        H_a, c_audio = audio_project(X_a, _strip("audio", params))
        H_v, c_tcn = tcn_encode(X_v, _strip("tcn", params))
        F_n, c_fusion, state = fusion_block(H_a, H_v, _strip("fusion", params), cfg.n_heads, rng, dropout)
        pooled = pool_sequence(F_n)
        logits, probs, c_head = classify(pooled, _strip("head", params), rng, dropout)
        cache = {"audio": c_audio, "tcn": c_tcn, "fusion": c_fusion, "head": c_head,
                 "n": F_n.shape[-2], "state": state}
        return logits, probs, cache

    def backward(self, dlogits, cache):
        grads = {}
        dpooled, g = classify_backward(dlogits, cache["head"])
        grads.update(_prefixed("head", g))
        dF_n = pool_sequence_backward(dpooled, cache["n"])
        dH_a, dH_v, g = fusion_block_backward(dF_n, cache["fusion"])
        grads.update(_prefixed("fusion", g))
        _, g = tcn_encode_backward(dH_v, cache["tcn"])
        grads.update(_prefixed("tcn", g))
        _, g = audio_project_backward(dH_a, cache["audio"])
        grads.update(_prefixed("audio", g))
        return grads

    def loss_and_grad(self, params, X_a, X_v, labels, rng=None, dropout=0.0):
        """Mean BCE over the batch and its gradient for every parameter."""
        _, probs, cache = self.forward(params, X_a, X_v, rng, dropout)
        loss, dlogits = bce_loss(probs, labels)
        return loss, self.backward(dlogits, cache), probs

    def predict_proba(self, params, X_a, X_v, batch_size=32):
        out = []
        for s in range(0, X_a.shape[0], batch_size):
            out.append(self.forward(params, X_a[s:s + batch_size], X_v[s:s + batch_size])[1])
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# Checkpoints: safetensors container (name -> shape + row-major f32 data)
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, config: ModelConfig, buffers=None, extra=None):
    tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
    for k, v in (buffers or {}).items():
        tensors[f"buffer.{k}"] = np.ascontiguousarray(v, dtype=np.float32)
    # a single metadata key: safetensors writes the metadata map in hash order
    doc = {"model_config": config.to_dict(), "extra": {k: str(v) for k, v in (extra or {}).items()}}
    save_file(tensors, str(path), metadata={"mddformer": json.dumps(doc, sort_keys=True)})


def load_checkpoint(path):
    """Return ``(params, config, buffers)``."""
    path = Path(path)
    with safe_open(str(path), framework="numpy") as fh:
        metadata = fh.metadata() or {}
    tensors = load_file(str(path))
    if "mddformer" not in metadata:
        raise ShapeError(f"{path}: not an mddformer checkpoint (metadata missing)")
    config = ModelConfig(**json.loads(metadata["mddformer"])["model_config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("buffer.")}
    buffers = {k[len("buffer."):]: v for k, v in tensors.items() if k.startswith("buffer.")}
    return params, config, buffers
