"""Training loop, optimizer, learning-rate schedule and gradient checking.

All randomness of a run comes from one ``np.random.Generator`` seeded with
``TrainConfig.seed`` and consumed in this order: parameter init, then per
epoch one permutation of the training split followed by the dropout masks
of each mini-batch in order.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .classifier import Prediction
from .errors import ConfigError, TrainingError
from .ingest import Dataset, FoldAssignment
from .model import MDDformer, ModelConfig, init_params


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-5
    lr_min: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps_adam: float = 1e-8
    batch_size: int = 4
    epochs: int = 300
    dropout: float = 0.2
    seed: int = 0
    n_audio: int = 256
    n_visual: int = 256
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    tcn_blocks: int = 2
    tcn_kernel: int = 3
    fusion_mode: str = "mean"
    standardize: bool = True
    zero_audio: bool = False
    zero_visual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**doc)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        """Per-epoch table; wall time is left out so reruns are byte-identical."""
        lines = ["epoch,train_loss,train_accuracy,lr"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.train_accuracy!r},{r.lr!r}")
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    history: TrainHistory
    predictions: list[Prediction]
    labels_true: np.ndarray
    buffers: dict[str, np.ndarray]

    @property
    def held_out_accuracy(self) -> float:
        if not self.predictions:
            return float("nan")
        pred = np.array([p.label for p in self.predictions])
        return float(np.mean(pred == self.labels_true))


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------

def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """Epoch-granular cosine annealing from ``lr_max`` (epoch 0) to ``lr_min`` (epoch ``epochs``)."""
    if config.epochs == 0:
        return config.lr_max
    if not 0 <= epoch <= config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs}]")
    cos = math.cos(math.pi * epoch / config.epochs)
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + cos)


@dataclass
class AdamState:
    t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params):
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``; inputs are not modified."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        bad = sorted((set(params) ^ set(grads)) | (set(params) ^ set(state.m)))
        raise TrainingError(f"adam_step: parameter/gradient/state names disagree: {bad}")
    b1, b2 = betas
    t = state.t + 1
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise TrainingError(f"adam_step: shape mismatch for {k}: param {p.shape}, grad {g.shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * (g * g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        new_p[k] = p - step
        new_m[k] = m.astype(p.dtype)
        new_v[k] = v.astype(p.dtype)
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def model_config_for(config: TrainConfig, d_audio: int, d_visual: int) -> ModelConfig:
    if config.n_audio != config.n_visual:
        raise ConfigError(
            f"fusion needs aligned sequences: n_audio={config.n_audio} != n_visual={config.n_visual}")
    return ModelConfig(d_audio=d_audio, d_visual=d_visual, seq_len=config.n_audio,
                       d_model=config.d_model, n_heads=config.n_heads, d_ff=config.d_ff,
                       tcn_blocks=config.tcn_blocks, tcn_kernel=config.tcn_kernel,
                       fusion_mode=config.fusion_mode)


def fit_standardizer(X: np.ndarray):
    """Per-feature mean/std over all samples and frames of a ``(B, N, D)`` array."""
    flat = X.reshape(-1, X.shape[-1]).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std[std < 1e-8] = 1.0
    return mean, std


def prepare_inputs(X_a, X_v, buffers, config: TrainConfig, dtype=np.float32):
    """Standardize with stored statistics and apply modality ablations."""
    if "audio_mean" in buffers:
        X_a = (X_a - buffers["audio_mean"]) / buffers["audio_std"]
        X_v = (X_v - buffers["visual_mean"]) / buffers["visual_std"]
    X_a = np.asarray(X_a, dtype=dtype)
    X_v = np.asarray(X_v, dtype=dtype)
    if config.zero_audio:
        X_a = np.zeros_like(X_a)
    if config.zero_visual:
        X_v = np.zeros_like(X_v)
    return X_a, X_v


def train_model(dataset: Dataset, folds: FoldAssignment, fold_id: int, config: TrainConfig,
                progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train on every fold except ``fold_id`` and predict the held-out fold."""
    if not 0 <= fold_id < folds.k:
        raise ConfigError(f"fold {fold_id} outside [0, {folds.k})")
    train_idx = folds.train_indices(dataset, fold_id)
    test_idx = folds.test_indices(dataset, fold_id)
    if train_idx.size == 0:
        raise TrainingError(f"fold {fold_id}: training split is empty")

    Xa_all, Xv_all = dataset.audio_array, dataset.visual_array
    mcfg = model_config_for(config, Xa_all.shape[-1], Xv_all.shape[-1])
    if Xa_all.shape[1] != config.n_audio or Xv_all.shape[1] != config.n_visual:
        raise ConfigError(f"dataset sequence lengths ({Xa_all.shape[1]}, {Xv_all.shape[1]}) "
                          f"differ from config ({config.n_audio}, {config.n_visual})")

    buffers = {}
    if config.standardize:
        buffers["audio_mean"], buffers["audio_std"] = fit_standardizer(Xa_all[train_idx])
        buffers["visual_mean"], buffers["visual_std"] = fit_standardizer(Xv_all[train_idx])
    Xa, Xv = prepare_inputs(Xa_all[train_idx], Xv_all[train_idx], buffers, config)
    y = dataset.labels[train_idx]

    rng = np.random.default_rng(config.seed)
    model = MDDformer(mcfg)
    params = init_params(mcfg, rng, np.float32)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    n = len(train_idx)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, config)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s:s + config.batch_size]
            loss, grads, probs = model.loss_and_grad(params, Xa[idx], Xv[idx], y[idx], rng, config.dropout)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, state = adam_step(params, grads, state, lr, config.betas, config.eps_adam)
            loss_sum += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
        rec = EpochRecord(epoch, loss_sum / n, correct / n, lr, time.perf_counter() - t0)
        history.records.append(rec)
        if progress is not None:
            progress(rec)

    predictions = []
    if test_idx.size:
        Xa_te, Xv_te = prepare_inputs(Xa_all[test_idx], Xv_all[test_idx], buffers, config)
        probs = model.predict_proba(params, Xa_te, Xv_te)
        ids = [dataset.sample_ids[i] for i in test_idx]
        predictions = [Prediction(sid, (float(p[0]), float(p[1]))) for sid, p in zip(ids, probs)]
    return TrainResult(params, mcfg, history, predictions, dataset.labels[test_idx].copy(), buffers)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

REL_ERROR_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    per_param: dict[str, float]
    worst: tuple[str, tuple[int, ...]]

    def passed(self, tol=1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor=REL_ERROR_FLOOR):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off on exact zeros from dominating."""
    a = np.abs(analytic)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, np.abs(numeric)), floor)


def gradient_check(loss_and_grad, params, step=1e-5, full_limit=5000, n_sample=500, rng=None):
    """Compare analytic gradients against central differences.

    Args:
        loss_and_grad: ``params -> (loss, grads)``; must be deterministic.
        params: parameter dict (perturbed in place and restored).
        step: finite-difference step.
        full_limit: models with at most this many coordinates are checked
            exhaustively.
        n_sample: otherwise at least this many coordinates are drawn,
            spread over every parameter proportionally to its size (at least
            four per parameter).
    """
    loss, grads = loss_and_grad(params)
    if not math.isfinite(loss):
        raise TrainingError("gradient_check: non-finite loss at the base point")
    total = sum(p.size for p in params.values())
    rng = rng if rng is not None else np.random.default_rng(0)
    per_param, worst, worst_err, n_checked = {}, ("", ()), -1.0, 0
    for name, p in params.items():
        if total <= full_limit:
            coords = list(np.ndindex(p.shape))
        else:
            m = min(p.size, max(4, math.ceil(n_sample * p.size / total)))
            flat = rng.choice(p.size, size=m, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in np.sort(flat)]
        errs = []
        for idx in coords:
            orig = p[idx]
            p[idx] = orig + step
            lp = loss_and_grad(params)[0]
            p[idx] = orig - step
            lm = loss_and_grad(params)[0]
            p[idx] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise TrainingError(f"gradient_check: non-finite loss perturbing {name}{idx}")
            err = float(relative_error(grads[name][idx], (lp - lm) / (2 * step)))
            errs.append(err)
            if err > worst_err:
                worst_err, worst = err, (name, tuple(int(i) for i in idx))
        per_param[name] = max(errs)
        n_checked += len(coords)
    return GradCheckResult(worst_err, n_checked, per_param, worst)


def check_model_gradients(model: MDDformer, params, X_a, X_v, labels, step=1e-5, **kwargs):
    """Gradient check of the full model in float64 with dropout off."""
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    X_a = np.asarray(X_a, dtype=np.float64)
    X_v = np.asarray(X_v, dtype=np.float64)

    def f(p):
        loss, grads, _ = model.loss_and_grad(p, X_a, X_v, labels)
        return loss, grads

    return gradient_check(f, p64, step, **kwargs)


TINY_MODEL = ModelConfig(d_audio=6, d_visual=7, seq_len=5, d_model=8, n_heads=2, d_ff=16)


def tiny_gradient_check(seed: int, batch_size=4, zero_input=False, config: ModelConfig = TINY_MODEL):
    """Gradient check on a small random model and batch.

    With ``zero_input`` the biases are redrawn from N(0, 0.1^2). Freshly
    initialised biases are zero, so a zero batch would make every activation
    zero and put the loss at an exact stationary point. There LayerNorm sees
    zero variance and central differences pick up an O(step^2) truncation term
    (about 3e-6) against analytic gradients that are exactly zero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, np.float64)
    shape = (batch_size, config.seq_len)
    X_a = rng.standard_normal(shape + (config.d_audio,))
    X_v = rng.standard_normal(shape + (config.d_visual,))
    if zero_input:
        X_a[:] = 0
        X_v[:] = 0
        for k, v in params.items():
            if k.endswith(".b") or k.endswith(".b1") or k.endswith(".b2") or k.endswith(".beta"):
                params[k] = 0.1 * rng.standard_normal(v.shape)
    labels = np.arange(batch_size) % 2
    return check_model_gradients(MDDformer(config), params, X_a, X_v, labels)
