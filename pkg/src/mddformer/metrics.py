"""Confusion counts, binary and support-weighted metrics, CV aggregation and reports.

The positive class is 1 (depressed). Confusion matrices are indexed
``[true][predicted]`` with class order ``(0, 1)``. Any metric whose
denominator is zero is reported as 0 and named in ``degenerate``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import MetricsError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class MetricCounts:
    TP: int
    TN: int
    FP: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def matrix(self) -> list[list[int]]:
        """Rows are true labels, columns predictions, class order (0, 1)."""
        return [[self.TN, self.FP], [self.FN, self.TP]]

    def matrix_percent(self) -> list[list[float]]:
        """Row-normalised percentages: entry (m, n) is the share of class m predicted as n."""
        out = []
        for row in self.matrix():
            s = sum(row)
            out.append([100.0 * v / s if s else 0.0 for v in row])
        return out


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    variant: str
    specificity: float | None = None
    degenerate: tuple[str, ...] = ()

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d


def _check_labels(preds, truth):
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise MetricsError(f"predictions {preds.shape} and truth {truth.shape} must be equal-length vectors")
    if preds.size == 0:
        raise MetricsError("no samples to score")
    for name, arr in (("predictions", preds), ("truth", truth)):
        if not np.isin(arr, (0, 1)).all():
            raise MetricsError(f"{name} contain labels outside {{0, 1}}")
    return preds.astype(np.int64), truth.astype(np.int64)


def confusion(preds, truth) -> MetricCounts:
    p, t = _check_labels(preds, truth)
    return MetricCounts(TP=int(np.sum((p == 1) & (t == 1))), TN=int(np.sum((p == 0) & (t == 0))),
                        FP=int(np.sum((p == 1) & (t == 0))), FN=int(np.sum((p == 0) & (t == 1))))


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def binary_metrics(c: MetricCounts) -> MetricReport:
    """Accuracy, precision, recall and F1 for the positive class."""
    if c.total <= 0:
        raise MetricsError("empty confusion counts")
    deg: list[str] = []
    acc = (c.TP + c.TN) / c.total
    prec = _ratio(c.TP, c.TP + c.FP, "precision", deg)
    rec = _ratio(c.TP, c.TP + c.FN, "recall", deg)
    f1 = _ratio(2 * prec * rec, prec + rec, "f1", deg)
    spec = _ratio(c.TN, c.TN + c.FP, "specificity", deg)
    return MetricReport(acc, prec, rec, f1, "binary_positive_class", spec, tuple(deg))


def weighted_metrics(preds, truth) -> MetricReport:
    """Per-class metrics (each class in turn as positive) averaged with support weights.

    Weighted recall equals accuracy by construction; accuracy is reported
    as the plain accuracy.
    """
    p, t = _check_labels(preds, truth)
    n = t.size
    agg = dict.fromkeys(("precision", "recall", "f1"), 0.0)
    deg: list[str] = []
    for cls in (0, 1):
        support = int(np.sum(t == cls))
        if support == 0:
            continue
        flip = p if cls == 1 else 1 - p
        tflip = t if cls == 1 else 1 - t
        r = binary_metrics(confusion(flip, tflip))
        for k in agg:
            agg[k] += support / n * getattr(r, k)
        deg += [f"{k}[{cls}]" for k in r.degenerate if k != "specificity"]
    acc = float(np.mean(p == t))
    return MetricReport(acc, agg["precision"], agg["recall"], agg["f1"], "weighted_average",
                        None, tuple(deg))


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise MetricsError("cannot average zero reports")
    variants = {r.variant for r in reports}
    if len(variants) != 1:
        raise MetricsError(f"cannot average mixed metric variants {sorted(variants)}")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    specs = [r.specificity for r in reports if r.specificity is not None]
    spec = float(np.mean(specs)) if len(specs) == len(reports) else None
    deg = tuple(sorted({d for r in reports for d in r.degenerate}))
    return MetricReport(**vals, variant=variants.pop(), specificity=spec, degenerate=deg)


@dataclass(frozen=True)
class EvalSummary:
    counts: MetricCounts
    binary: MetricReport
    weighted: MetricReport
    n: int

    def to_dict(self) -> dict:
        return {"n": self.n, "counts": asdict(self.counts),
                "confusion_matrix": self.counts.matrix(),
                "confusion_matrix_percent": self.counts.matrix_percent(),
                "binary_positive_class": self.binary.to_dict(),
                "weighted_average": self.weighted.to_dict()}


def evaluate(preds, truth) -> EvalSummary:
    c = confusion(preds, truth)
    return EvalSummary(c, binary_metrics(c), weighted_metrics(preds, truth), c.total)


@dataclass(frozen=True)
class CVSummary:
    per_fold: tuple[EvalSummary, ...]
    fold_mean_binary: MetricReport
    fold_mean_weighted: MetricReport
    pooled: EvalSummary

    def to_dict(self) -> dict:
        return {"per_fold": [f.to_dict() for f in self.per_fold],
                "fold_mean": {"binary_positive_class": self.fold_mean_binary.to_dict(),
                              "weighted_average": self.fold_mean_weighted.to_dict()},
                "pooled": self.pooled.to_dict()}


def aggregate_cv(per_fold: Sequence[EvalSummary], pooled_preds, pooled_truth) -> CVSummary:
    """Both the unweighted mean of fold metrics and metrics of the pooled predictions."""
    if not per_fold:
        raise MetricsError("no folds to aggregate")
    return CVSummary(tuple(per_fold), mean_report([f.binary for f in per_fold]),
                     mean_report([f.weighted for f in per_fold]), evaluate(pooled_preds, pooled_truth))


# ---------------------------------------------------------------------------
# Prediction records and report files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    p_depressed: float
    label_pred: int
    label_true: int


def predictions_to_csv(records: Sequence[PredictionRecord]) -> str:
    lines = ["sample_id,p_depressed,label_pred,label_true"]
    lines += [f"{r.sample_id},{r.p_depressed!r},{r.label_pred},{r.label_true}" for r in records]
    return "\n".join(lines) + "\n"


def predictions_from_csv(text: str) -> list[PredictionRecord]:
    rows = [line.split(",") for line in text.strip().splitlines()]
    if not rows or rows[0] != ["sample_id", "p_depressed", "label_pred", "label_true"]:
        raise MetricsError("prediction file has an unexpected header")
    try:
        return [PredictionRecord(r[0], float(r[1]), int(r[2]), int(r[3])) for r in rows[1:]]
    except (IndexError, ValueError) as exc:
        raise MetricsError(f"malformed prediction record: {exc}") from None


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_report(model: str, seed: int, config: dict,
                 fold_predictions: dict[int, Sequence[PredictionRecord]]) -> dict:
    """Report document for one model evaluated over CV folds."""
    if not fold_predictions:
        raise MetricsError("no fold predictions to report")
    per_fold, folds, pooled = [], [], []
    for fold in sorted(fold_predictions):
        recs = list(fold_predictions[fold])
        if not recs:
            continue
        per_fold.append(evaluate([r.label_pred for r in recs], [r.label_true for r in recs]))
        folds.append(fold)
        pooled += recs
    if not per_fold:
        raise MetricsError("every fold is empty")
    cv = aggregate_cv(per_fold, [r.label_pred for r in pooled], [r.label_true for r in pooled])
    doc = cv.to_dict()
    for fold, entry in zip(folds, doc["per_fold"]):
        entry["fold"] = fold
    doc.update({
        "model": model,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": config,
        "metric_variants": ["binary_positive_class", "weighted_average"],
        "aggregations": {"fold_mean": "unweighted mean of per-fold metrics",
                         "pooled": "metrics of all held-out predictions pooled"},
        "confusion_matrix_convention": "rows = true label, columns = predicted label, class order [0, 1]",
        "figure_data": {"grouped_bars": {model: cv.pooled.weighted.values()}},
    })
    return doc


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def render_svg(doc: dict, out_dir: str | Path) -> list[Path]:
    """Optional confusion-matrix and grouped-bar SVGs (deterministic output)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mddformer"
    out = Path(out_dir)
    paths = []
    pct = np.array(doc["pooled"]["confusion_matrix_percent"])
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    ax.imshow(pct, cmap="Blues", vmin=0, vmax=100)
    for (i, j), v in np.ndenumerate(pct):
        ax.text(j, i, f"{v:.1f}%", ha="center", va="center")
    ax.set_xticks([0, 1], ["non-dep.", "dep."])
    ax.set_yticks([0, 1], ["non-dep.", "dep."])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    paths.append(out / "confusion.svg")
    fig.savefig(paths[-1], metadata={"Date": None})
    plt.close(fig)

    bars = doc["figure_data"]["grouped_bars"]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(bars), 3.0))
    width = 0.2
    for k, metric in enumerate(METRIC_NAMES):
        xs = np.arange(len(bars)) + (k - 1.5) * width
        ax.bar(xs, [100 * bars[m][metric] for m in bars], width, label=metric)
    ax.set_xticks(np.arange(len(bars)), list(bars))
    ax.set_ylabel("%")
    ax.legend(fontsize="small")
    paths.append(out / "grouped_bars.svg")
    fig.savefig(paths[-1], metadata={"Date": None})
    plt.close(fig)
    return paths
