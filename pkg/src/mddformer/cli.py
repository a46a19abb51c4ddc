"""Command-line entry point: ``mddformer {synth,train,cv,eval,gradcheck,report}``.

Every command needs ``--seed``. Outputs go under ``--out`` together with a
``run_manifest.json`` that records the resolved configuration, the seed and
a SHA-256 of each artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import evaluate_baseline
from .errors import ConfigError, MDDError
from .ingest import (DEFAULT_SEQ_LEN, Dataset, FoldAssignment, ModalityConfig, load_dataset,
                     stratified_kfold)
from .metrics import (PredictionRecord, build_report, dumps_report, predictions_from_csv,
                      predictions_to_csv, render_svg)
from .model import MDDformer, load_checkpoint, save_checkpoint
from .synth import SynthSpec, write_synthetic_dataset
from .train import TrainConfig, prepare_inputs, tiny_gradient_check, train_model

GRADCHECK_TOL = 1e-4


class GradCheckFailed(MDDError):
    module = "train"


# CLI flag -> TrainConfig field
TRAIN_OVERRIDES = {
    "epochs": int, "lr_max": float, "lr_min": float, "batch_size": int, "dropout": float,
    "d_model": int, "n_heads": int, "d_ff": int, "fusion_mode": str,
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(_existing(path, "config").read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    return doc


def resolve(args) -> tuple[ModalityConfig, ModalityConfig, TrainConfig]:
    doc = load_config(getattr(args, "config", None))
    audio = ModalityConfig.from_dict("audio", doc["audio"]) if "audio" in doc else ModalityConfig.default_audio()
    visual = ModalityConfig.from_dict("visual", doc["visual"]) if "visual" in doc else ModalityConfig.default_visual()
    train = dict(doc.get("train", {}))
    train["n_audio"] = int(doc.get("n_audio", train.get("n_audio", DEFAULT_SEQ_LEN)))
    train["n_visual"] = int(doc.get("n_visual", train.get("n_visual", DEFAULT_SEQ_LEN)))
    train["seed"] = args.seed
    for name in TRAIN_OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            train[name] = value
    for flag in ("zero_audio", "zero_visual"):
        if getattr(args, flag, False):
            train[flag] = True
    return audio, visual, TrainConfig.from_dict(train)


def resolved_config_doc(audio, visual, train: TrainConfig, **extra) -> dict:
    doc = {"audio": audio.to_dict(), "visual": visual.to_dict(), "train": train.to_dict()}
    doc.update(extra)
    return doc


def _load(args, audio, visual, train) -> Dataset:
    return load_dataset(_existing(args.data, "manifest"), audio, visual, train.n_audio, train.n_visual)


def _folds(args, dataset) -> FoldAssignment:
    return stratified_kfold(dataset, args.folds, args.seed)


def _fold_ids(spec, k) -> list[int]:
    if spec in (None, "all"):
        return list(range(k))
    try:
        ids = [int(x) for x in str(spec).split(",")]
    except ValueError:
        raise ConfigError(f"--fold must be 'all' or comma-separated integers, got {spec!r}") from None
    for i in ids:
        if not 0 <= i < k:
            raise ConfigError(f"--fold {i} outside [0, {k})")
    return ids


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

class RunWriter:
    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def text(self, rel, content: str):
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content, encoding="utf-8")
        self.add(rel)
        return p

    def add(self, rel):
        self.artifacts.append(str(Path(rel).as_posix()))

    def finish(self, command, seed, config, summary: dict):
        hashes = {rel: hashlib.sha256((self.out / rel).read_bytes()).hexdigest()
                  for rel in sorted(set(self.artifacts))}
        manifest = {"command": command, "seed": seed, "config": config, "summary": summary,
                    "artifacts": hashes, "version": __version__}
        (self.out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prediction_records(result):
    return [PredictionRecord(p.sample_id, p.p_depressed, p.label, int(t))
            for p, t in zip(result.predictions, result.labels_true)]


def _train_folds(args, audio, visual, train, fold_spec):
    dataset = _load(args, audio, visual, train)
    folds = _folds(args, dataset)
    writer = RunWriter(args.out)
    writer.text("folds.json", folds.to_json() + "\n")
    per_fold = {}
    for fold in _fold_ids(fold_spec, folds.k):
        result = train_model(dataset, folds, fold, train)
        d = f"fold_{fold}"
        ckpt = writer.out / d / "checkpoint.safetensors"
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, result.params, result.model_config, result.buffers,
                        {"fold": fold, "seed": train.seed})
        writer.add(f"{d}/checkpoint.safetensors")
        writer.text(f"{d}/history.csv", result.history.to_csv())
        per_fold[fold] = _prediction_records(result)
        writer.text(f"{d}/predictions.csv", predictions_to_csv(per_fold[fold]))
    config = resolved_config_doc(audio, visual, train, folds=folds.k, data=str(args.data))
    return writer, per_fold, config, dataset


def _write_report(writer, model, seed, config, per_fold, svg=False):
    doc = build_report(model, seed, config, per_fold)
    writer.text("report.json", dumps_report(doc))
    if svg:
        for p in render_svg(doc, writer.out):
            writer.add(p.name)
    return doc


def _acc_summary(doc):
    return {"pooled_accuracy": doc["pooled"]["binary_positive_class"]["accuracy"],
            "fold_mean_accuracy": doc["fold_mean"]["binary_positive_class"]["accuracy"]}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = SynthSpec(args.n_samples, args.seq_len, args.dim_audio, args.dim_visual,
                     args.sep_audio, args.sep_visual, args.noise, args.seed)
    writer = RunWriter(args.out)
    for rel in write_synthetic_dataset(spec, writer.out):
        writer.add(rel)
    summary = {"n_samples": spec.n_samples}
    writer.finish("synth", args.seed, {"synth": asdict(spec)}, summary)
    return f"samples={spec.n_samples}"


def cmd_train(args):
    audio, visual, train = resolve(args)
    if args.fold in (None, "all"):
        raise ConfigError("train needs a single --fold index (use cv for all folds)")
    writer, per_fold, config, _ = _train_folds(args, audio, visual, train, args.fold)
    (fold, recs), = per_fold.items()
    acc = float(np.mean([r.label_pred == r.label_true for r in recs])) if recs else float("nan")
    writer.finish("train", args.seed, config, {"fold": fold, "held_out_accuracy": acc})
    return f"fold={fold} held_out_accuracy={acc:.4f}"


def cmd_cv(args):
    audio, visual, train = resolve(args)
    writer, per_fold, config, _ = _train_folds(args, audio, visual, train, args.fold)
    doc = _write_report(writer, "mddformer", args.seed, config, per_fold, args.svg)
    summary = _acc_summary(doc)
    writer.finish("cv", args.seed, config, summary)
    return f"pooled_accuracy={summary['pooled_accuracy']:.4f}"


def cmd_eval(args):
    audio, visual, train = resolve(args)
    if args.model == "mddformer":
        if args.checkpoint is None:
            return cmd_cv(args)
        return _eval_checkpoint(args, audio, visual, train)
    dataset = _load(args, audio, visual, train)
    folds = _folds(args, dataset)
    per_fold = evaluate_baseline(dataset, folds, args.model, _fold_ids(args.fold, folds.k),
                                 k=args.k, seed=args.seed)
    writer = RunWriter(args.out)
    writer.text("folds.json", folds.to_json() + "\n")
    for fold, recs in per_fold.items():
        writer.text(f"fold_{fold}/predictions.csv", predictions_to_csv(recs))
    config = resolved_config_doc(audio, visual, train, folds=folds.k, data=str(args.data),
                                 model=args.model, knn_k=args.k)
    doc = _write_report(writer, args.model, args.seed, config, per_fold, args.svg)
    summary = _acc_summary(doc)
    writer.finish("eval", args.seed, config, summary)
    return f"model={args.model} pooled_accuracy={summary['pooled_accuracy']:.4f}"


def _eval_checkpoint(args, audio, visual, train):
    params, mcfg, buffers = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    dataset = _load(args, audio, visual, train)
    X_a, X_v = prepare_inputs(dataset.audio_array, dataset.visual_array, buffers, train)
    probs = MDDformer(mcfg).predict_proba(params, X_a, X_v)
    recs = [PredictionRecord(sid, float(p[1]), int(p[1] > p[0]), int(t))
            for sid, p, t in zip(dataset.sample_ids, probs, dataset.labels)]
    writer = RunWriter(args.out)
    writer.text("predictions.csv", predictions_to_csv(recs))
    config = resolved_config_doc(audio, visual, train, data=str(args.data), model="mddformer",
                                 checkpoint=str(args.checkpoint))
    doc = _write_report(writer, "mddformer", args.seed, config, {0: recs}, args.svg)
    summary = _acc_summary(doc)
    writer.finish("eval", args.seed, config, summary)
    return f"model=mddformer accuracy={summary['pooled_accuracy']:.4f}"


def cmd_gradcheck(args):
    res = tiny_gradient_check(args.seed)
    ok = res.passed(GRADCHECK_TOL)
    summary = {"max_rel_error": res.max_rel_error, "n_checked": res.n_checked,
               "threshold": GRADCHECK_TOL, "passed": ok, "worst": [res.worst[0], list(res.worst[1])]}
    if args.out is not None:
        writer = RunWriter(args.out)
        writer.text("gradcheck.json", json.dumps({**summary, "per_param": res.per_param},
                                                 indent=2, sort_keys=True) + "\n")
        writer.finish("gradcheck", args.seed, {"model": "tiny"}, summary)
    line = f"max_rel_error={res.max_rel_error:.3e} checked={res.n_checked} threshold={GRADCHECK_TOL:g}"
    if not ok:
        raise GradCheckFailed(line)
    return line


def cmd_report(args):
    runs = _existing(args.runs, "runs directory")
    fold_dirs = sorted(runs.glob("fold_*/predictions.csv"), key=lambda p: int(p.parent.name[5:]))
    if not fold_dirs:
        raise ConfigError(f"no fold_*/predictions.csv under {runs}")
    per_fold = {int(p.parent.name[5:]): predictions_from_csv(p.read_text()) for p in fold_dirs}
    manifest = runs / "run_manifest.json"
    config = json.loads(manifest.read_text())["config"] if manifest.exists() else {}
    model = config.get("model", "mddformer")
    writer = RunWriter(args.out)
    doc = _write_report(writer, model, args.seed, config, per_fold, args.svg)
    summary = _acc_summary(doc)
    writer.finish("report", args.seed, config, summary)
    return f"folds={len(per_fold)} pooled_accuracy={summary['pooled_accuracy']:.4f}"


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mddformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", required=out_required)

    def data_opts(p):
        p.add_argument("--config", help="JSON config (modality groups, lengths, train options)")
        p.add_argument("--data", required=True, help="sample manifest (CSV or JSON Lines)")
        p.add_argument("--folds", type=int, default=10)
        p.add_argument("--fold", default=None, help="fold index, comma list, or 'all'")
        p.add_argument("--svg", action="store_true", help="also render SVG figures")
        for name, typ in TRAIN_OVERRIDES.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
        p.add_argument("--zero-audio", action="store_true")
        p.add_argument("--zero-visual", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--dim-audio", type=int, default=128)
    p.add_argument("--dim-visual", type=int, default=171)
    p.add_argument("--sep-audio", type=float, default=5.0)
    p.add_argument("--sep-visual", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fold")
    common(p)
    data_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation of MDDformer")
    common(p)
    data_opts(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="cross-validated evaluation of a model")
    common(p)
    data_opts(p)
    p.add_argument("--model", choices=("knn", "logreg", "mddformer"), required=True)
    p.add_argument("--k", type=int, default=5, help="neighbours for KNN")
    p.add_argument("--checkpoint", help="score a trained MDDformer checkpoint on the whole manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient on a tiny model")
    common(p, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="merge per-fold predictions into a report")
    common(p)
    p.add_argument("--runs", required=True, help="directory holding fold_*/predictions.csv")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        line = args.func(args)
    except MDDError as exc:
        print(f"error [{exc.module}]: {exc}", file=sys.stderr)
        return 1
    print(f"{args.command} seed={args.seed} {line}")
    return 0


def main():
    sys.exit(run())
