"""Feature-file parsing, manifests, fixed-length resampling and stratified folds.

Feature files are UTF-8 comma-separated tables with one header row and one
row per frame. Columns are grouped (e.g. 17 FAU intensities followed by 136
landmark coordinates); a :class:`ModalityConfig` declares the groups in
order and each header name must start with its group's name.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    FoldError,
    IngestError,
    ManifestError,
    ParseError,
)

DEFAULT_AUDIO_GROUPS = (("vggish", 128),)
# gaze=12 reads "four sets ... with 12 dimensions each" as 12 in total;
# use a custom column_map for the 48-column reading.
DEFAULT_VISUAL_GROUPS = (("fau", 17), ("landmarks", 136), ("gaze", 12), ("head_pose", 6))
DEFAULT_SEQ_LEN = 256


@dataclass(frozen=True)
class ModalityConfig:
    name: str
    column_map: tuple[tuple[str, int], ...]
    check_header: bool = True

    def __post_init__(self):
        if self.name not in ("audio", "visual"):
            raise IngestError(f"modality name must be 'audio' or 'visual', got {self.name!r}")
        cmap = tuple((str(g), int(d)) for g, d in self.column_map)
        if not cmap:
            raise IngestError(f"{self.name}: column_map is empty")
        for group, dim in cmap:
            if dim <= 0:
                raise IngestError(f"{self.name}: group {group!r} has non-positive dim {dim}")
        object.__setattr__(self, "column_map", cmap)

    @property
    def expected_total_dim(self) -> int:
        return sum(d for _, d in self.column_map)

    def column_names(self) -> list[str]:
        return [f"{g}_{j}" for g, d in self.column_map for j in range(d)]

    def group_of_column(self) -> list[str]:
        return [g for g, d in self.column_map for _ in range(d)]

    @classmethod
    def default_audio(cls) -> "ModalityConfig":
        return cls("audio", DEFAULT_AUDIO_GROUPS)

    @classmethod
    def default_visual(cls) -> "ModalityConfig":
        return cls("visual", DEFAULT_VISUAL_GROUPS)

    @classmethod
    def single_group(cls, name: str, dim: int) -> "ModalityConfig":
        return cls(name, ((name, dim),))

    def to_dict(self) -> dict:
        return {
            "groups": [[g, d] for g, d in self.column_map],
            "expected_total_dim": self.expected_total_dim,
            "check_header": self.check_header,
        }

    @classmethod
    def from_dict(cls, name: str, doc: Mapping) -> "ModalityConfig":
        try:
            groups = tuple((g, int(d)) for g, d in doc["groups"])
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"{name}: malformed 'groups' entry: {exc}") from None
        cfg = cls(name, groups, bool(doc.get("check_header", True)))
        expected = doc.get("expected_total_dim")
        if expected is not None and int(expected) != cfg.expected_total_dim:
            raise IngestError(
                f"{name}: expected_total_dim={expected} but groups sum to {cfg.expected_total_dim}"
            )
        return cfg


@dataclass(frozen=True, eq=False)
class ModalitySequence:
    """Time-major feature matrix (T_raw x D) for one modality of one sample."""

    data: np.ndarray
    frame_rate_hint: float | None = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise IngestError(f"sequence must be 2-D (time x features), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LabeledSample:
    sample_id: str
    audio: ModalitySequence
    visual: ModalitySequence
    label: int
    source_platform: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"sample {self.sample_id!r}: label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Rejection:
    sample_id: str
    reason: str


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    audio_path: str
    visual_path: str
    label: int
    platform: str | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable collection of fixed-length labeled samples."""

    samples: tuple[LabeledSample, ...]
    n_audio: int
    n_visual: int
    rejections: tuple[Rejection, ...] = ()

    def __len__(self):
        return len(self.samples)

    @cached_property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(s.sample_id for s in self.samples)

    @cached_property
    def labels(self) -> np.ndarray:
        out = np.array([s.label for s in self.samples], dtype=np.int64)
        out.setflags(write=False)
        return out

    @property
    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in (0, 1)}

    @cached_property
    def audio_array(self) -> np.ndarray:
        """Stacked audio features, shape (n_samples, n_audio, D_a)."""
        out = np.stack([s.audio.data for s in self.samples])
        out.setflags(write=False)
        return out

    @cached_property
    def visual_array(self) -> np.ndarray:
        out = np.stack([s.visual.data for s in self.samples])
        out.setflags(write=False)
        return out

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.n_audio, self.n_visual)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignments: Mapping[str, int] = field(default_factory=dict)

    def fold_of(self, sample_id: str) -> int:
        return self.assignments[sample_id]

    def test_indices(self, dataset: Dataset, fold: int) -> np.ndarray:
        return np.array([i for i, sid in enumerate(dataset.sample_ids)
                         if self.assignments[sid] == fold], dtype=np.int64)

    def train_indices(self, dataset: Dataset, fold: int) -> np.ndarray:
        return np.array([i for i, sid in enumerate(dataset.sample_ids)
                         if self.assignments[sid] != fold], dtype=np.int64)

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignments.values():
            sizes[f] += 1
        return sizes

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "assignments": dict(self.assignments)}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        doc = json.loads(text)
        return cls(int(doc["k"]), {str(k): int(v) for k, v in doc["assignments"].items()})


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def parse_feature_file(raw: bytes | str, config: ModalityConfig,
                       frame_rate_hint: float | None = None) -> ModalitySequence:
    """Parse one delimited feature table into a ``T_raw x D`` sequence.

    Raises:
        ParseError: on empty input, bad header names, non-numeric or
            non-finite cells. Positions are 1-based and count the header
            as row 1.
        DimensionMismatchError: when a row's width differs from
            ``config.expected_total_dim``.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8-sig")
        except UnicodeDecodeError as exc:
            raise ParseError(f"file is not valid UTF-8: {exc}") from None
    else:
        text = raw
    rows = [r for r in csv.reader(io.StringIO(text))]
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError("empty file")

    dim = config.expected_total_dim
    header = [h.strip() for h in rows[0]]
    if len(header) != dim:
        raise DimensionMismatchError(
            f"{config.name}: header has {len(header)} columns, expected {dim}", row=1)
    if config.check_header:
        for j, (name, group) in enumerate(zip(header, config.group_of_column())):
            if not name.startswith(group):
                raise ParseError(
                    f"{config.name}: header {name!r} does not belong to group {group!r}",
                    row=1, column=j + 1)

    body = rows[1:]
    if not body:
        raise ParseError(f"{config.name}: no data rows")
    for i, r in enumerate(body):
        if len(r) != dim:
            raise DimensionMismatchError(
                f"{config.name}: row has {len(r)} columns, expected {dim}", row=i + 2)

    try:
        data = np.array(body, dtype=np.float64)
    except ValueError:
        # slow path only to locate the offending cell
        for i, r in enumerate(body):
            for j, cell in enumerate(r):
                try:
                    float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", row=i + 2, column=j + 1) from None
        raise
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        i, j = bad[0]
        raise ParseError(f"non-finite value {body[i][j]!r}", row=int(i) + 2, column=int(j) + 1)
    return ModalitySequence(data, frame_rate_hint)


def format_feature_file(seq: ModalitySequence, config: ModalityConfig) -> bytes:
    """Serialize ``seq`` so that :func:`parse_feature_file` reproduces it bit-exactly."""
    if seq.dim != config.expected_total_dim:
        raise DimensionMismatchError(
            f"{config.name}: sequence has {seq.dim} columns, expected {config.expected_total_dim}")
    lines = [",".join(config.column_names())]
    lines.extend(",".join(map(repr, row)) for row in seq.data.tolist())
    return ("\n".join(lines) + "\n").encode("utf-8")


def resample_to_fixed_length(seq: ModalitySequence, n: int) -> ModalitySequence:
    """Uniform index sampling: output row i is input row ``floor(i * T_raw / n)``."""
    if n <= 0:
        raise IngestError(f"target length must be positive, got {n}")
    if seq.length < 1:
        raise IngestError("cannot resample an empty sequence")
    idx = resample_indices(seq.length, n)
    return ModalitySequence(seq.data[idx], seq.frame_rate_hint)


def resample_indices(t_raw: int, n: int) -> np.ndarray:
    return (np.arange(n, dtype=np.int64) * t_raw) // n


# ---------------------------------------------------------------------------
# Manifests and datasets
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("sample_id", "audio_path", "visual_path", "label", "platform")


def _parse_label(value, sample_id) -> int:
    try:
        as_float = float(value)
    except (TypeError, ValueError):
        raise ManifestError(f"sample {sample_id!r}: label {value!r} is not 0 or 1") from None
    if as_float not in (0.0, 1.0):
        raise ManifestError(f"sample {sample_id!r}: label {value!r} is not 0 or 1")
    return int(as_float)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    """Read a manifest as CSV (header row) or JSON Lines (``.jsonl``/``.json``)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    if path.suffix in (".jsonl", ".json"):
        docs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    docs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from None
    else:
        docs = list(csv.DictReader(io.StringIO(text)))
    records = []
    for i, doc in enumerate(docs):
        missing = [k for k in ("sample_id", "audio_path", "visual_path", "label") if not doc.get(k) and doc.get(k) != 0]
        if missing:
            raise ManifestError(f"{path}: record {i + 1} is missing {', '.join(missing)}")
        sid = str(doc["sample_id"])
        records.append(ManifestRecord(
            sid, str(doc["audio_path"]), str(doc["visual_path"]),
            _parse_label(doc["label"], sid), doc.get("platform") or None))
    return records


def write_manifest(records: Sequence[ManifestRecord]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for r in records:
        w.writerow([r.sample_id, r.audio_path, r.visual_path, r.label, r.platform or ""])
    return buf.getvalue().encode("utf-8")


def build_dataset(manifest: Sequence[ManifestRecord], audio_cfg: ModalityConfig,
                  visual_cfg: ModalityConfig, n_audio: int = DEFAULT_SEQ_LEN,
                  n_visual: int = DEFAULT_SEQ_LEN, base_dir: str | Path | None = None) -> Dataset:
    """Load every manifest entry, resampling both modalities to fixed lengths.

    Entries whose feature files are missing or malformed are skipped and
    listed in ``Dataset.rejections``. Invalid labels and duplicate ids abort
    the build.
    """
    if not manifest:
        raise EmptyDatasetError("manifest has no entries")
    base = Path(base_dir) if base_dir is not None else Path(".")
    seen: set[str] = set()
    samples, rejections = [], []
    for rec in manifest:
        if rec.sample_id in seen:
            raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
        label = _parse_label(rec.label, rec.sample_id)
        seqs = []
        for rel, cfg, n in ((rec.audio_path, audio_cfg, n_audio), (rec.visual_path, visual_cfg, n_visual)):
            path = base / rel
            try:
                seq = parse_feature_file(path.read_bytes(), cfg)
            except OSError as exc:
                rejections.append(Rejection(rec.sample_id, f"unreadable {cfg.name} file {rel}: {exc.strerror}"))
                break
            except ParseError as exc:
                rejections.append(Rejection(rec.sample_id, f"{cfg.name} file {rel}: {exc}"))
                break
            seqs.append(resample_to_fixed_length(seq, n))
        else:
            samples.append(LabeledSample(rec.sample_id, seqs[0], seqs[1], label, rec.platform))
    if not samples:
        raise EmptyDatasetError(f"no usable samples ({len(rejections)} rejected)")
    return Dataset(tuple(samples), n_audio, n_visual, tuple(rejections))


def load_dataset(manifest_path: str | Path, audio_cfg: ModalityConfig, visual_cfg: ModalityConfig,
                 n_audio: int = DEFAULT_SEQ_LEN, n_visual: int = DEFAULT_SEQ_LEN) -> Dataset:
    """Read a manifest file; feature paths resolve relative to its directory."""
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    return build_dataset(records, audio_cfg, visual_cfg, n_audio, n_visual, manifest_path.parent)


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------

def assign_folds(labels: Sequence[int], k: int, seed: int) -> np.ndarray:
    """Fold index per position of ``labels``.

    Each class is shuffled, the classes are laid end to end, and position
    ``i`` of that ordering goes to fold ``i mod k``. Both total fold sizes and
    per-class counts per fold therefore differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise FoldError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < k:
            raise FoldError(f"class {c} has {members.size} samples, fewer than k={k}")
        order.append(rng.permutation(members))
    folds = np.empty(labels.size, dtype=np.int64)
    folds[np.concatenate(order)] = np.arange(labels.size) % k
    return folds


def stratified_kfold(dataset: Dataset, k: int, seed: int) -> FoldAssignment:
    folds = assign_folds(dataset.labels, k, seed)
    return FoldAssignment(k, dict(zip(dataset.sample_ids, folds.tolist())))
