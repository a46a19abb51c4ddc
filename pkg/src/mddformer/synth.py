"""Deterministic synthetic audiovisual datasets with planted class signal.

Every frame of a class-1 sample is shifted by ``separation * u`` where ``u``
is a fixed random unit vector per modality; all frames carry i.i.d. Gaussian
noise of scale ``noise_sigma``. Class 0 has no shift. Values are rounded to
six decimals so the written feature files re-parse to the same floats.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import SynthError
from .ingest import (DEFAULT_AUDIO_GROUPS, DEFAULT_VISUAL_GROUPS, Dataset, LabeledSample, ManifestRecord,
                     ModalityConfig, ModalitySequence, format_feature_file, write_manifest)

DECIMALS = 6


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 200
    seq_len: int = 32
    d_audio: int = 128
    d_visual: int = 171
    separation_audio: float = 5.0
    separation_visual: float = 5.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.n_samples % 2:
            raise SynthError(f"n_samples must be a positive even number, got {self.n_samples}")
        for name in ("seq_len", "d_audio", "d_visual"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be positive, got {getattr(self, name)}")
        if self.separation_audio < 0 or self.separation_visual < 0:
            raise SynthError("separations must be non-negative")
        if not self.noise_sigma > 0:
            raise SynthError(f"noise_sigma must be positive, got {self.noise_sigma}")

    def audio_config(self) -> ModalityConfig:
        if self.d_audio == sum(d for _, d in DEFAULT_AUDIO_GROUPS):
            return ModalityConfig.default_audio()
        return ModalityConfig.single_group("audio", self.d_audio)

    def visual_config(self) -> ModalityConfig:
        if self.d_visual == sum(d for _, d in DEFAULT_VISUAL_GROUPS):
            return ModalityConfig.default_visual()
        return ModalityConfig.single_group("visual", self.d_visual)


def planted_directions(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit shift directions for audio and visual."""
    rng = np.random.default_rng([spec.seed, 0xD1])
    u_a = rng.standard_normal(spec.d_audio)
    u_v = rng.standard_normal(spec.d_visual)
    return u_a / np.linalg.norm(u_a), u_v / np.linalg.norm(u_v)


def sample_label(i: int) -> int:
    return i % 2


def generate_synthetic_dataset(spec: SynthSpec) -> Dataset:
    u_a, u_v = planted_directions(spec)
    samples = []
    for i in range(spec.n_samples):
        # per-sample stream: seed mixed with the sample index
        rng = np.random.default_rng([spec.seed, i])
        y = sample_label(i)
        xa = spec.noise_sigma * rng.standard_normal((spec.seq_len, spec.d_audio))
        xv = spec.noise_sigma * rng.standard_normal((spec.seq_len, spec.d_visual))
        if y:
            xa += spec.separation_audio * u_a
            xv += spec.separation_visual * u_v
        samples.append(LabeledSample(
            f"syn{i:05d}",
            ModalitySequence(np.round(xa, DECIMALS)),
            ModalitySequence(np.round(xv, DECIMALS)),
            y, "synthetic"))
    return Dataset(tuple(samples), spec.seq_len, spec.seq_len)


def write_synthetic_dataset(spec: SynthSpec, out_dir: str | Path) -> list[Path]:
    """Write feature files, ``manifest.csv``, ``config.json`` and ``synth_spec.json``.

    Returns the written paths (relative to ``out_dir``) in a stable order.
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic_dataset(spec)
    a_cfg, v_cfg = spec.audio_config(), spec.visual_config()
    written, records = [], []
    for s in ds.samples:
        a_rel = f"features/{s.sample_id}_audio.csv"
        v_rel = f"features/{s.sample_id}_visual.csv"
        (out / a_rel).write_bytes(format_feature_file(s.audio, a_cfg))
        (out / v_rel).write_bytes(format_feature_file(s.visual, v_cfg))
        written += [Path(a_rel), Path(v_rel)]
        records.append(ManifestRecord(s.sample_id, a_rel, v_rel, s.label, s.source_platform))
    (out / "manifest.csv").write_bytes(write_manifest(records))
    config = {"audio": a_cfg.to_dict(), "visual": v_cfg.to_dict(),
              "n_audio": spec.seq_len, "n_visual": spec.seq_len}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    (out / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    return written + [Path("manifest.csv"), Path("config.json"), Path("synth_spec.json")]
