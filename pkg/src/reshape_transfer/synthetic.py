"""Pure-tone corpus for desk-scale runs of the whole pipeline.

Class ``c`` is ``sin(2*pi*f_c*t)`` plus uniform noise in ``[-noise, noise]``,
clipped to [-1, 1]. Because the tones are distinct, a spectral-peak rule
separates the classes exactly, which makes pipeline regressions easy to
attribute.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_ingest import CLASSES, SAMPLE_RATE, WINDOW_LEN, write_wav
from .binio import write_segment_cache


@dataclass
class SyntheticSpec:
    n_per_class: int = 50
    freqs: tuple = (200.0, 400.0, 800.0)
    noise: float = 0.1
    seed: int = 0
    window_len: int = WINDOW_LEN

    def __post_init__(self):
        self.freqs = tuple(float(f) for f in self.freqs)
        if len(set(self.freqs)) != len(self.freqs):
            raise ValueError("class frequencies must be pairwise distinct")
        if len(self.freqs) > len(CLASSES):
            raise ValueError(f"at most {len(CLASSES)} classes")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")


def synthesize(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(labels, samples[n, window_len])``, classes interleaved in blocks."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.window_len) / SAMPLE_RATE
    labels, rows = [], []
    for label, f in enumerate(spec.freqs):
        tone = np.sin(2 * np.pi * f * t)
        for _ in range(spec.n_per_class):
            noise = rng.uniform(-spec.noise, spec.noise, spec.window_len) if spec.noise > 0 else 0.0
            rows.append(np.clip(tone + noise, -1.0, 1.0))
            labels.append(label)
    return np.array(labels, dtype=np.uint8), np.asarray(rows, dtype=np.float32)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write one float32 WAV per segment, ``manifest.csv`` and ``segments.rsht``.

    Returns the written paths keyed by ``manifest``, ``cache`` and ``wav_dir``.
    """
    out = Path(out_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    labels, samples = synthesize(spec)
    rows = []
    for i, (lab, x) in enumerate(zip(labels, samples)):
        name = f"{CLASSES[lab]}_{i:04d}.wav"
        write_wav(wav_dir / name, SAMPLE_RATE, x, encoding="float32")
        rows.append((f"wav/{name}", f"synth-{i:04d}", CLASSES[lab]))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("file_path", "subject_id", "label"))
        w.writerows(rows)
    cache = out / "segments.rsht"
    write_segment_cache(cache, labels, samples)
    return {"manifest": manifest, "cache": cache, "wav_dir": wav_dir}
