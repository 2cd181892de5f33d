"""WAV ingestion, one-second segmentation, square reshape and train/test split."""

from __future__ import annotations

import csv
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (EmptyDataset, InvalidClass, MalformedWav, RateMismatch,
                     ShapeError, UnsupportedEncoding)

SAMPLE_RATE = 44100
WINDOW_LEN = 44100
MATRIX_WIDTH = 210
TEST_FRACTION = 206 / 2055

CLASSES = ("healthy", "pneumonia", "copd")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class RecordingMeta:
    file_path: str
    subject_id: str
    label: int
    sample_rate: int
    n_samples: int

    def __post_init__(self):
        if self.label not in range(len(CLASSES)):
            raise InvalidClass(f"label {self.label!r} is not one of {CLASSES}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class AudioSegment:
    samples: np.ndarray
    label: int
    source: RecordingMeta | None = None
    offset: int = 0


@dataclass
class SampleMatrix:
    data: np.ndarray
    label: int


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int
    train_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


# -- WAV --------------------------------------------------------------------

def _iter_chunks(blob: bytes):
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise MalformedWav("missing RIFF/WAVE header")
    (riff_size,) = struct.unpack_from("<I", blob, 4)
    if riff_size + 8 > len(blob):
        raise MalformedWav(f"RIFF size {riff_size} exceeds file length {len(blob)}")
    end = riff_size + 8
    pos = 12
    while pos + 8 <= end:
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        if pos + 8 + size > end:
            raise MalformedWav(f"chunk {cid!r} of {size} bytes is truncated")
        yield cid, blob[pos + 8:pos + 8 + size]
        pos += 8 + size + (size & 1)


def parse_wav(path) -> tuple[int, np.ndarray]:
    """Read a RIFF/WAVE file and return ``(sample_rate, mono float64 samples)``.

    Accepts integer PCM (16, 24 or 32 bit) and IEEE float (32 or 64 bit),
    including the WAVE_FORMAT_EXTENSIBLE wrapper. Integer samples are
    divided by ``2**(bits-1)`` so 16-bit values map to ``v / 32768``.
    Channels are averaged.
    """
    blob = Path(path).read_bytes()
    fmt = data = None
    for cid, body in _iter_chunks(blob):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data" and data is None:
            data = body
    if fmt is None or len(fmt) < 16:
        raise MalformedWav("missing or short fmt chunk")
    if data is None:
        raise MalformedWav("missing data chunk")

    code, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if code == _FMT_EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedWav("short WAVE_FORMAT_EXTENSIBLE fmt chunk")
        (code,) = struct.unpack_from("<H", fmt, 24)
    if channels == 0 or rate == 0:
        raise MalformedWav("zero channels or sample rate")
    if code == _FMT_PCM and bits in (16, 24, 32):
        pass
    elif code == _FMT_FLOAT and bits in (32, 64):
        pass
    else:
        raise UnsupportedEncoding(f"format code {code} with {bits} bits per sample")
    width = bits // 8
    if block_align != width * channels:
        raise MalformedWav(f"block_align {block_align} inconsistent with {channels}x{bits} bit")

    n_frames = len(data) // block_align
    raw = data[: n_frames * block_align]
    if code == _FMT_FLOAT:
        x = np.frombuffer(raw, dtype=f"<f{width}").astype(np.float64)
        x = np.clip(np.nan_to_num(x, nan=0.0), -1.0, 1.0)
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v / float(1 << 23)
    else:
        x = np.frombuffer(raw, dtype=f"<i{width}").astype(np.float64) / float(1 << (bits - 1))
    x = x.reshape(n_frames, channels)
    return rate, (x[:, 0].copy() if channels == 1 else x.mean(axis=1))


def write_wav(path, rate: int, samples, encoding: str = "float32") -> None:
    """Write samples (frames, or frames x channels) as PCM16 or float32 WAV.

    An ``int16`` array is written verbatim as PCM16 regardless of ``encoding``.
    """
    x = np.asarray(samples)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if x.dtype == np.int16 or encoding == "pcm16":
        if x.dtype != np.int16:
            x = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
        code, bits, payload = _FMT_PCM, 16, x.astype("<i2").tobytes()
    elif encoding == "float32":
        code, bits, payload = _FMT_FLOAT, 32, x.astype("<f4").tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", code, channels, rate, rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


# -- segmentation -----------------------------------------------------------

def resample_linear(samples: np.ndarray, rate: int, target: int = SAMPLE_RATE) -> np.ndarray:
    if rate == target:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * target / rate))
    t = np.arange(n_out) * (rate / target)
    return np.interp(t, np.arange(len(samples)), samples)


def segment_recording(samples: np.ndarray, meta: RecordingMeta, window_len: int = WINDOW_LEN,
                      resample: bool = False) -> list[AudioSegment]:
    """Cut a recording into consecutive non-overlapping windows.

    The trailing partial window is dropped. Segments are views into the
    (possibly resampled) recording.
    """
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    samples = np.asarray(samples, dtype=np.float64)
    if meta.sample_rate != SAMPLE_RATE:
        if not resample:
            raise RateMismatch(f"{meta.file_path}: {meta.sample_rate} Hz, expected {SAMPLE_RATE}")
        samples = resample_linear(samples, meta.sample_rate)
        meta = RecordingMeta(meta.file_path, meta.subject_id, meta.label, SAMPLE_RATE, len(samples))
    if not np.all(np.isfinite(samples)):
        raise MalformedWav(f"{meta.file_path}: non-finite samples")
    n = len(samples) // window_len
    return [AudioSegment(samples[i * window_len:(i + 1) * window_len], meta.label, meta, i * window_len)
            for i in range(n)]


def reshape_to_matrix(segment: AudioSegment, width: int = MATRIX_WIDTH) -> SampleMatrix:
    n = len(segment.samples)
    if width * width != n:
        raise ShapeError(f"{width}x{width} != {n} samples")
    return SampleMatrix(np.asarray(segment.samples).reshape(width, width), segment.label)


def normalize_segment(segment: AudioSegment, mode: str = "standardize") -> AudioSegment:
    x = np.asarray(segment.samples, dtype=np.float64)
    if mode == "none":
        return segment
    if mode == "standardize":
        std = x.std()
        y = (x - x.mean()) / std if std > 0 else np.zeros_like(x)
    elif mode == "minmax":
        lo, hi = x.min(), x.max()
        y = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return AudioSegment(y, segment.label, segment.source, segment.offset)


def normalize_rows(samples: np.ndarray, mode: str) -> np.ndarray:
    """Row-wise ``normalize_segment`` for a (count, window_len) block."""
    x = np.asarray(samples, dtype=np.float64)
    if mode == "none":
        return x
    if mode == "standardize":
        std = x.std(axis=1, keepdims=True)
        centred = x - x.mean(axis=1, keepdims=True)
        return np.divide(centred, std, out=np.zeros_like(x), where=std > 0)
    if mode == "minmax":
        lo, hi = x.min(axis=1, keepdims=True), x.max(axis=1, keepdims=True)
        return np.divide(x - lo, hi - lo, out=np.zeros_like(x), where=hi > lo)
    raise ValueError(f"unknown normalization mode {mode!r}")


# -- split ------------------------------------------------------------------

def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5 + 1e-9))


def _stratified_quota(labels: np.ndarray, n_test: int, fraction: float) -> dict[int, int]:
    classes = np.unique(labels)
    exact = {c: fraction * np.count_nonzero(labels == c) for c in classes}
    quota = {c: int(math.floor(v)) for c, v in exact.items()}
    short = n_test - sum(quota.values())
    # largest remainder first; class id breaks ties
    for c in sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))[:max(short, 0)]:
        quota[c] += 1
    return quota


def make_split(segments: Sequence, test_fraction: float = TEST_FRACTION, seed: int = 0,
               stratified: bool = True, groups: Sequence | None = None) -> DatasetSplit:
    """Partition ``segments`` into train/test.

    ``|test| == round(test_fraction * N)``. With ``stratified`` each class
    contributes within one item of its proportional share. Passing
    ``groups`` (e.g. subject ids) makes the split group-disjoint instead;
    whole groups move to test until the target count is reached, so the
    test size is then approximate.
    """
    n = len(segments)
    if n == 0:
        raise EmptyDataset("no segments to split")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = np.array([s.label for s in segments])
    n_test = _round_half_up(test_fraction * n)

    if groups is not None:
        groups = np.asarray(groups)
        uniq = np.unique(groups)
        test_mask = np.zeros(n, bool)
        taken = 0
        for g in uniq[rng.permutation(len(uniq))]:
            members = groups == g
            size = int(members.sum())
            if taken and abs(taken + size - n_test) >= abs(taken - n_test):
                continue
            test_mask |= members
            taken += size
            if taken >= n_test:
                break
    elif stratified:
        test_mask = np.zeros(n, bool)
        for c, q in _stratified_quota(labels, n_test, test_fraction).items():
            idx = np.flatnonzero(labels == c)
            test_mask[idx[rng.permutation(len(idx))[:q]]] = True
    else:
        test_mask = np.zeros(n, bool)
        test_mask[rng.permutation(n)[:n_test]] = True

    test_index = np.flatnonzero(test_mask)
    train_index = np.flatnonzero(~test_mask)
    return DatasetSplit([segments[i] for i in train_index], [segments[i] for i in test_index],
                        seed, train_index, test_index)


# -- manifest ---------------------------------------------------------------

def read_manifest(path) -> list[tuple[str, str, int]]:
    """Parse a ``file_path,subject_id,label`` CSV. Relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"file_path", "subject_id", "label"} - set(reader.fieldnames or ())
        if missing:
            raise EmptyDataset(f"manifest {path} lacks columns {sorted(missing)}")
        for row in reader:
            label = row["label"].strip().lower()
            if label not in CLASS_INDEX:
                raise InvalidClass(f"unknown label {row['label']!r} in {path}")
            fp = Path(row["file_path"].strip())
            rows.append((str(fp if fp.is_absolute() else base / fp), row["subject_id"].strip(),
                         CLASS_INDEX[label]))
    return rows


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("RESHAPE_TRANSFER_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def load_recording(file_path: str, subject_id: str, label: int, window_len: int = WINDOW_LEN,
                   resample: bool = False) -> list[AudioSegment]:
    rate, samples = parse_wav(file_path)
    meta = RecordingMeta(file_path, subject_id, label, rate, len(samples))
    return segment_recording(samples, meta, window_len, resample)


def ingest_manifest(path, window_len: int = WINDOW_LEN, resample: bool = False) -> list[AudioSegment]:
    """Parse and segment every recording listed in a manifest, in manifest order."""
    rows = read_manifest(path)
    if not rows:
        raise EmptyDataset(f"manifest {path} lists no recordings")
    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        per_file = list(pool.map(lambda r: load_recording(*r, window_len, resample), rows))
    segments = [s for segs in per_file for s in segs]
    if not segments:
        raise EmptyDataset(f"no full {window_len}-sample windows in {path}")
    return segments
