"""Binary artifact formats.

Every file starts with an 8-byte ASCII magic and ends with a little-endian
CRC32 of all preceding bytes.  Layouts:

* segment cache   ``RSHT0001 | u32 count | count x (u8 label, f32 x window_len)``
* feature file    ``RSFT0001 | u32 count | u32 dim | count x (u8 label, f32 x dim)``
* containers      ``<magic> | u32 version | payload`` (checkpoints, classifier models)

The cache and feature layouts carry their format revision in the magic
suffix; containers carry an explicit version word.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptCache, CorruptFile, VersionMismatch

CACHE_MAGIC = b"RSHT0001"
FEATURE_MAGIC = b"RSFT0001"

_U32 = struct.Struct("<I")


def _with_crc(body: bytes) -> bytes:
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def _check_crc(blob: bytes, magic: bytes, exc: type[CorruptFile]) -> bytes:
    """Validate magic and trailing checksum, return the body without the CRC."""
    if len(blob) < len(magic) + 4 or blob[: len(magic)] != magic:
        raise exc(f"bad magic, expected {magic!r}")
    body, crc = blob[:-4], _U32.unpack(blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise exc("checksum mismatch")
    return body


def _record_dtype(width: int) -> np.dtype:
    return np.dtype([("label", "u1"), ("x", "<f4", (width,))])


def _pack_rows(labels, rows: np.ndarray) -> bytes:
    rows = np.asarray(rows, dtype="<f4")
    rec = np.empty(len(rows), dtype=_record_dtype(rows.shape[1] if rows.ndim == 2 else 0))
    rec["label"] = labels
    if len(rows):
        rec["x"] = rows
    return rec.tobytes()


def write_segment_cache(path, labels, samples: np.ndarray) -> None:
    """Write ``samples`` (count x window_len) and their labels to ``path``."""
    samples = np.asarray(samples, dtype=np.float32).reshape(len(labels), -1)
    body = CACHE_MAGIC + _U32.pack(len(labels)) + _pack_rows(labels, samples)
    Path(path).write_bytes(_with_crc(body))


def read_segment_cache(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(labels uint8[count], samples float32[count, window_len])``.

    The window length is not stored; it is recovered from the payload size.
    """
    body = _check_crc(Path(path).read_bytes(), CACHE_MAGIC, CorruptCache)
    (count,) = _U32.unpack_from(body, 8)
    payload = memoryview(body)[12:]
    if count == 0:
        if len(payload):
            raise CorruptCache("records present but count is zero")
        return np.zeros(0, np.uint8), np.zeros((0, 0), np.float32)
    if len(payload) % count or (len(payload) // count - 1) % 4:
        raise CorruptCache("payload size inconsistent with segment count")
    width = (len(payload) // count - 1) // 4
    rec = np.frombuffer(payload, dtype=_record_dtype(width), count=count)
    return rec["label"].copy(), rec["x"].astype(np.float32)


def write_feature_file(path, labels, features: np.ndarray) -> None:
    features = np.asarray(features, dtype=np.float32)
    count, dim = features.shape
    body = FEATURE_MAGIC + _U32.pack(count) + _U32.pack(dim) + _pack_rows(labels, features)
    Path(path).write_bytes(_with_crc(body))


def read_feature_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(labels uint8[count], features float32[count, dim])``."""
    body = _check_crc(Path(path).read_bytes(), FEATURE_MAGIC, CorruptFile)
    count, dim = struct.unpack_from("<II", body, 8)
    payload = memoryview(body)[16:]
    if len(payload) != count * (1 + 4 * dim):
        raise CorruptFile("payload size inconsistent with header")
    rec = np.frombuffer(payload, dtype=_record_dtype(dim), count=count)
    return rec["label"].copy(), rec["x"].reshape(count, dim).astype(np.float32)


# -- versioned containers --------------------------------------------------

def pack_tensors(tensors: list[np.ndarray], dtype: str = "<f4") -> bytes:
    """Serialise tensors as ``u32 n | n x (u32 rank, u32 dims..., data)``.

    The element type is fixed per container kind (float32 for checkpoints).
    """
    out = [_U32.pack(len(tensors))]
    for t in tensors:
        t = np.ascontiguousarray(t, dtype=dtype)
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(t.tobytes())
    return b"".join(out)


def unpack_tensors(buf: bytes, offset: int = 0, dtype: str = "<f4") -> tuple[list[np.ndarray], int]:
    item = np.dtype(dtype).itemsize
    (n,) = _U32.unpack_from(buf, offset)
    offset += 4
    tensors = []
    for _ in range(n):
        (rank,) = _U32.unpack_from(buf, offset)
        shape = struct.unpack_from(f"<{rank}I", buf, offset + 4)
        offset += 4 + 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) * item
        tensors.append(np.frombuffer(buf, dtype, count=size // item, offset=offset).reshape(shape).copy())
        offset += size
    return tensors, offset


def write_container(path, magic: bytes, version: int, meta: dict, tensors: list[np.ndarray],
                    dtype: str = "<f4") -> None:
    """Write ``magic | u32 version | u32 len | JSON meta | tensors | CRC32``."""
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = magic + _U32.pack(version) + _U32.pack(len(text)) + text + pack_tensors(tensors, dtype)
    Path(path).write_bytes(_with_crc(body))


def read_container(path, magic: bytes, max_version: int, exc: type[CorruptFile] = CorruptFile,
                   dtype: str = "<f4") -> tuple[int, dict, list[np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != magic:
        raise exc(f"bad magic, expected {magic!r}")
    (version,) = _U32.unpack_from(blob, 8)
    if version > max_version:
        raise VersionMismatch(f"format version {version} is newer than supported {max_version}")
    body = _check_crc(blob, magic, exc)
    try:
        (n,) = _U32.unpack_from(body, 12)
        meta = json.loads(body[16:16 + n].decode("utf-8"))
        tensors, end = unpack_tensors(body, 16 + n, dtype)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise exc(f"unreadable payload: {e}") from e
    if end != len(body):
        raise exc("trailing bytes after payload")
    return version, meta, tensors
