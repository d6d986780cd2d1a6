"""On-disk feature cache.

One record file per (extractor, extractor fingerprint, block key), holding a
small header plus the float32 vector. Record bytes are a pure function of
the value, so an interrupted extraction resumed later converges on exactly
the bytes an uninterrupted run would have produced.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .corpus import BlockAnnotation
from .errors import IntegrityError

RECORD_MAGIC = b"VTFC"
RECORD_VERSION = 1
_FP_LEN = 16


def block_key(ann: BlockAnnotation) -> str:
    """Content-addressed key: same page and box, same cached feature."""
    x, y, w, h = ann.bbox
    return f"{ann.page_id}+{x!r}+{y!r}+{w!r}+{h!r}"


class FeatureCache:
    def __init__(self, root):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _path(self, extractor: str, fingerprint: str, key: str) -> Path:
        return self.root / extractor / fingerprint / f"{key}.vtf"

    def get(self, extractor: str, fingerprint: str, key: str) -> np.ndarray | None:
        path = self._path(extractor, fingerprint, key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            self.misses += 1
            return None
        vector = _decode(data, path, fingerprint)
        self.hits += 1
        return vector

    def put(self, extractor: str, fingerprint: str, key: str, vector: np.ndarray) -> None:
        path = self._path(extractor, fingerprint, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = _encode(vector, fingerprint)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)

    def record_count(self, extractor: str | None = None) -> int:
        base = self.root / extractor if extractor else self.root
        if not base.exists():
            return 0
        return sum(1 for p in base.rglob("*.vtf"))


def _encode(vector: np.ndarray, fingerprint: str) -> bytes:
    fp = fingerprint.encode("ascii")
    if len(fp) != _FP_LEN:
        raise ValueError(f"fingerprint must be {_FP_LEN} chars, got {fingerprint!r}")
    data = np.ascontiguousarray(vector, dtype=np.float32)
    return RECORD_MAGIC + struct.pack("<BI", RECORD_VERSION, data.size) + fp + data.tobytes()


def _decode(data: bytes, path, expected_fingerprint: str) -> np.ndarray:
    header = len(RECORD_MAGIC) + 5 + _FP_LEN
    if len(data) < header or data[:4] != RECORD_MAGIC:
        raise IntegrityError(f"{path}: not a feature cache record")
    version, length = struct.unpack("<BI", data[4:9])
    if version != RECORD_VERSION:
        raise IntegrityError(f"{path}: unsupported cache record version {version}")
    fp = data[9:9 + _FP_LEN].decode("ascii", errors="replace")
    if fp != expected_fingerprint:
        raise IntegrityError(
            f"{path}: stale cache record (fingerprint {fp}, expected {expected_fingerprint})")
    payload = data[header:]
    if len(payload) != 4 * length:
        raise IntegrityError(f"{path}: truncated cache record")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64)
