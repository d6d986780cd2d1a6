"""Minimal numpy neural-network primitives and the portable weight format.

Everything here is deliberately simple and deterministic: convolutions via
sliding windows + matmul, a hand-rolled Adam, and uniform fan-in weight
initialization driven by numpy Generators.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import IntegrityError, ShapeError

MAGIC = b"VTW1"


# ---------------------------------------------------------------------------
# Initialization

def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    """Zero-mean uniform init with limit gain * sqrt(1 / fan_in)."""
    limit = gain * np.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Activations

def relu(x):
    return np.maximum(x, 0.0)


def relu6(x):
    return np.clip(x, 0.0, 6.0)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Convolutions (NHWC)

def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Standard convolution. x: (N,H,W,Cin), w: (kh,kw,Cin,Cout), b: (Cout,)."""
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d input has {x.shape[3]} channels, kernel expects {cin}")
    xp = _pad_hw(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, Cin, kh, kw)
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout)
    return out.reshape(n, ho, wo, cout) + b


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Per-channel convolution. w: (kh,kw,C), b: (C,)."""
    kh, kw, c = w.shape
    if x.shape[3] != c:
        raise ShapeError(f"depthwise input has {x.shape[3]} channels, kernel expects {c}")
    xp = _pad_hw(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, C, kh, kw)
    out = np.einsum("nhwckl,klc->nhwc", win, w, optimize=True)
    return out + b


# ---------------------------------------------------------------------------
# Optimizer

class Adam:
    """Adam over a dict of named parameter arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# Portable tensor-map files
#
# Layout: MAGIC, u32 manifest length, manifest JSON (utf-8), then each
# tensor's row-major float32 payload concatenated in manifest order. The
# manifest carries arbitrary metadata plus the tensor name/shape table.

def save_tensor_map(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    manifest = dict(metadata)
    manifest["tensors"] = [
        {"name": name, "shape": list(t.shape)} for name, t in tensors.items()
    ]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype=np.float32).tobytes())


def load_tensor_map(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a tensor-map file")
    (mlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + mlen:
        raise IntegrityError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt manifest: {exc}") from exc
    offset = 8 + mlen
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(int(v) for v in entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = data[offset:offset + nbytes]
        if len(chunk) < nbytes:
            raise IntegrityError(f"{path}: truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise IntegrityError(f"{path}: {len(data) - offset} trailing bytes after tensor payloads")
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta
