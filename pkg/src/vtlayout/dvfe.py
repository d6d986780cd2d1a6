"""Deep visual features: pad to square, embed with a small CNN, recalibrate
channels with a squeeze-and-excitation gate, and global-average-pool.

Because the SE gate scales each channel uniformly over space, pooling
commutes with it: pool(se(map)) == scale(pool(map)) * pool(map). The
pipeline therefore caches the pre-gate pooled vector per block, and the
fusion classifier owns the SE weights and trains them jointly with its head.
The map-level operations here remain the reference semantics and are tested
against the vector route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import nn
from .corpus import BlockCrop
from .errors import ConfigurationError, DegenerateInputError, ShapeError

INPUT_SIZE = 128
PAD_VALUE = 255


def pad_resize(crop: BlockCrop) -> np.ndarray:
    """Square-pad with white, bilinear-resize to 128x128, scale to [0, 1].

    The shorter dimension is padded symmetrically (odd leftovers go to the
    bottom/right), so content keeps its aspect ratio and stays centered.
    """
    pixels = crop.pixels
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.size == 0:
        raise DegenerateInputError(f"cannot embed crop of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    canvas = np.full((side, side, 3), PAD_VALUE, dtype=np.uint8)
    canvas[top:top + h, left:left + w] = pixels
    resized = Image.fromarray(canvas).resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Backbones

class TinyBackbone:
    """Four depthwise-separable blocks after a strided stem; C = 128.

    Total stride 32, so 128-pixel inputs produce 4x4 feature maps. Meant to
    be used frozen at random initialization for desk-scale experiments where
    no pretrained weights exist. Inputs are centered on the white page
    background (so blank regions activate nothing and ink carries the
    signal) and the output map carries a fixed gain that brings pooled
    features of document crops to order unity.
    """

    name = "tiny"
    channels = 128
    input_offset = -1.0
    output_gain = 16.0
    _plan = ((16, 32), (32, 64), (64, 128), (128, 128))

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = weights
        _check_shapes(self.name, weights, self.expected_shapes())

    @classmethod
    def expected_shapes(cls) -> dict[str, tuple]:
        shapes = {"stem.w": (3, 3, 3, 16), "stem.b": (16,)}
        for i, (cin, cout) in enumerate(cls._plan, start=1):
            shapes[f"block{i}.dw.w"] = (3, 3, cin)
            shapes[f"block{i}.dw.b"] = (cin,)
            shapes[f"block{i}.pw.w"] = (1, 1, cin, cout)
            shapes[f"block{i}.pw.b"] = (cout,)
        return shapes

    @classmethod
    def initialize(cls, seed: int = 0) -> "TinyBackbone":
        rng = np.random.default_rng([seed, 0x7e11])
        gain = np.sqrt(6.0)  # He-uniform keeps activations alive through depth
        weights = {}
        for name, shape in cls.expected_shapes().items():
            if name.endswith(".b"):
                weights[name] = np.zeros(shape, dtype=np.float32)
            elif ".dw." in name:
                weights[name] = nn.uniform_fan_in(rng, shape, 9, gain).astype(np.float32)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                weights[name] = nn.uniform_fan_in(rng, shape, fan_in, gain).astype(np.float32)
        return cls(weights)

    def embed_batch(self, batch: np.ndarray) -> np.ndarray:
        x = _check_batch(batch) + np.float32(self.input_offset)
        w = self.weights
        x = nn.relu(nn.conv2d(x, w["stem.w"], w["stem.b"], stride=2, pad=1))
        for i in range(1, 5):
            x = nn.relu(nn.depthwise_conv2d(x, w[f"block{i}.dw.w"], w[f"block{i}.dw.b"], stride=2, pad=1))
            x = nn.relu(nn.conv2d(x, w[f"block{i}.pw.w"], w[f"block{i}.pw.b"]))
        return x * np.float32(self.output_gain)


class ReferenceBackbone:
    """Inverted-residual (expand, depthwise, project) stack; C = 1280.

    The standard lightweight mobile topology: stem stride 2, bottleneck
    settings (t,c,n,s) = (1,16,1,1), (6,24,2,2), (6,32,3,2), (6,64,4,2),
    (6,96,3,1), (6,160,3,2), (6,320,1,1), then a 1x1 conv to 1280 channels.
    Batch norm is assumed folded into conv weights and biases, which is what
    the weight-file exporter produces.
    """

    name = "reference"
    channels = 1280
    _settings = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                 (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = weights
        _check_shapes(self.name, weights, self.expected_shapes())

    @classmethod
    def _blocks(cls):
        cin = 32
        idx = 0
        for t, c, n, s in cls._settings:
            for j in range(n):
                yield idx, cin, c, t, (s if j == 0 else 1)
                cin = c
                idx += 1

    @classmethod
    def expected_shapes(cls) -> dict[str, tuple]:
        shapes = {"stem.w": (3, 3, 3, 32), "stem.b": (32,)}
        for idx, cin, cout, t, _s in cls._blocks():
            mid = cin * t
            if t != 1:
                shapes[f"block{idx}.expand.w"] = (1, 1, cin, mid)
                shapes[f"block{idx}.expand.b"] = (mid,)
            shapes[f"block{idx}.dw.w"] = (3, 3, mid)
            shapes[f"block{idx}.dw.b"] = (mid,)
            shapes[f"block{idx}.project.w"] = (1, 1, mid, cout)
            shapes[f"block{idx}.project.b"] = (cout,)
        shapes["top.w"] = (1, 1, 320, 1280)
        shapes["top.b"] = (1280,)
        return shapes

    @classmethod
    def initialize(cls, seed: int = 0) -> "ReferenceBackbone":
        rng = np.random.default_rng([seed, 0x3e5])
        gain = np.sqrt(6.0)
        weights = {}
        for name, shape in cls.expected_shapes().items():
            if name.endswith(".b"):
                weights[name] = np.zeros(shape, dtype=np.float32)
            elif ".dw." in name:
                weights[name] = nn.uniform_fan_in(rng, shape, 9, gain).astype(np.float32)
            else:
                fan_in = shape[0] * shape[1] * shape[2]
                weights[name] = nn.uniform_fan_in(rng, shape, fan_in, gain).astype(np.float32)
        return cls(weights)

    def embed_batch(self, batch: np.ndarray) -> np.ndarray:
        x = _check_batch(batch)
        w = self.weights
        x = nn.relu6(nn.conv2d(x, w["stem.w"], w["stem.b"], stride=2, pad=1))
        for idx, cin, cout, t, s in self._blocks():
            inp = x
            if t != 1:
                x = nn.relu6(nn.conv2d(x, w[f"block{idx}.expand.w"], w[f"block{idx}.expand.b"]))
            x = nn.relu6(nn.depthwise_conv2d(x, w[f"block{idx}.dw.w"], w[f"block{idx}.dw.b"], stride=s, pad=1))
            x = nn.conv2d(x, w[f"block{idx}.project.w"], w[f"block{idx}.project.b"])
            if s == 1 and cin == cout:
                x = x + inp
        return nn.relu6(nn.conv2d(x, w["top.w"], w["top.b"]))


BACKBONES = {"tiny": TinyBackbone, "reference": ReferenceBackbone}


def _check_batch(batch: np.ndarray) -> np.ndarray:
    if batch.ndim != 4 or batch.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ShapeError(f"backbone input must be (N, {INPUT_SIZE}, {INPUT_SIZE}, 3), got {batch.shape}")
    return batch.astype(np.float32, copy=False)


def _check_shapes(name, weights, expected):
    for tensor, shape in expected.items():
        if tensor not in weights:
            raise ShapeError(f"backbone {name!r}: missing tensor {tensor!r}")
        if tuple(weights[tensor].shape) != shape:
            raise ShapeError(
                f"backbone {name!r}: tensor {tensor!r} has shape {tuple(weights[tensor].shape)}, "
                f"expected {shape}")
    extra = set(weights) - set(expected)
    if extra:
        raise ShapeError(f"backbone {name!r}: unexpected tensors {sorted(extra)}")


def build_backbone(kind: str, weights_path=None, seed: int = 0):
    if kind not in BACKBONES:
        raise ConfigurationError(f"unknown backbone {kind!r}; expected one of {sorted(BACKBONES)}")
    cls = BACKBONES[kind]
    if weights_path is None:
        return cls.initialize(seed)
    tensors, meta = nn.load_tensor_map(weights_path)
    if meta.get("architecture") != kind:
        raise ShapeError(
            f"weight file {weights_path} holds architecture {meta.get('architecture')!r}, requested {kind!r}")
    return cls(tensors)


def save_backbone(backbone, path) -> None:
    nn.save_tensor_map(path, backbone.weights, {
        "architecture": backbone.name,
        "channels": backbone.channels,
    })


def backbone_embed(inputs: np.ndarray, model) -> np.ndarray:
    """Feature map of the last convolutional block for one 128x128x3 input."""
    if inputs.shape != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ShapeError(f"expected ({INPUT_SIZE}, {INPUT_SIZE}, 3) input, got {inputs.shape}")
    return model.embed_batch(inputs[None].astype(np.float32))[0].astype(np.float64)


# ---------------------------------------------------------------------------
# Squeeze-and-excitation

@dataclass
class SEBlock:
    """Channel gate: squeeze to per-channel means, excite through a
    bottleneck of two affine maps, scale channels by the sigmoid output."""

    w1: np.ndarray  # (C/r, C)
    b1: np.ndarray  # (C/r,)
    w2: np.ndarray  # (C, C/r)
    b2: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def initialize(cls, channels: int, ratio: int = 16, seed: int = 0) -> "SEBlock":
        if channels % ratio != 0:
            raise ConfigurationError(f"SE ratio {ratio} does not divide channel count {channels}")
        hidden = channels // ratio
        rng = np.random.default_rng([seed, 0x5e])
        return cls(
            w1=nn.uniform_fan_in(rng, (hidden, channels), channels),
            b1=np.zeros(hidden),
            w2=nn.uniform_fan_in(rng, (channels, hidden), hidden),
            b2=np.zeros(channels),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"se.w1": self.w1, "se.b1": self.b1, "se.w2": self.w2, "se.b2": self.b2}

    def scale_factors(self, z: np.ndarray) -> np.ndarray:
        """Per-channel gates in (0, 1) for pooled channel vector(s) z."""
        a1 = z @ self.w1.T + self.b1
        a2 = nn.relu(a1) @ self.w2.T + self.b2
        return nn.sigmoid(a2)


def se_gate_forward(z: np.ndarray, se: SEBlock):
    """out = scale(z) * z for a batch of pooled vectors; returns a cache
    for the matching backward pass."""
    a1 = z @ se.w1.T + se.b1
    r = nn.relu(a1)
    a2 = r @ se.w2.T + se.b2
    s = nn.sigmoid(a2)
    return s * z, (z, a1, r, s)


def se_gate_backward(dout: np.ndarray, cache, se: SEBlock):
    """Gradients of a loss through se_gate_forward.

    Returns (dz, param_grads) where dz includes both the direct s*dout term
    and the indirect path through the gate's dependence on z.
    """
    z, a1, r, s = cache
    da2 = dout * z * s * (1.0 - s)
    dw2 = da2.T @ r
    db2 = da2.sum(axis=0)
    da1 = (da2 @ se.w2) * (a1 > 0)
    dw1 = da1.T @ z
    db1 = da1.sum(axis=0)
    dz = dout * s + da1 @ se.w1
    return dz, {"se.w1": dw1, "se.b1": db1, "se.w2": dw2, "se.b2": db2}


def se_recalibrate(fmap: np.ndarray, se: SEBlock) -> np.ndarray:
    """Scale each channel of an (H, W, C) map by its excitation gate."""
    if fmap.ndim != 3 or fmap.shape[2] != se.channels:
        raise ShapeError(f"feature map {fmap.shape} does not match SE channel count {se.channels}")
    z = fmap.mean(axis=(0, 1))
    return fmap * se.scale_factors(z)


def global_average_pool(fmap: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of an (H, W, C) map."""
    if fmap.ndim != 3:
        raise ShapeError(f"expected (H, W, C) map, got shape {fmap.shape}")
    return fmap.mean(axis=(0, 1))


def se_pool_grads(fmap: np.ndarray, se: SEBlock, upstream: np.ndarray):
    """Analytic gradients of y = upstream . pool(se_recalibrate(fmap)).

    Returns (d_fmap, se_param_grads); the numerical counterpart for tests is
    central finite differences on the same scalar.
    """
    z = fmap.mean(axis=(0, 1))
    _, cache = se_gate_forward(z[None], se)
    dz, param_grads = se_gate_backward(upstream[None], cache, se)
    h, w = fmap.shape[:2]
    d_fmap = np.broadcast_to(dz[0] / (h * w), fmap.shape).copy()
    return d_fmap, param_grads


# ---------------------------------------------------------------------------
# Composition

def extract_deep(crop: BlockCrop, model, se: SEBlock) -> np.ndarray:
    """Full deep-feature pipeline: pad, embed, SE-recalibrate, pool."""
    fmap = backbone_embed(pad_resize(crop), model)
    return global_average_pool(se_recalibrate(fmap, se))


def embed_pooled(crop: BlockCrop, model) -> np.ndarray:
    """Pooled backbone embedding before the SE gate; this is what the
    feature cache stores so the gate can be trained downstream."""
    return global_average_pool(backbone_embed(pad_resize(crop), model))


def embed_pooled_batch(crops: list[BlockCrop], model, batch_size: int = 64) -> np.ndarray:
    """embed_pooled over many crops, batched through the backbone."""
    out = np.empty((len(crops), model.channels), dtype=np.float64)
    for start in range(0, len(crops), batch_size):
        chunk = crops[start:start + batch_size]
        batch = np.stack([pad_resize(c) for c in chunk]).astype(np.float32)
        fmaps = model.embed_batch(batch)
        out[start:start + len(chunk)] = fmaps.mean(axis=(1, 2))
    return out
