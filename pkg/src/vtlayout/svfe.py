"""Shallow visual features: 256-bin grayscale pixel histograms per block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BlockCrop
from .errors import DegenerateInputError

FEATURE_LENGTH = 256

# ITU-R BT.601 luma coefficients, with round-half-up; pinned so every
# implementation of this feature agrees bit for bit.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class ShallowFeature:
    """A 256-long pixel-value histogram, raw counts or normalized mass."""

    values: np.ndarray
    normalized: bool


def to_grayscale(crop: BlockCrop) -> np.ndarray:
    """BT.601 luma of an RGB crop, rounded half-up to uint8."""
    pixels = crop.pixels
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DegenerateInputError(f"expected HxWx3 crop, got shape {pixels.shape}")
    luma = pixels.astype(np.float64) @ _LUMA
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def pixel_histogram(gray: np.ndarray, normalize: bool = True) -> ShallowFeature:
    """Histogram of 8-bit intensities; bin b counts pixels equal to b."""
    if gray.size == 0:
        raise DegenerateInputError("cannot histogram an empty crop")
    counts = np.bincount(gray.ravel(), minlength=FEATURE_LENGTH).astype(np.float64)
    if normalize:
        return ShallowFeature(values=counts / gray.size, normalized=True)
    return ShallowFeature(values=counts, normalized=False)


def extract_shallow(crop: BlockCrop, normalize: bool = True) -> ShallowFeature:
    """Grayscale conversion followed by the pixel histogram."""
    return pixel_histogram(to_grayscale(crop), normalize=normalize)
