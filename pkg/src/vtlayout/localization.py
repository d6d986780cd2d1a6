"""Stage 1: pluggable producers of candidate block boxes per page.

The detector itself is external; this module provides the contract plus
three implementations: a ground-truth oracle, an adapter over detection
files, and a jitter/drop stress harness.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .corpus import BlockAnnotation, Corpus, PageImage, load_detections
from .errors import ConfigurationError, PageLookupError


class Localizer(Protocol):
    def localize(self, page: PageImage) -> list[BlockAnnotation]: ...


@dataclass(frozen=True)
class DetectorReferenceConfig:
    """Reference settings for the external cascade detector stage.

    Documentation-only: preserved so anyone wiring in a real detector can
    reproduce the trained configuration.
    """

    backbone: str = "resnext-101-64x4d"
    epochs: int = 30
    batch_size: int = 8
    optimizer: str = "sgd"
    learning_rate: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0001


class GroundTruthLocalizer:
    """Replays corpus annotations as detections with score 1.0, categories stripped."""

    def __init__(self, corpus: Corpus):
        self._boxes: dict[str, list[BlockAnnotation]] = {}
        for ann in corpus.annotations:
            stripped = replace(ann, category=None, score=1.0)
            self._boxes.setdefault(ann.page_id, []).append(stripped)
        self._known = {p.page_id for p in corpus.pages}

    def localize(self, page: PageImage) -> list[BlockAnnotation]:
        if page.page_id not in self._known:
            raise PageLookupError(f"page {page.page_id!r} not in localizer corpus")
        return list(self._boxes.get(page.page_id, []))


def ground_truth_localizer(corpus: Corpus) -> GroundTruthLocalizer:
    return GroundTruthLocalizer(corpus)


class DetectionFileLocalizer:
    """Serves boxes from a detection file, filtered by a score floor.

    Pages absent from the file yield empty lists: a detector may simply emit
    nothing for a page.
    """

    def __init__(self, path, score_floor: float = 0.05):
        if not 0.0 <= score_floor <= 1.0:
            raise ConfigurationError(f"score floor must be in [0, 1], got {score_floor}")
        self._by_page = load_detections(path)
        self.score_floor = score_floor

    def localize(self, page: PageImage) -> list[BlockAnnotation]:
        boxes = self._by_page.get(page.page_id, [])
        return [b for b in boxes if (b.score or 0.0) >= self.score_floor]


def detection_file_localizer(path, score_floor: float = 0.05) -> DetectionFileLocalizer:
    return DetectionFileLocalizer(path, score_floor=score_floor)


def _page_rng(seed: int, page_id: str) -> np.random.Generator:
    # Independent of page visit order: derive a stream per (seed, page).
    digest = hashlib.sha256(page_id.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class PerturbedLocalizer:
    """Ground truth with uniform translation noise and i.i.d. box drops."""

    def __init__(self, corpus: Corpus, jitter: float = 0.0, drop_rate: float = 0.0, seed: int = 0):
        if jitter < 0:
            raise ConfigurationError(f"jitter must be non-negative, got {jitter}")
        if not 0.0 <= drop_rate < 1.0:
            raise ConfigurationError(f"drop rate must be in [0, 1), got {drop_rate}")
        self._gt = GroundTruthLocalizer(corpus)
        self.jitter = float(jitter)
        self.drop_rate = float(drop_rate)
        self.seed = int(seed)

    def localize(self, page: PageImage) -> list[BlockAnnotation]:
        boxes = self._gt.localize(page)
        if self.jitter == 0.0 and self.drop_rate == 0.0:
            return boxes
        rng = _page_rng(self.seed, page.page_id)
        out = []
        for box in boxes:
            # Fixed number of draws per box: jitter values do not depend on
            # which other boxes happened to be dropped.
            dropped = rng.random() < self.drop_rate
            dx, dy = rng.uniform(-self.jitter, self.jitter, size=2)
            if dropped:
                continue
            x, y, w, h = box.bbox
            out.append(replace(box, bbox=(x + dx, y + dy, w, h)))
        return out


def perturbed_localizer(corpus: Corpus, jitter: float = 0.0, drop_rate: float = 0.0,
                        seed: int = 0) -> PerturbedLocalizer:
    return PerturbedLocalizer(corpus, jitter=jitter, drop_rate=drop_rate, seed=seed)
