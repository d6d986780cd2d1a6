"""Orchestration: wiring config, corpus, extractors, cache, and models.

Features cross the cache boundary as float32 regardless of whether they
were just computed or read back, so a run's numbers never depend on the
cache state it happened to start from.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dvfe, svfe, tfe
from .cache import FeatureCache, block_key
from .categories import Category
from .config import PipelineConfig, stable_hash
from .corpus import BlockCrop, Corpus, crop_blocks, match_predictions, unmatched_ground_truth
from .errors import ConfigurationError, DataError
from .evaluation import ConfusionMatrix, EvalReport, confusion, prf
from .fusion import FeatureBundle, FusionModel, normalize_mask, predict_batch
from .localization import (
    detection_file_localizer,
    ground_truth_localizer,
    perturbed_localizer,
)

EXTRACTORS = ("dvfe", "svfe", "tfe")


@dataclass
class ExtractionStats:
    computed: dict[str, int] = field(default_factory=lambda: {e: 0 for e in EXTRACTORS})
    skipped: dict[str, int] = field(default_factory=lambda: {e: 0 for e in EXTRACTORS})

    @property
    def total_computed(self) -> int:
        return sum(self.computed.values())

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped.values())

    def as_dict(self) -> dict:
        return {"computed": dict(self.computed), "skipped": dict(self.skipped)}


# ---------------------------------------------------------------------------
# Component builders

def build_localizer(config: PipelineConfig, corpus: Corpus):
    section = config.localizer
    if section.kind == "ground_truth":
        return ground_truth_localizer(corpus)
    if section.kind == "detection_file":
        return detection_file_localizer(section.path, score_floor=section.score_floor)
    if section.kind == "perturbed":
        return perturbed_localizer(corpus, jitter=section.jitter, drop_rate=section.drop_rate,
                                   seed=config.localizer_seed)
    raise ConfigurationError(f"unknown localizer kind {section.kind!r}")


def build_backbone(config: PipelineConfig):
    return dvfe.build_backbone(config.dvfe.backbone, config.dvfe.weights_path, seed=config.seed)


def build_reader(config: PipelineConfig, corpus: Corpus):
    return tfe.build_reader(config.tfe.reader, corpus=corpus, ocr_command=config.tfe.ocr_command)


def svfe_fingerprint(config: PipelineConfig) -> str:
    return stable_hash({"extractor": "svfe", "normalize": config.svfe.normalize})


def dvfe_fingerprint(config: PipelineConfig) -> str:
    if config.dvfe.weights_path:
        digest = hashlib.sha256(Path(config.dvfe.weights_path).read_bytes()).hexdigest()[:16]
        weights = f"file:{digest}"
    else:
        weights = f"seed:{config.seed}"
    return stable_hash({"extractor": "dvfe", "backbone": config.dvfe.backbone, "weights": weights})


def tfe_fingerprint(config: PipelineConfig, vocab: tfe.TfidfVocabulary) -> str:
    return stable_hash({
        "extractor": "tfe",
        "reader": config.tfe.reader,
        "ocr_command": config.tfe.ocr_command,
        "upscale_factor": config.tfe.upscale_factor,
        "vocab": vocab.content_hash(),
    })


def _vocab_key(config: PipelineConfig, train_anns) -> str:
    return stable_hash({
        "blocks": sorted(block_key(a) for a in train_anns),
        "reader": config.tfe.reader,
        "ocr_command": config.tfe.ocr_command,
        "upscale_factor": config.tfe.upscale_factor,
        "max_vocab": config.tfe.max_vocab,
    })


def fit_or_load_vocab(corpus: Corpus, config: PipelineConfig,
                      cache: FeatureCache | None = None,
                      require_existing: bool = False) -> tfe.TfidfVocabulary:
    """TF-IDF vocabulary fitted on the training split's block texts."""
    reader = build_reader(config, corpus)
    train_pages = set(corpus.splits.get("train", ()))
    train_anns = [a for a in corpus.annotations
                  if a.category is not None and a.page_id in train_pages]
    if not train_anns:
        raise DataError("no labeled training-split blocks to fit the vocabulary on")
    path = None
    if cache is not None:
        path = cache.root / "vocab" / f"{_vocab_key(config, train_anns)}.tsv"
        if path.exists():
            return tfe.load_vocabulary(path)
    if require_existing:
        raise DataError(
            "vocabulary not found in cache; run the extract step first to fit it")
    texts = []
    for page_id in sorted({a.page_id for a in train_anns}):
        page = corpus.page(page_id)
        anns = [a for a in train_anns if a.page_id == page_id]
        for crop in crop_blocks(page, anns):
            texts.append(tfe.read_block_text(crop, reader, config.tfe.upscale_factor))
    vocab = tfe.fit_tfidf(texts, max_vocab=config.tfe.max_vocab)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tfe.save_vocabulary(vocab, path)
    return vocab


# ---------------------------------------------------------------------------
# Feature computation

class FeatureComputer:
    """Computes per-crop features for the three extractors, cache-backed."""

    def __init__(self, config: PipelineConfig, corpus: Corpus, mask,
                 cache: FeatureCache | None = None, vocab=None,
                 stats: ExtractionStats | None = None):
        self.config = config
        self.mask = normalize_mask(mask)
        self.cache = cache
        self.stats = stats if stats is not None else ExtractionStats()
        self.workers = config.workers or os.cpu_count() or 1
        self.backbone = build_backbone(config) if "dvfe" in self.mask else None
        self.reader = build_reader(config, corpus) if "tfe" in self.mask else None
        if "tfe" in self.mask:
            self.vocab = vocab if vocab is not None else fit_or_load_vocab(corpus, config, cache)
        else:
            self.vocab = None
        self.fingerprints = {}
        if "svfe" in self.mask:
            self.fingerprints["svfe"] = svfe_fingerprint(config)
        if "dvfe" in self.mask:
            self.fingerprints["dvfe"] = dvfe_fingerprint(config)
        if "tfe" in self.mask:
            self.fingerprints["tfe"] = tfe_fingerprint(config, self.vocab)

    @property
    def channels(self) -> int:
        return self.backbone.channels if self.backbone is not None else 0

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) if self.vocab is not None else 0

    def _map(self, fn, crops):
        if self.workers <= 1 or len(crops) < 8:
            return [fn(c) for c in crops]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, crops))

    def _compute(self, extractor: str, crops: list[BlockCrop]):
        if extractor == "svfe":
            normalize = self.config.svfe.normalize
            return self._map(lambda c: svfe.extract_shallow(c, normalize=normalize).values, crops)
        if extractor == "dvfe":
            return dvfe.embed_pooled_batch(crops, self.backbone)
        if extractor == "tfe":
            factor = self.config.tfe.upscale_factor
            return self._map(lambda c: tfe.extract_text_feature(c, self.reader, self.vocab, factor), crops)
        raise AssertionError(extractor)

    def vectors(self, extractor: str, crops: list[BlockCrop], compute: bool = True):
        """Feature vectors for crops, via the cache where possible.

        With compute=False, returns (vectors, missing_keys) and leaves
        missing rows unfilled.
        """
        n = len(crops)
        out: list[np.ndarray | None] = [None] * n
        miss = []
        fp = self.fingerprints[extractor]
        if self.cache is not None:
            for i, crop in enumerate(crops):
                hit = self.cache.get(extractor, fp, block_key(crop.source))
                if hit is None:
                    miss.append(i)
                else:
                    out[i] = hit
        else:
            miss = list(range(n))
        if not compute:
            self.stats.skipped[extractor] += n - len(miss)
            return out, [block_key(crops[i].source) for i in miss]
        if miss:
            computed = self._compute(extractor, [crops[i] for i in miss])
            for j, i in enumerate(miss):
                # Round-trip through float32 so cached and fresh values match.
                vec = np.asarray(computed[j], dtype=np.float32).astype(np.float64)
                out[i] = vec
                if self.cache is not None:
                    self.cache.put(extractor, fp, block_key(crops[i].source), vec)
        self.stats.computed[extractor] += len(miss)
        self.stats.skipped[extractor] += n - len(miss)
        return out, []


# ---------------------------------------------------------------------------
# Feature tables over corpus annotations

@dataclass
class FeatureTable:
    ann_ids: list[str | None]
    keys: list[str]
    labels: np.ndarray
    splits: list[str | None]
    deep: np.ndarray | None
    shallow: np.ndarray | None
    text: np.ndarray | None

    @property
    def channels(self) -> int:
        return 0 if self.deep is None else self.deep.shape[1]

    @property
    def vocab_size(self) -> int:
        return 0 if self.text is None else self.text.shape[1]

    def __len__(self) -> int:
        return len(self.keys)

    def indices_for_split(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=np.int64)

    def indices_for_ann_ids(self, ann_ids) -> np.ndarray:
        wanted = set(ann_ids)
        return np.array([i for i, a in enumerate(self.ann_ids) if a in wanted], dtype=np.int64)

    def bundles(self, indices, mask) -> list[FeatureBundle]:
        mask = normalize_mask(mask)
        out = []
        for i in indices:
            out.append(FeatureBundle(
                deep=self.deep[i] if "dvfe" in mask and self.deep is not None else None,
                shallow=self.shallow[i] if "svfe" in mask and self.shallow is not None else None,
                text=self.text[i] if "tfe" in mask and self.text is not None else None,
                label=Category(int(self.labels[i])),
            ))
        return out


def extract_features(corpus: Corpus, config: PipelineConfig, mask,
                     cache: FeatureCache | None = None, compute: bool = True,
                     stats: ExtractionStats | None = None):
    """Features for every labeled annotation, grouped by page.

    Returns (FeatureTable, FeatureComputer). With compute=False, raises a
    DataError listing the missing (block, extractor) cache entries instead
    of computing them.
    """
    computer = FeatureComputer(config, corpus, mask, cache=cache, stats=stats)
    anns = [a for a in corpus.annotations if a.category is not None]
    split_of_page = {}
    for name, ids in corpus.splits.items():
        for pid in ids:
            split_of_page[pid] = name

    order: list[int] = []
    crops: list[BlockCrop] = []
    by_page: dict[str, list[int]] = {}
    for i, ann in enumerate(anns):
        by_page.setdefault(ann.page_id, []).append(i)
    for page_id in sorted(by_page):
        page = corpus.page(page_id)
        idx = by_page[page_id]
        page_crops = crop_blocks(page, [anns[i] for i in idx])
        if len(page_crops) != len(idx):
            raise DataError(f"page {page_id}: an annotation degenerated to zero area")
        crops.extend(page_crops)
        order.extend(idx)

    arrays: dict[str, np.ndarray | None] = {"dvfe": None, "svfe": None, "tfe": None}
    missing: list[tuple[str, str]] = []
    for extractor in EXTRACTORS:
        if extractor not in computer.mask:
            continue
        vectors, miss_keys = computer.vectors(extractor, crops, compute=compute)
        missing.extend((key, extractor) for key in miss_keys)
        if not miss_keys:
            arrays[extractor] = np.stack(vectors)
    if missing:
        preview = ", ".join(f"{k}/{e}" for k, e in missing[:10])
        raise DataError(
            f"feature cache is missing {len(missing)} entries; run the extract step first "
            f"(first misses: {preview})")

    n = len(crops)
    table = FeatureTable(
        ann_ids=[crops[i].source.ann_id for i in range(n)],
        keys=[block_key(crops[i].source) for i in range(n)],
        labels=np.array([int(crops[i].label) for i in range(n)], dtype=np.int64),
        splits=[split_of_page.get(crops[i].source.page_id) for i in range(n)],
        deep=arrays["dvfe"],
        shallow=arrays["svfe"],
        text=arrays["tfe"],
    )
    return table, computer


# ---------------------------------------------------------------------------
# Localizer-driven evaluation

def evaluate_with_localizer(corpus: Corpus, config: PipelineConfig, model: FusionModel,
                            cache: FeatureCache | None = None,
                            stats: ExtractionStats | None = None) -> EvalReport:
    """Stage 1 + Stage 2 end to end on the configured evaluation split."""
    split = config.eval.split
    if split not in corpus.splits:
        raise DataError(f"corpus has no split {split!r}; available: {sorted(corpus.splits)}")
    localizer = build_localizer(config, corpus)
    computer = FeatureComputer(config, corpus, model.mask, cache=cache, stats=stats)
    if "dvfe" in model.mask and computer.channels != model.channels:
        raise ConfigurationError(
            f"backbone channel count {computer.channels} does not match model C={model.channels}")
    if "tfe" in model.mask and computer.vocab_size != model.vocab_size:
        raise ConfigurationError(
            f"vocabulary size {computer.vocab_size} does not match model V={model.vocab_size}")

    matrix = ConfusionMatrix.empty()
    strict = config.eval.mode == "strict"
    for page_id in sorted(corpus.splits[split]):
        page = corpus.page(page_id)
        gts = corpus.annotations_for(page_id)
        boxes = localizer.localize(page)
        crops = crop_blocks(page, boxes)
        if crops:
            bundles = _crop_bundles(computer, crops, model.mask)
            categories = [p.category for p in predict_batch(model, bundles)]
        else:
            categories = []
        surviving = [c.source for c in crops]
        pairs = match_predictions(surviving, gts, threshold=config.corpus.match_iou)
        matched, unmatched_pred = [], []
        for (pred_ann, gt), category in zip(pairs, categories):
            if gt is None:
                unmatched_pred.append(category)
            else:
                matched.append((gt.category, category))
        unmatched_gt = [g.category for g in unmatched_ground_truth(pairs, gts)]
        page_matrix = confusion(matched,
                                unmatched_gt=() if strict else unmatched_gt,
                                unmatched_pred=() if strict else unmatched_pred)
        matrix.counts += page_matrix.counts
        matrix.unmatched_gt += page_matrix.unmatched_gt
        matrix.unmatched_pred += page_matrix.unmatched_pred
    return prf(matrix, config_fingerprint=config.fingerprint())


def _crop_bundles(computer: FeatureComputer, crops: list[BlockCrop], mask) -> list[FeatureBundle]:
    mask = normalize_mask(mask)
    vecs = {}
    for extractor in EXTRACTORS:
        if extractor in mask:
            vecs[extractor], _ = computer.vectors(extractor, crops)
    out = []
    for i in range(len(crops)):
        out.append(FeatureBundle(
            deep=vecs["dvfe"][i] if "dvfe" in mask else None,
            shallow=vecs["svfe"][i] if "svfe" in mask else None,
            text=vecs["tfe"][i] if "tfe" in mask else None,
            label=crops[i].label,
        ))
    return out
