"""Declarative pipeline configuration.

A single JSON document with per-stage sections; unknown keys are rejected
up front. Every run is identified by a canonical fingerprint: a stable hash
of the normalized config with filesystem locations excluded, so the same
experiment run out of different directories fingerprints identically.
Artifacts that depend on file contents (backbone weights, fitted
vocabularies) carry their own content hashes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .categories import Category
from .errors import ConfigurationError

ENV_CACHE_DIR = "VTLAYOUT_CACHE_DIR"

_WEIGHT_KEYS = tuple(c.label.lower() for c in Category)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def _take(section: str, data: dict, known: set[str]) -> None:
    unknown = set(data) - known
    _require(not unknown, f"unknown config keys in {section}: {sorted(unknown)}")


@dataclass(frozen=True)
class SynthSection:
    pages: int = 100
    width: int = 616
    height: int = 816
    val_fraction: float = 0.2
    weights: dict = field(default_factory=lambda: {
        "text": 7.0, "title": 2.0, "list": 0.25, "table": 1.0 / 3.0, "figure": 1.0 / 3.0})

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSection":
        _take("corpus.synth", data, {"pages", "width", "height", "val_fraction", "weights"})
        weights = data.get("weights")
        if weights is not None:
            _take("corpus.synth.weights", weights, set(_WEIGHT_KEYS))
            base = dict(cls().weights)
            base.update({k: float(v) for k, v in weights.items()})
            weights = base
        kwargs = {k: data[k] for k in ("pages", "width", "height", "val_fraction") if k in data}
        return cls(**kwargs, **({"weights": weights} if weights is not None else {}))

    def category_weights(self) -> dict[Category, float]:
        return {Category.from_name(k): float(v) for k, v in self.weights.items()}


@dataclass(frozen=True)
class CorpusSection:
    path: str | None = None
    match_iou: float = 0.5
    synth: SynthSection = field(default_factory=SynthSection)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSection":
        _take("corpus", data, {"path", "match_iou", "synth"})
        synth = SynthSection.from_dict(data.get("synth", {}))
        out = cls(path=data.get("path"), match_iou=float(data.get("match_iou", 0.5)), synth=synth)
        _require(0.0 < out.match_iou <= 1.0, f"corpus.match_iou must be in (0, 1], got {out.match_iou}")
        return out


@dataclass(frozen=True)
class LocalizerSection:
    kind: str = "ground_truth"
    score_floor: float = 0.05
    jitter: float = 0.0
    drop_rate: float = 0.0
    seed: int | None = None
    path: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "LocalizerSection":
        _take("localizer", data, {"kind", "score_floor", "jitter", "drop_rate", "seed", "path"})
        out = cls(
            kind=data.get("kind", "ground_truth"),
            score_floor=float(data.get("score_floor", 0.05)),
            jitter=float(data.get("jitter", 0.0)),
            drop_rate=float(data.get("drop_rate", 0.0)),
            seed=data.get("seed"),
            path=data.get("path"),
        )
        _require(out.kind in {"ground_truth", "detection_file", "perturbed"},
                 f"localizer.kind must be ground_truth, detection_file, or perturbed, got {out.kind!r}")
        _require(out.kind != "detection_file" or out.path is not None,
                 "localizer.kind=detection_file requires localizer.path")
        return out


@dataclass(frozen=True)
class SvfeSection:
    normalize: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "SvfeSection":
        _take("svfe", data, {"normalize"})
        return cls(normalize=bool(data.get("normalize", True)))


@dataclass(frozen=True)
class DvfeSection:
    backbone: str = "tiny"
    weights_path: str | None = None
    se_ratio: int = 16

    @classmethod
    def from_dict(cls, data: dict) -> "DvfeSection":
        _take("dvfe", data, {"backbone", "weights_path", "se_ratio"})
        out = cls(
            backbone=data.get("backbone", "tiny"),
            weights_path=data.get("weights_path"),
            se_ratio=int(data.get("se_ratio", 16)),
        )
        _require(out.backbone in {"tiny", "reference"},
                 f"dvfe.backbone must be tiny or reference, got {out.backbone!r}")
        _require(out.se_ratio >= 1, "dvfe.se_ratio must be positive")
        return out


@dataclass(frozen=True)
class TfeSection:
    reader: str = "ground_truth"
    ocr_command: str | None = None
    max_vocab: int = 4096
    upscale_factor: int = 8

    @classmethod
    def from_dict(cls, data: dict) -> "TfeSection":
        _take("tfe", data, {"reader", "ocr_command", "max_vocab", "upscale_factor"})
        out = cls(
            reader=data.get("reader", "ground_truth"),
            ocr_command=data.get("ocr_command"),
            max_vocab=int(data.get("max_vocab", 4096)),
            upscale_factor=int(data.get("upscale_factor", 8)),
        )
        _require(out.reader in {"ground_truth", "external", "null"},
                 f"tfe.reader must be ground_truth, external, or null, got {out.reader!r}")
        _require(out.reader != "external" or bool(out.ocr_command),
                 "tfe.reader=external requires tfe.ocr_command")
        _require(out.max_vocab >= 1, "tfe.max_vocab must be positive")
        _require(out.upscale_factor >= 1, "tfe.upscale_factor must be at least 1")
        return out


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 64
    epochs: int = 20
    lr: float = 0.001
    seed: int | None = None
    class_weights: bool = False
    weight_decay: float = 0.0
    mask: tuple[str, ...] = ("dvfe", "svfe", "tfe")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainSection":
        _take("train", data, {"batch_size", "epochs", "lr", "seed", "class_weights",
                              "weight_decay", "mask"})
        mask = tuple(sorted(data.get("mask", ("dvfe", "svfe", "tfe"))))
        _require(len(mask) > 0 and set(mask) <= {"dvfe", "svfe", "tfe"},
                 f"train.mask must be a non-empty subset of dvfe/svfe/tfe, got {mask}")
        out = cls(
            batch_size=int(data.get("batch_size", 64)),
            epochs=int(data.get("epochs", 20)),
            lr=float(data.get("lr", 0.001)),
            seed=data.get("seed"),
            class_weights=bool(data.get("class_weights", False)),
            weight_decay=float(data.get("weight_decay", 0.0)),
            mask=mask,
        )
        _require(out.lr > 0, "train.lr must be positive")
        _require(out.batch_size >= 1 and out.epochs >= 1, "train.batch_size and train.epochs must be >= 1")
        return out


@dataclass(frozen=True)
class EvalSection:
    split: str = "validation"
    mode: str = "penalize"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalSection":
        _take("eval", data, {"split", "mode"})
        out = cls(split=data.get("split", "validation"), mode=data.get("mode", "penalize"))
        _require(out.mode in {"penalize", "strict"},
                 f"eval.mode must be penalize or strict, got {out.mode!r}")
        return out


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    cache_dir: str | None = None
    workers: int = 0  # 0 means available parallelism
    corpus: CorpusSection = field(default_factory=CorpusSection)
    localizer: LocalizerSection = field(default_factory=LocalizerSection)
    svfe: SvfeSection = field(default_factory=SvfeSection)
    dvfe: DvfeSection = field(default_factory=DvfeSection)
    tfe: TfeSection = field(default_factory=TfeSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        _take("top level", data, {"seed", "cache_dir", "workers", "corpus", "localizer",
                                  "svfe", "dvfe", "tfe", "train", "eval"})
        return cls(
            seed=int(data.get("seed", 0)),
            cache_dir=data.get("cache_dir"),
            workers=int(data.get("workers", 0)),
            corpus=CorpusSection.from_dict(data.get("corpus", {})),
            localizer=LocalizerSection.from_dict(data.get("localizer", {})),
            svfe=SvfeSection.from_dict(data.get("svfe", {})),
            dvfe=DvfeSection.from_dict(data.get("dvfe", {})),
            tfe=TfeSection.from_dict(data.get("tfe", {})),
            train=TrainSection.from_dict(data.get("train", {})),
            eval=EvalSection.from_dict(data.get("eval", {})),
        )

    # Seed fallbacks: section seeds default to the global one.
    @property
    def localizer_seed(self) -> int:
        return self.seed if self.localizer.seed is None else int(self.localizer.seed)

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else int(self.train.seed)

    def resolve_cache_dir(self) -> Path:
        value = self.cache_dir or os.environ.get(ENV_CACHE_DIR)
        if not value:
            raise ConfigurationError(
                f"no cache directory: set cache_dir in the config or export {ENV_CACHE_DIR}")
        return Path(value)

    def normalized(self) -> dict:
        """Fully resolved config as plain data, with filesystem locations
        replaced by None so relocated runs normalize identically."""
        data = dataclasses.asdict(self)
        data["cache_dir"] = None
        data["corpus"]["path"] = None
        data["localizer"]["path"] = None
        data["dvfe"]["weights_path"] = None
        data["localizer"]["seed"] = self.localizer_seed
        data["train"]["seed"] = self.train_seed
        data["workers"] = 0
        data["train"]["mask"] = sorted(data["train"]["mask"])
        return data

    def fingerprint(self) -> str:
        return stable_hash(self.normalized())


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def apply_overrides(data: dict, overrides) -> dict:
    """Apply dotted-path CLI overrides like train.epochs=5 onto raw config data."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = dotted.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {item!r} descends into a non-object key")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> PipelineConfig:
    if path is None:
        data = {}
    else:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
    data = apply_overrides(data, overrides)
    return PipelineConfig.from_dict(data)
