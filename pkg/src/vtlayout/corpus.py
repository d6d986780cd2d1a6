"""Corpus data model, COCO-style ingestion, block cropping, and box matching.

Bounding boxes everywhere in this package are (x, y, w, h) tuples in pixel
units with the origin at the top-left corner of the page, matching the COCO
convention that PubLayNet ships in.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .categories import Category
from .errors import (
    FormatError,
    IntegrityError,
    PageLookupError,
    SchemaError,
)

log = logging.getLogger(__name__)

Bbox = tuple[float, float, float, float]


@dataclass(frozen=True)
class PageImage:
    """A document page raster. Pixels are H x W x 3 uint8."""

    page_id: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"page {self.page_id}: pixels must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError(f"page {self.page_id}: empty raster")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BlockAnnotation:
    """One labeled or detected category block on a page.

    `category` is absent for raw detections; `score` is absent for ground
    truth. `ann_id` is a corpus-stable identifier when the block came from an
    annotation file, else None.
    """

    page_id: str
    bbox: Bbox
    category: Category | None = None
    score: float | None = None
    ann_id: str | None = None

    def __post_init__(self):
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"annotation {self.ann_id or ''} on {self.page_id}: non-positive bbox {self.bbox}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"annotation score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class BlockCrop:
    """The pixel region of one candidate block, the unit Stage 2 classifies."""

    source: BlockAnnotation
    pixels: np.ndarray
    label: Category | None = None


@dataclass
class Corpus:
    """Pages plus their block annotations.

    splits maps a split name ("train", "validation", "fold-0", ...) to a
    tuple of page ids; split membership is disjoint. block_texts carries
    ground-truth text per annotation id for synthetic corpora and is None
    for real data.
    """

    pages: list[PageImage]
    annotations: list[BlockAnnotation]
    splits: dict[str, tuple[str, ...]] = field(default_factory=dict)
    block_texts: dict[str, str] | None = None

    def __post_init__(self):
        self._by_page = {p.page_id: p for p in self.pages}
        if len(self._by_page) != len(self.pages):
            raise IntegrityError("duplicate page ids in corpus")
        for ann in self.annotations:
            if ann.page_id not in self._by_page:
                raise IntegrityError(f"annotation references unknown page {ann.page_id!r}")
        seen = set()
        for name, ids in self.splits.items():
            overlap = seen.intersection(ids)
            if overlap:
                raise IntegrityError(f"split {name!r} overlaps another split on pages {sorted(overlap)[:3]}")
            seen.update(ids)

    def page(self, page_id: str) -> PageImage:
        try:
            return self._by_page[page_id]
        except KeyError:
            raise PageLookupError(f"page {page_id!r} not in corpus") from None

    def has_page(self, page_id: str) -> bool:
        return page_id in self._by_page

    def annotations_for(self, page_id: str) -> list[BlockAnnotation]:
        return [a for a in self.annotations if a.page_id == page_id]

    def split_of(self, page_id: str) -> str | None:
        for name, ids in self.splits.items():
            if page_id in ids:
                return name
        return None

    def subset(self, split: str) -> "Corpus":
        """The sub-corpus holding exactly the pages of one split."""
        ids = set(self.splits.get(split, ()))
        pages = [p for p in self.pages if p.page_id in ids]
        anns = [a for a in self.annotations if a.page_id in ids]
        texts = None
        if self.block_texts is not None:
            keep = {a.ann_id for a in anns}
            texts = {k: v for k, v in self.block_texts.items() if k in keep}
        return Corpus(pages=pages, annotations=anns, splits={split: tuple(sorted(ids))}, block_texts=texts)

    def text_for(self, ann_id: str | None) -> str | None:
        if self.block_texts is None or ann_id is None:
            return None
        return self.block_texts.get(ann_id)


# ---------------------------------------------------------------------------
# Geometry

def iou(a: Bbox, b: Bbox) -> float:
    """Intersection over union of two (x, y, w, h) boxes, in [0, 1].

    Areas are continuous (w * h), not inclusive pixel counts. Both boxes
    must have positive area.
    """
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (aw * ah + bw * bh - inter)


def clamp_bbox(bbox: Bbox, width: int, height: int) -> tuple[int, int, int, int]:
    """Clamp a bbox to page bounds and snap to outer pixel coordinates.

    Returns (x0, y0, x1, y1) integer pixel bounds; x1 <= x0 means the box
    fell entirely off the page.
    """
    x, y, w, h = bbox
    x0 = max(0, int(np.floor(x)))
    y0 = max(0, int(np.floor(y)))
    x1 = min(width, int(np.ceil(x + w)))
    y1 = min(height, int(np.ceil(y + h)))
    return x0, y0, x1, y1


def crop_blocks(page: PageImage, annotations: list[BlockAnnotation]) -> list[BlockCrop]:
    """Cut one crop per annotation, clamping boxes that overflow the page.

    Boxes with zero area after clamping are skipped with a warning; order of
    the surviving crops follows the input order.
    """
    crops = []
    for ann in annotations:
        if ann.page_id != page.page_id:
            raise PageLookupError(f"annotation for {ann.page_id!r} cropped against page {page.page_id!r}")
        x0, y0, x1, y1 = clamp_bbox(ann.bbox, page.width, page.height)
        if x1 <= x0 or y1 <= y0:
            log.warning("skipping zero-area block %s on page %s after clamping", ann.ann_id, page.page_id)
            continue
        clamped = ann if (x0, y0, x1 - x0, y1 - y0) == ann.bbox else replace(
            ann, bbox=(float(x0), float(y0), float(x1 - x0), float(y1 - y0)))
        crops.append(BlockCrop(source=clamped, pixels=page.pixels[y0:y1, x0:x1], label=ann.category))
    return crops


def match_predictions(
    preds: list[BlockAnnotation],
    gts: list[BlockAnnotation],
    threshold: float = 0.5,
) -> list[tuple[BlockAnnotation, BlockAnnotation | None]]:
    """Greedy one-to-one matching of predictions to ground truth.

    Candidate pairs at or above the IoU threshold are taken in descending
    IoU order; each prediction and each ground-truth box is used at most
    once. Returns one (pred, gt or None) pair per prediction, in the
    predictions' input order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"match threshold must be in (0, 1], got {threshold}")
    candidates = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            v = iou(p.bbox, g.bbox)
            if v >= threshold:
                candidates.append((v, pi, gi))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    assigned: dict[int, int] = {}
    used_gt: set[int] = set()
    for v, pi, gi in candidates:
        if pi in assigned or gi in used_gt:
            continue
        assigned[pi] = gi
        used_gt.add(gi)
    return [(p, gts[assigned[pi]] if pi in assigned else None) for pi, p in enumerate(preds)]


def unmatched_ground_truth(
    pairs: list[tuple[BlockAnnotation, BlockAnnotation | None]],
    gts: list[BlockAnnotation],
) -> list[BlockAnnotation]:
    """Ground-truth boxes that no prediction was matched to."""
    matched = {id(g) for _, g in pairs if g is not None}
    return [g for g in gts if id(g) not in matched]


# ---------------------------------------------------------------------------
# COCO-style ingestion

_REQUIRED_ARRAYS = ("images", "annotations", "categories")


def _parse_coco(path: Path) -> dict:
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top-level JSON value must be an object")
    for key in _REQUIRED_ARRAYS:
        if not isinstance(doc.get(key), list):
            raise SchemaError(f"{path}: missing or non-array {key!r} section")
    return doc


def _category_map(doc: dict, path: Path) -> dict[int, Category]:
    mapping = {}
    for entry in doc["categories"]:
        name = entry.get("name", "")
        try:
            cat = Category.from_name(name)
        except KeyError:
            raise SchemaError(f"{path}: unknown category name {name!r}") from None
        mapping[int(entry["id"])] = cat
    return mapping


def _parse_annotation_entry(entry, cat_map, path, require_category):
    bbox = entry.get("bbox")
    if not (isinstance(bbox, list) and len(bbox) == 4):
        raise SchemaError(f"{path}: annotation {entry.get('id')} has malformed bbox {bbox!r}")
    cat_id = entry.get("category_id")
    if cat_id is None:
        if require_category:
            raise SchemaError(f"{path}: annotation {entry.get('id')} is missing category_id")
        category = None
    else:
        if int(cat_id) not in cat_map:
            raise SchemaError(f"{path}: annotation {entry.get('id')} uses undeclared category id {cat_id}")
        category = cat_map[int(cat_id)]
    score = entry.get("score")
    return bbox, category, None if score is None else float(score)


def load_coco_annotations(path: str | Path, load_images: bool = True) -> Corpus:
    """Load a COCO-style annotation document into a Corpus.

    Page rasters are read from each image entry's file_name, resolved
    relative to the annotation file. A block_texts.json sidecar next to the
    annotation file is picked up automatically. Image entries may carry a
    "split" key; pages without one land in "train".
    """
    path = Path(path)
    doc = _parse_coco(path)
    cat_map = _category_map(doc, path)

    pages = []
    image_ids = set()
    splits: dict[str, list[str]] = {}
    for entry in doc["images"]:
        page_id = str(entry["id"])
        if page_id in image_ids:
            raise IntegrityError(f"{path}: duplicate image id {page_id}")
        image_ids.add(page_id)
        if load_images:
            file_name = entry.get("file_name")
            if not file_name:
                raise SchemaError(f"{path}: image {page_id} has no file_name")
            img_path = path.parent / file_name
            try:
                with Image.open(img_path) as im:
                    pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except OSError as exc:
                raise IntegrityError(f"{path}: cannot load page raster {img_path}: {exc}") from exc
        else:
            w, h = int(entry.get("width", 1)), int(entry.get("height", 1))
            pixels = np.zeros((h, w, 3), dtype=np.uint8)
        pages.append(PageImage(page_id=page_id, pixels=pixels))
        splits.setdefault(str(entry.get("split", "train")), []).append(page_id)

    annotations = []
    for entry in doc["annotations"]:
        page_id = str(entry["image_id"])
        if page_id not in image_ids:
            raise IntegrityError(f"{path}: annotation {entry.get('id')} references missing image {page_id}")
        bbox, category, score = _parse_annotation_entry(entry, cat_map, path, require_category=True)
        annotations.append(BlockAnnotation(
            page_id=page_id,
            bbox=tuple(float(v) for v in bbox),
            category=category,
            score=score,
            ann_id=str(entry["id"]),
        ))

    sidecar = path.parent / "block_texts.json"
    block_texts = None
    if sidecar.exists():
        try:
            block_texts = {str(k): str(v) for k, v in json.loads(sidecar.read_text(encoding="utf-8")).items()}
        except json.JSONDecodeError as exc:
            raise FormatError(f"{sidecar}: {exc.msg}", offset=exc.pos) from exc

    return Corpus(
        pages=pages,
        annotations=annotations,
        splits={name: tuple(ids) for name, ids in splits.items()},
        block_texts=block_texts,
    )


def load_detections(path: str | Path) -> dict[str, list[BlockAnnotation]]:
    """Parse a detection file (COCO schema plus scores, category optional).

    Returns detections grouped by page id; no rasters are loaded.
    """
    path = Path(path)
    doc = _parse_coco(path)
    cat_map = _category_map(doc, path)
    known_pages = {str(entry["id"]) for entry in doc["images"]}
    by_page: dict[str, list[BlockAnnotation]] = {}
    for entry in doc["annotations"]:
        page_id = str(entry["image_id"])
        if page_id not in known_pages:
            raise IntegrityError(f"{path}: detection {entry.get('id')} references missing image {page_id}")
        bbox, category, score = _parse_annotation_entry(entry, cat_map, path, require_category=False)
        if score is None:
            score = 1.0
        by_page.setdefault(page_id, []).append(BlockAnnotation(
            page_id=page_id,
            bbox=tuple(float(v) for v in bbox),
            category=category,
            score=score,
            ann_id=str(entry.get("id")) if entry.get("id") is not None else None,
        ))
    return by_page


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Persist a corpus as PNG pages + COCO JSON + block-text sidecar.

    The layout mirrors what load_coco_annotations expects, and the bytes
    written are a pure function of the corpus content.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    split_by_page = {}
    for name, ids in corpus.splits.items():
        for pid in ids:
            split_by_page[pid] = name

    images = []
    for page in corpus.pages:
        file_name = f"images/{page.page_id}.png"
        Image.fromarray(page.pixels).save(out_dir / file_name, format="PNG")
        entry = {
            "id": page.page_id,
            "file_name": file_name,
            "width": page.width,
            "height": page.height,
        }
        if page.page_id in split_by_page:
            entry["split"] = split_by_page[page.page_id]
        images.append(entry)

    categories = [{"id": int(c), "name": c.label} for c in Category]
    annotations = []
    for i, ann in enumerate(corpus.annotations):
        entry = {
            "id": ann.ann_id if ann.ann_id is not None else str(i),
            "image_id": ann.page_id,
            "bbox": [float(v) for v in ann.bbox],
        }
        if ann.category is not None:
            entry["category_id"] = int(ann.category)
        if ann.score is not None:
            entry["score"] = float(ann.score)
        annotations.append(entry)

    doc = {"images": images, "annotations": annotations, "categories": categories}
    (out_dir / "annotations.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    if corpus.block_texts is not None:
        (out_dir / "block_texts.json").write_text(
            json.dumps(dict(sorted(corpus.block_texts.items())), indent=1, sort_keys=True),
            encoding="utf-8")
    return out_dir / "annotations.json"


def category_counts(annotations: list[BlockAnnotation]) -> dict[Category, int]:
    counts = {c: 0 for c in Category}
    for ann in annotations:
        if ann.category is not None:
            counts[ann.category] += 1
    return counts
