"""Two-stage document layout analysis: block localization plus block
classification by fusing deep visual, pixel-histogram, and TF-IDF features."""

from .categories import CATEGORIES, CATEGORY_LABELS, NUM_CATEGORIES, Category
from .corpus import (
    BlockAnnotation,
    BlockCrop,
    Corpus,
    PageImage,
    crop_blocks,
    iou,
    load_coco_annotations,
    match_predictions,
    save_corpus,
)
from .synth import SynthSpec, generate_synthetic_corpus

__version__ = "0.1.0"

__all__ = [
    "BlockAnnotation",
    "BlockCrop",
    "CATEGORIES",
    "CATEGORY_LABELS",
    "Category",
    "Corpus",
    "NUM_CATEGORIES",
    "PageImage",
    "SynthSpec",
    "crop_blocks",
    "generate_synthetic_corpus",
    "iou",
    "load_coco_annotations",
    "match_predictions",
    "save_corpus",
    "__version__",
]
