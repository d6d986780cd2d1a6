"""Text features: OCR through a pluggable reader, then TF-IDF vectors.

The OCR engine is an adapter boundary. GroundTruthReader serves the
synthetic corpus sidecar texts (matching detected boxes to the best
overlapping annotation), ExternalProcessReader shells out to a configured
command, and NullReader silences the branch for visual-only ablations.
"""

from __future__ import annotations

import logging
import math
import re
import shlex
import subprocess
import tempfile
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import BlockCrop, Corpus, iou
from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

DEFAULT_UPSCALE_FACTOR = 8
DEFAULT_AREA_CAP = 64_000_000  # pixels
DEFAULT_MAX_VOCAB = 4096

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def upscale_block(crop: BlockCrop, factor: int = DEFAULT_UPSCALE_FACTOR,
                  resample: str = "bicubic", area_cap: int = DEFAULT_AREA_CAP) -> BlockCrop:
    """Enlarge a crop by an integer factor (small glyphs OCR better big).

    If the scaled area would exceed area_cap, the factor is reduced to the
    largest integer that fits and a warning is logged.
    """
    if factor < 1:
        raise ConfigurationError(f"upscale factor must be >= 1, got {factor}")
    h, w = crop.pixels.shape[:2]
    if h * w * factor * factor > area_cap:
        fitted = max(1, int(math.isqrt(area_cap // (h * w))))
        log.warning("upscale factor %d exceeds area cap for %dx%d crop; using %d",
                    factor, w, h, fitted)
        factor = fitted
    if factor == 1:
        return crop
    modes = {"bicubic": Image.BICUBIC, "nearest": Image.NEAREST}
    img = Image.fromarray(crop.pixels).resize((w * factor, h * factor), modes[resample])
    return replace(crop, pixels=np.asarray(img, dtype=np.uint8))


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop tokens shorter than 2."""
    return [t for t in _TOKEN_RE.findall(text.lower()) if len(t) >= 2]


@dataclass(frozen=True)
class TfidfVocabulary:
    """Frozen vocabulary: sorted unique terms with smoothed idf weights."""

    terms: tuple[str, ...]
    idf: np.ndarray
    document_count: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.terms)})

    def __len__(self) -> int:
        return len(self.terms)

    def index_of(self, term: str) -> int | None:
        return self._index.get(term)

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for term, idf in zip(self.terms, self.idf):
            h.update(f"{term}\t{float(idf)!r}\n".encode("utf-8"))
        h.update(str(self.document_count).encode())
        return h.hexdigest()[:16]


def fit_tfidf(block_texts: list[str], max_vocab: int = DEFAULT_MAX_VOCAB) -> TfidfVocabulary:
    """Fit a vocabulary on block texts.

    Terms are the top max_vocab by document frequency (ties broken
    lexicographically) and stored sorted; idf_t = ln((1+N)/(1+df_t)) + 1
    where N counts all supplied texts, empty ones included.
    """
    if max_vocab < 1:
        raise ConfigurationError(f"max_vocab must be positive, got {max_vocab}")
    df: Counter[str] = Counter()
    n_docs = len(block_texts)
    any_tokens = False
    for text in block_texts:
        tokens = set(tokenize(text))
        if tokens:
            any_tokens = True
        df.update(tokens)
    if not any_tokens:
        raise DataError("cannot fit TF-IDF: every document is empty after tokenization")
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:max_vocab]
    terms = tuple(sorted(t for t, _ in ranked))
    idf = np.array([math.log((1 + n_docs) / (1 + df[t])) + 1.0 for t in terms])
    return TfidfVocabulary(terms=terms, idf=idf, document_count=n_docs)


def transform_tfidf(text: str, vocab: TfidfVocabulary) -> np.ndarray:
    """Term counts weighted by idf, L2-normalized; zeros for empty/OOV text."""
    vec = np.zeros(len(vocab), dtype=np.float64)
    for token, count in Counter(tokenize(text)).items():
        idx = vocab.index_of(token)
        if idx is not None:
            vec[idx] = count * vocab.idf[idx]
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def save_vocabulary(vocab: TfidfVocabulary, path) -> None:
    lines = [f"{t}\t{float(idf)!r}" for t, idf in zip(vocab.terms, vocab.idf)]
    header = f"# documents={vocab.document_count}"
    Path(path).write_text("\n".join([header] + lines) + "\n", encoding="utf-8")


def load_vocabulary(path) -> TfidfVocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# documents="):
        raise DataError(f"{path}: not a vocabulary file")
    n_docs = int(lines[0].split("=", 1)[1])
    terms, idf = [], []
    for line in lines[1:]:
        if not line:
            continue
        term, value = line.split("\t")
        terms.append(term)
        idf.append(float(value))
    return TfidfVocabulary(terms=tuple(terms), idf=np.array(idf), document_count=n_docs)


# ---------------------------------------------------------------------------
# Readers

class NullReader:
    """Always reads nothing; for ablations that drop the text branch."""

    uses_pixels = False

    def read(self, crop: BlockCrop) -> str:
        return ""


class GroundTruthReader:
    """Serves sidecar texts: exact annotation id hit first, otherwise the
    best-overlapping annotation on the page above an IoU floor."""

    uses_pixels = False

    def __init__(self, corpus: Corpus, iou_floor: float = 0.25):
        if corpus.block_texts is None:
            raise ConfigurationError("corpus has no block_texts sidecar; ground-truth reader unavailable")
        self._corpus = corpus
        self._iou_floor = iou_floor

    def read(self, crop: BlockCrop) -> str:
        src = crop.source
        text = self._corpus.text_for(src.ann_id)
        if text is not None:
            return text
        best, best_iou = None, self._iou_floor
        for ann in self._corpus.annotations_for(src.page_id):
            if ann.ann_id is None:
                continue
            v = iou(src.bbox, ann.bbox)
            if v >= best_iou:
                best, best_iou = ann, v
        if best is None:
            return ""
        return self._corpus.text_for(best.ann_id) or ""


class ExternalProcessReader:
    """Runs a configured OCR command mapping an image file to stdout text.

    The command template must contain an {input} placeholder. Failures are
    logged and read as empty text: the reader contract is total.
    """

    uses_pixels = True

    def __init__(self, command_template: str, timeout: float = 60.0):
        if "{input}" not in command_template:
            raise ConfigurationError("OCR command template must contain an {input} placeholder")
        self._template = command_template
        self._timeout = timeout

    def read(self, crop: BlockCrop) -> str:
        with tempfile.NamedTemporaryFile(suffix=".png", delete=True) as tmp:
            Image.fromarray(crop.pixels).save(tmp.name, format="PNG")
            argv = shlex.split(self._template.format(input=tmp.name))
            try:
                proc = subprocess.run(argv, capture_output=True, timeout=self._timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                log.warning("OCR command failed on block %s: %s", crop.source.ann_id, exc)
                return ""
        if proc.returncode != 0:
            log.warning("OCR command exited %d on block %s", proc.returncode, crop.source.ann_id)
            return ""
        return proc.stdout.decode("utf-8", errors="replace").strip()


def build_reader(kind: str, corpus: Corpus | None = None, ocr_command: str | None = None):
    if kind == "ground_truth":
        if corpus is None:
            raise ConfigurationError("ground_truth reader needs a corpus")
        return GroundTruthReader(corpus)
    if kind == "external":
        if not ocr_command:
            raise ConfigurationError("external reader needs tfe.ocr_command")
        return ExternalProcessReader(ocr_command)
    if kind == "null":
        return NullReader()
    raise ConfigurationError(f"unknown reader kind {kind!r}")


def read_block_text(crop: BlockCrop, reader, upscale_factor: int = DEFAULT_UPSCALE_FACTOR) -> str:
    """Upscale then read a block's text.

    Readers that ignore pixels skip the upscale; the text is identical
    either way.
    """
    if getattr(reader, "uses_pixels", True) and upscale_factor > 1:
        crop = upscale_block(crop, factor=upscale_factor)
    return reader.read(crop)


def extract_text_feature(crop: BlockCrop, reader, vocab: TfidfVocabulary,
                         upscale_factor: int = DEFAULT_UPSCALE_FACTOR) -> np.ndarray:
    """Upscale, read, tokenize, vectorize."""
    return transform_tfidf(read_block_text(crop, reader, upscale_factor), vocab)
