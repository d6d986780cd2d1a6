"""Deterministic synthetic document corpus for desk-scale experiments.

Pages are rendered with real vector fonts on a white background, two columns
per page. Each category has a distinct visual and textual signature, with
deliberate overlaps so that no single feature family separates all five
classes: Text and List share fonts and ink density (histograms overlap),
Title and Text draw words from the same pool (TF-IDF overlaps), while the
fused model can resolve both.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .categories import Category
from .corpus import BlockAnnotation, Corpus, PageImage
from .errors import ConfigurationError

# Expected block counts per page; the 7:2 Text:Title ratio and the sub-unit
# List/Table/Figure rates follow the per-page block statistics of large
# scholarly-article corpora.
DEFAULT_CATEGORY_WEIGHTS: dict[Category, float] = {
    Category.TEXT: 7.0,
    Category.TITLE: 2.0,
    Category.LIST: 0.25,
    Category.TABLE: 1.0 / 3.0,
    Category.FIGURE: 1.0 / 3.0,
}

# All rendered blocks keep both dimensions at or above this, which keeps
# IoU under small localization jitter comfortably high.
MIN_BLOCK_DIM = 36

_FONT_PATHS = {
    False: (
        "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
        "DejaVuSans.ttf",
    ),
    True: (
        "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
        "DejaVuSans-Bold.ttf",
    ),
}

SHARED_WORDS = (
    "analysis approach article author baseline block boundary category cause chapter "
    "claim common compare concept condition conference content context control corpus "
    "current data decade decline define degree density design detail device document "
    "domain draft during dynamic early edge effect empirical energy engine entire "
    "equal error estimate evidence exact example experiment factor feature field final "
    "finding focus formal frame framework function further general given global goal "
    "group growth high hypothesis impact important improve include increase index "
    "inference input insight instance journal knowledge language large layer learning "
    "level limit linear local logic lower machine margin material matrix measure "
    "method metric model modern motion natural network neural nominal novel object "
    "observe obtain offer often order origin output overall paper paragraph parameter "
    "partial pattern period phase physical pipeline policy popular position possible "
    "practice precise predict present previous primary principle prior problem process "
    "produce program project proof propose public quality question random range reason "
    "recent record reduce region relate report research result review robust sample "
    "scale schema science section segment select sentence sequence series signal "
    "similar simple single source space specific stable standard statistic strong "
    "structure study subject summary support surface survey system target term theory "
    "tool topic total trend trial under unique useful variable version visual volume "
    "weight within without work writing yield"
).split()

LIST_MARKERS = ("item", "step", "note", "option", "rule", "case", "point", "task")

TABLE_WORDS = (
    "sum", "mean", "rate", "count", "ratio", "max", "min", "std", "median",
    "pct", "col", "row", "cell", "unit", "label", "id",
)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic corpus."""

    pages: int = 100
    width: int = 616
    height: int = 816
    val_fraction: float = 0.2
    category_weights: dict[Category, float] = field(
        default_factory=lambda: dict(DEFAULT_CATEGORY_WEIGHTS))

    def validate(self) -> None:
        if self.pages <= 0:
            raise ConfigurationError(f"page count must be positive, got {self.pages}")
        if self.width < 200 or self.height < 200:
            raise ConfigurationError("page size too small to lay out blocks")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if any(w < 0 for w in self.category_weights.values()):
            raise ConfigurationError("category weights must be non-negative")
        if not any(w > 0 for w in self.category_weights.values()):
            raise ConfigurationError("all category weights are zero")


@functools.lru_cache(maxsize=None)
def _font(size: int, bold: bool) -> ImageFont.FreeTypeFont:
    for path in _FONT_PATHS[bold]:
        try:
            return ImageFont.truetype(path, size)
        except OSError:
            continue
    raise ConfigurationError("DejaVu Sans fonts not found; install the dejavu font package")


def _sample_words(rng, pool, n) -> list[str]:
    return [pool[int(i)] for i in rng.integers(0, len(pool), size=n)]


def _fill_line(rng, pool, font, max_width) -> list[str]:
    """Words that fit max_width when joined by single spaces."""
    words: list[str] = []
    while True:
        w = pool[int(rng.integers(0, len(pool)))]
        candidate = " ".join(words + [w])
        if font.getlength(candidate) > max_width and words:
            return words
        words.append(w)
        if len(words) >= 14:
            return words


@dataclass
class _Block:
    category: Category
    w: int
    h: int
    ops: list[tuple]
    text: str


def _make_text(rng, col_w) -> _Block:
    # Lengths run from a few words to full paragraphs so that short Text
    # blocks overlap Title word counts; telling them apart needs the visual
    # channel (regular vs bold stroke), not text statistics.
    size = int(rng.integers(10, 13))
    font = _font(size, bold=False)
    n_lines = int(rng.integers(1, 6))
    gray = int(rng.integers(0, 60))
    pad, line_h = 7, size + 5
    lines, ops = [], []
    for i in range(n_lines):
        if n_lines <= 2:
            words = _sample_words(rng, SHARED_WORDS, int(rng.integers(3, 9)))
        else:
            words = _fill_line(rng, SHARED_WORDS, font, col_w - 2 * pad)
        line = " ".join(words)
        lines.append(line)
        ops.append(("text", pad, pad + i * line_h, line, (size, False), gray))
    h = max(MIN_BLOCK_DIM, 2 * pad + n_lines * line_h)
    return _Block(Category.TEXT, col_w, h, ops, " ".join(lines))


def _make_title(rng, col_w) -> _Block:
    size = int(rng.integers(14, 19))
    font = _font(size, bold=True)
    n_words = int(rng.integers(1, 5))
    words = _sample_words(rng, SHARED_WORDS, n_words)
    line = " ".join(w.capitalize() for w in words)
    gray = int(rng.integers(0, 40))
    pad = 9
    w = min(col_w, max(MIN_BLOCK_DIM + 24, int(font.getlength(line)) + 2 * pad))
    h = max(MIN_BLOCK_DIM, size + 2 * pad)
    return _Block(Category.TITLE, w, h, [("text", pad, pad - 2, line, (size, True), gray)], line)


def _make_list(rng, col_w) -> _Block:
    size = int(rng.integers(10, 13))
    font = _font(size, bold=False)
    n_items = int(rng.integers(2, 6))
    gray = int(rng.integers(0, 60))
    pad, line_h = 7, size + 7
    ops, lines = [], []
    for i in range(n_items):
        head = [LIST_MARKERS[int(rng.integers(0, len(LIST_MARKERS)))]] if rng.random() < 0.85 else []
        body = _fill_line(rng, SHARED_WORDS, font, col_w - 2 * pad - 14 - font.getlength(" ".join(head) + " "))
        item = " ".join(head + body)
        lines.append("• " + item)
        y = pad + i * line_h
        ops.append(("ellipse", pad + 1, y + size // 2 - 1, pad + 4, y + size // 2 + 2, gray))
        ops.append(("text", pad + 10, y, item, (size, False), gray))
    return _Block(Category.LIST, col_w, 2 * pad + n_items * line_h, ops, "\n".join(lines))


def _make_table(rng, col_w) -> _Block:
    rows = int(rng.integers(3, 6))
    cols = int(rng.integers(3, 6))
    size = int(rng.integers(8, 11))
    row_h = size + 10
    pad = 6
    grid_gray = int(rng.integers(90, 150))
    text_gray = int(rng.integers(0, 60))
    w = col_w
    h = 2 * pad + rows * row_h
    cell_w = (w - 2 * pad) / cols
    ops, cells = [], []
    for r in range(rows + 1):
        y = pad + r * row_h
        ops.append(("line", pad, y, w - pad, y, grid_gray))
    for c in range(cols + 1):
        x = pad + c * cell_w
        ops.append(("line", x, pad, x, h - pad, grid_gray))
    for r in range(rows):
        for c in range(cols):
            if rng.random() < 0.6:
                s = str(int(rng.integers(10, 1000)))
            else:
                s = TABLE_WORDS[int(rng.integers(0, len(TABLE_WORDS)))]
            cells.append(s)
            ops.append(("text", pad + c * cell_w + 4, pad + r * row_h + 4, s, (size, False), text_gray))
    return _Block(Category.TABLE, w, h, ops, " ".join(cells))


def _make_figure(rng, col_w) -> _Block:
    h = int(rng.integers(90, 150))
    w = col_w
    c0 = tuple(int(v) for v in rng.integers(40, 220, size=3))
    c1 = tuple(int(v) for v in rng.integers(40, 220, size=3))
    gx, gy = int(rng.integers(4, 20)), int(rng.integers(4, 16))
    gw, gh = w - gx - int(rng.integers(4, 20)), h - gy - int(rng.integers(4, 16))
    ops = [("gradient", gx, gy, gw, gh, c0, c1)]
    for _ in range(int(rng.integers(1, 3))):
        accent = tuple(int(v) for v in rng.integers(30, 230, size=3))
        cx, cy = int(rng.integers(gx, gx + gw - 24)), int(rng.integers(gy, gy + gh - 20))
        rw, rh = int(rng.integers(16, 50)), int(rng.integers(12, 40))
        kind = "ellipse_rgb" if rng.random() < 0.5 else "rect_rgb"
        ops.append((kind, cx, cy, min(cx + rw, gx + gw - 2), min(cy + rh, gy + gh - 2), accent))
    return _Block(Category.FIGURE, w, h, ops, "")


_MAKERS = {
    Category.TEXT: _make_text,
    Category.TITLE: _make_title,
    Category.LIST: _make_list,
    Category.TABLE: _make_table,
    Category.FIGURE: _make_figure,
}


def _draw_block(img: Image.Image, draw: ImageDraw.ImageDraw, x: int, y: int, block: _Block) -> None:
    for op in block.ops:
        kind = op[0]
        if kind == "text":
            _, dx, dy, s, font_key, gray = op
            draw.text((x + dx, y + dy), s, fill=(gray, gray, gray), font=_font(*font_key))
        elif kind == "line":
            _, x0, y0, x1, y1, gray = op
            draw.line((x + x0, y + y0, x + x1, y + y1), fill=(gray, gray, gray), width=1)
        elif kind == "ellipse":
            _, x0, y0, x1, y1, gray = op
            draw.ellipse((x + x0, y + y0, x + x1, y + y1), fill=(gray, gray, gray))
        elif kind == "ellipse_rgb":
            _, x0, y0, x1, y1, rgb = op
            draw.ellipse((x + x0, y + y0, x + x1, y + y1), fill=rgb)
        elif kind == "rect_rgb":
            _, x0, y0, x1, y1, rgb = op
            draw.rectangle((x + x0, y + y0, x + x1, y + y1), fill=rgb)
        elif kind == "gradient":
            _, dx, dy, gw, gh, c0, c1 = op
            t = np.linspace(0.0, 1.0, gh)[:, None]
            ramp = (np.asarray(c0, dtype=np.float64) * (1 - t) + np.asarray(c1, dtype=np.float64) * t)
            tile = np.broadcast_to(ramp[:, None, :], (gh, gw, 3)).astype(np.uint8)
            img.paste(Image.fromarray(tile), (x + dx, y + dy))
        else:
            raise AssertionError(f"unknown op {kind}")


def _page_counts(rng, weights, diffusion) -> dict[Category, int]:
    counts = {}
    for cat, w in weights.items():
        base = int(np.floor(w))
        frac = w - base
        extra = 0
        if frac > 0:
            diffusion[cat] += frac
            if diffusion[cat] >= 1.0:
                diffusion[cat] -= 1.0
                extra = 1
        jitter = int(rng.integers(-1, 2)) if base >= 2 else 0
        counts[cat] = max(0, base + jitter + extra)
    return counts


def generate_synthetic_corpus(spec: SynthSpec, seed: int) -> Corpus:
    """Render a labeled corpus; a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    margin, gutter, gap = 36, 18, 8
    col_w = (spec.width - 2 * margin - gutter) // 2
    col_x = (margin, margin + col_w + gutter)
    col_limit = spec.height - margin

    # De-phase the sub-unit-rate categories so e.g. Table and Figure do not
    # always land on the same pages.
    diffusion = {cat: float(rng.random()) for cat in spec.category_weights}

    pages: list[PageImage] = []
    annotations: list[BlockAnnotation] = []
    block_texts: dict[str, str] = {}
    ann_counter = 0

    for page_idx in range(spec.pages):
        page_id = f"p{page_idx:05d}"
        img = Image.new("RGB", (spec.width, spec.height), (255, 255, 255))
        draw = ImageDraw.Draw(img)

        counts = _page_counts(rng, spec.category_weights, diffusion)
        blocks = []
        for cat, n in counts.items():
            for _ in range(n):
                blocks.append(_MAKERS[cat](rng, col_w))
        order = rng.permutation(len(blocks))

        col_y = [margin, margin]
        for bi in order:
            block = blocks[int(bi)]
            placed = False
            for ci in range(2):
                if col_y[ci] + block.h <= col_limit:
                    x, y = col_x[ci], col_y[ci]
                    _draw_block(img, draw, x, y, block)
                    ann_id = f"s{ann_counter:06d}"
                    ann_counter += 1
                    annotations.append(BlockAnnotation(
                        page_id=page_id,
                        bbox=(float(x), float(y), float(block.w), float(block.h)),
                        category=block.category,
                        ann_id=ann_id,
                    ))
                    block_texts[ann_id] = block.text
                    col_y[ci] += block.h + gap
                    placed = True
                    break
            if not placed:
                continue  # page full; rare with default sizes

        pages.append(PageImage(page_id=page_id, pixels=np.asarray(img, dtype=np.uint8)))

    page_ids = [p.page_id for p in pages]
    n_val = int(round(spec.pages * spec.val_fraction))
    perm = rng.permutation(spec.pages)
    val_ids = tuple(sorted(page_ids[int(i)] for i in perm[:n_val]))
    train_ids = tuple(sorted(page_ids[int(i)] for i in perm[n_val:]))

    return Corpus(
        pages=pages,
        annotations=annotations,
        splits={"train": train_ids, "validation": val_ids},
        block_texts=block_texts,
    )
