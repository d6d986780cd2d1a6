import numpy as np
import pytest

from vtlayout.categories import Category
from vtlayout.corpus import category_counts, crop_blocks, save_corpus
from vtlayout.errors import ConfigurationError
from vtlayout.svfe import extract_shallow
from vtlayout.synth import MIN_BLOCK_DIM, SynthSpec, generate_synthetic_corpus


def test_same_seed_reproduces_corpus_exactly():
    a = generate_synthetic_corpus(SynthSpec(pages=12), seed=42)
    b = generate_synthetic_corpus(SynthSpec(pages=12), seed=42)
    assert a.annotations == b.annotations
    assert a.splits == b.splits
    assert a.block_texts == b.block_texts
    for pa, pb in zip(a.pages, b.pages):
        assert np.array_equal(pa.pixels, pb.pixels)


def test_saved_corpus_bytes_are_deterministic(tmp_path):
    a = generate_synthetic_corpus(SynthSpec(pages=6), seed=9)
    b = generate_synthetic_corpus(SynthSpec(pages=6), seed=9)
    save_corpus(a, tmp_path / "one")
    save_corpus(b, tmp_path / "two")
    files_one = sorted(p.relative_to(tmp_path / "one") for p in (tmp_path / "one").rglob("*") if p.is_file())
    files_two = sorted(p.relative_to(tmp_path / "two") for p in (tmp_path / "two").rglob("*") if p.is_file())
    assert files_one == files_two
    for rel in files_one:
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes()


def test_different_seeds_differ():
    a = generate_synthetic_corpus(SynthSpec(pages=4), seed=1)
    b = generate_synthetic_corpus(SynthSpec(pages=4), seed=2)
    assert any(not np.array_equal(pa.pixels, pb.pixels) for pa, pb in zip(a.pages, b.pages))


def test_category_counts_track_weights_within_20_percent():
    spec = SynthSpec(pages=100)
    corpus = generate_synthetic_corpus(spec, seed=42)
    counts = category_counts(corpus.annotations)
    for cat, weight in spec.category_weights.items():
        expected = weight * spec.pages
        assert abs(counts[cat] - expected) <= 0.2 * expected, (cat, counts[cat], expected)


def test_zero_weights_rejected():
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(
            SynthSpec(pages=5, category_weights={c: 0.0 for c in Category}), seed=0)


def test_zero_pages_rejected():
    with pytest.raises(ConfigurationError):
        generate_synthetic_corpus(SynthSpec(pages=0), seed=0)


def test_blocks_lie_within_pages_and_above_min_size(small_corpus):
    for ann in small_corpus.annotations:
        page = small_corpus.page(ann.page_id)
        x, y, w, h = ann.bbox
        assert x >= 0 and y >= 0
        assert x + w <= page.width and y + h <= page.height
        assert w >= MIN_BLOCK_DIM - 0.0 or w >= 60  # titles may be narrow but never tiny
        assert min(w, h) >= MIN_BLOCK_DIM


def test_every_annotation_has_text_entry(small_corpus):
    for ann in small_corpus.annotations:
        assert ann.ann_id in small_corpus.block_texts
        if ann.category is Category.FIGURE:
            assert small_corpus.block_texts[ann.ann_id] == ""
        else:
            assert small_corpus.block_texts[ann.ann_id].strip()


def test_figure_histograms_separate_from_text_histograms(small_corpus):
    """Figures put histogram mass in the midtones; text pages are a white
    spike, a dark ink cluster, and thin antialiasing tails."""
    def midmass(crop):
        return float(extract_shallow(crop).values[25:231].sum())

    figure_masses, text_masses = [], []
    for page in small_corpus.pages:
        for crop in crop_blocks(page, small_corpus.annotations_for(page.page_id)):
            if crop.label is Category.FIGURE:
                figure_masses.append(midmass(crop))
            elif crop.label is Category.TEXT:
                text_masses.append(midmass(crop))
    assert figure_masses and text_masses
    assert min(figure_masses) > max(text_masses)
    assert min(figure_masses) > 0.25
    assert max(text_masses) < 0.25
