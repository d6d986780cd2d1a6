import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtlayout.categories import Category
from vtlayout.corpus import crop_blocks
from vtlayout.errors import DegenerateInputError
from vtlayout.svfe import extract_shallow, pixel_histogram, to_grayscale
from vtlayout.tfe import upscale_block

from conftest import make_crop

rgb_crops = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)))
gray_arrays = arrays(np.uint8, st.tuples(st.integers(1, 16), st.integers(1, 16)))


class TestToGrayscale:
    def test_pure_white(self):
        crop = make_crop(np.full((4, 5, 3), 255, dtype=np.uint8))
        assert np.all(to_grayscale(crop) == 255)

    def test_pure_red_rounds_half_up(self):
        # 0.299 * 255 = 76.245 -> 76
        crop = make_crop(np.tile(np.array([255, 0, 0], dtype=np.uint8), (2, 2, 1)))
        assert np.all(to_grayscale(crop) == 76)

    def test_rounds_to_nearest(self):
        # 0.299*90 + 0.587*0 + 0.114*200 = 26.91 + 22.8 = 49.71 -> 50
        crop = make_crop(np.tile(np.array([90, 0, 200], dtype=np.uint8), (1, 1, 1)))
        assert to_grayscale(crop)[0, 0] == 50

    @given(v=st.integers(0, 255))
    def test_gray_inputs_are_fixed_points(self, v):
        crop = make_crop(np.full((3, 3, 3), v, dtype=np.uint8))
        assert np.all(to_grayscale(crop) == v)

    @given(pixels=rgb_crops)
    @settings(max_examples=50)
    def test_matches_scalar_luma_oracle(self, pixels):
        got = to_grayscale(make_crop(pixels))
        for i in range(pixels.shape[0]):
            for j in range(pixels.shape[1]):
                r, g, b = (float(v) for v in pixels[i, j])
                expected = int(np.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5))
                assert got[i, j] == min(255, max(0, expected))


class TestPixelHistogram:
    def test_all_black_raw(self):
        hist = pixel_histogram(np.zeros((2, 2), dtype=np.uint8), normalize=False)
        assert hist.values[0] == 4
        assert hist.values[1:].sum() == 0
        assert not hist.normalized

    def test_three_value_crop_normalized(self):
        gray = np.array([[0, 0, 128], [128, 128, 255], [255, 255, 255]], dtype=np.uint8)
        hist = pixel_histogram(gray, normalize=True)
        assert hist.values[0] == pytest.approx(2 / 9)
        assert hist.values[128] == pytest.approx(3 / 9)
        assert hist.values[255] == pytest.approx(4 / 9)
        assert hist.values.sum() == pytest.approx(1.0, abs=1e-9)

    @given(gray=gray_arrays)
    @settings(max_examples=60)
    def test_permutation_invariance(self, gray):
        rng = np.random.default_rng(0)
        shuffled = rng.permutation(gray.ravel()).reshape(gray.shape)
        a = pixel_histogram(gray, normalize=False).values
        b = pixel_histogram(shuffled, normalize=False).values
        assert np.array_equal(a, b)

    @given(gray=gray_arrays)
    @settings(max_examples=60)
    def test_sums_and_support(self, gray):
        raw = pixel_histogram(gray, normalize=False).values
        assert raw.sum() == gray.size
        assert np.all(raw == np.floor(raw))
        norm = pixel_histogram(gray, normalize=True).values
        assert abs(norm.sum() - 1.0) <= 1e-9
        present = set(int(v) for v in gray.ravel())
        for value in range(256):
            if value in present:
                assert raw[value] > 0
            else:
                assert raw[value] == 0

    def test_empty_crop_rejected(self):
        with pytest.raises(DegenerateInputError):
            pixel_histogram(np.zeros((0, 3), dtype=np.uint8))


class TestExtractShallow:
    def test_all_white_crop(self):
        feature = extract_shallow(make_crop(np.full((6, 6, 3), 255, dtype=np.uint8)))
        assert feature.values[255] == 1.0
        assert feature.values[:255].sum() == 0.0
        assert len(feature.values) == 256

    def test_text_vs_figure_distance(self, small_corpus):
        text_hist = figure_hist = None
        for page in small_corpus.pages:
            for crop in crop_blocks(page, small_corpus.annotations_for(page.page_id)):
                if crop.label is Category.TEXT and text_hist is None:
                    text_hist = extract_shallow(crop).values
                if crop.label is Category.FIGURE and figure_hist is None:
                    figure_hist = extract_shallow(crop).values
            if text_hist is not None and figure_hist is not None:
                break
        assert np.abs(text_hist - figure_hist).sum() > 0.1

    def test_nearest_neighbor_upscale_preserves_histogram(self, small_corpus):
        page = small_corpus.pages[0]
        (crop, *_) = crop_blocks(page, small_corpus.annotations_for(page.page_id))
        doubled = upscale_block(crop, factor=2, resample="nearest")
        a = extract_shallow(crop).values
        b = extract_shallow(doubled).values
        assert np.allclose(a, b, atol=1e-12)

    def test_raw_mode(self):
        crop = make_crop(np.zeros((3, 4, 3), dtype=np.uint8))
        feature = extract_shallow(crop, normalize=False)
        assert feature.values[0] == 12
        assert not feature.normalized
