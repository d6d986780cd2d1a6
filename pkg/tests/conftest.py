import numpy as np
import pytest

from vtlayout.corpus import BlockAnnotation, BlockCrop
from vtlayout.synth import SynthSpec, generate_synthetic_corpus


@pytest.fixture(scope="session")
def small_corpus():
    """A 24-page synthetic corpus shared by read-only tests."""
    return generate_synthetic_corpus(SynthSpec(pages=24), seed=101)


def make_crop(pixels: np.ndarray, page_id="page", bbox=None, label=None) -> BlockCrop:
    h, w = pixels.shape[:2]
    ann = BlockAnnotation(page_id=page_id, bbox=bbox or (0.0, 0.0, float(w), float(h)),
                          category=label)
    return BlockCrop(source=ann, pixels=pixels, label=label)


@pytest.fixture
def crop_factory():
    return make_crop
