import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtlayout.categories import Category
from vtlayout.corpus import (
    BlockAnnotation,
    PageImage,
    category_counts,
    crop_blocks,
    iou,
    load_coco_annotations,
    match_predictions,
    save_corpus,
    unmatched_ground_truth,
)
from vtlayout.errors import FormatError, IntegrityError, SchemaError


def iou_cells(a, b) -> float:
    """Oracle: count unit cells covered by each integer box."""
    def cells(box):
        x, y, w, h = (int(v) for v in box)
        return {(i, j) for i in range(x, x + w) for j in range(y, y + h)}
    ca, cb = cells(a), cells(b)
    inter = len(ca & cb)
    union = len(ca | cb)
    return inter / union


boxes = st.tuples(
    st.integers(0, 40), st.integers(0, 40), st.integers(1, 30), st.integers(1, 30)
).map(lambda t: tuple(float(v) for v in t))


class TestIou:
    def test_identical_boxes(self):
        assert iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0

    def test_disjoint_boxes(self):
        assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0

    def test_quarter_overlap(self):
        # (0,0,10,10) vs (5,5,10,10): intersection 25, union 175
        expected = iou_cells((0, 0, 10, 10), (5, 5, 10, 10))
        assert expected == pytest.approx(1 / 7)
        assert iou((0, 0, 10, 10), (5, 5, 10, 10)) == pytest.approx(expected, abs=1e-12)

    @given(a=boxes, b=boxes)
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == 1.0

    @given(a=boxes, b=boxes)
    @settings(max_examples=60)
    def test_matches_cell_counting_oracle(self, a, b):
        assert iou(a, b) == pytest.approx(iou_cells(a, b), abs=1e-9)


def _page(width=100, height=100, seed=0):
    rng = np.random.default_rng(seed)
    return PageImage(page_id="pg", pixels=rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


class TestCropBlocks:
    def test_full_page_crop_is_identity(self):
        page = _page()
        ann = BlockAnnotation(page_id="pg", bbox=(0, 0, 100, 100), category=Category.TEXT)
        (crop,) = crop_blocks(page, [ann])
        assert np.array_equal(crop.pixels, page.pixels)

    def test_offset_bookkeeping(self):
        page = _page()
        ann = BlockAnnotation(page_id="pg", bbox=(10, 10, 5, 5))
        (crop,) = crop_blocks(page, [ann])
        assert crop.pixels.shape == (5, 5, 3)
        assert np.array_equal(crop.pixels[0, 0], page.pixels[10, 10])

    def test_clamps_to_page_bounds(self):
        page = _page()
        ann = BlockAnnotation(page_id="pg", bbox=(95, 95, 20, 20))
        (crop,) = crop_blocks(page, [ann])
        # Oracle: intersection rectangle of [95,115)x[95,115) with [0,100)^2.
        x0, y0 = max(0, 95), max(0, 95)
        x1, y1 = min(100, 115), min(100, 115)
        assert crop.pixels.shape == (y1 - y0, x1 - x0, 3)
        assert np.array_equal(crop.pixels, page.pixels[y0:y1, x0:x1])

    def test_zero_area_after_clamp_is_skipped(self, caplog):
        page = _page()
        anns = [
            BlockAnnotation(page_id="pg", bbox=(200, 200, 10, 10)),
            BlockAnnotation(page_id="pg", bbox=(5, 5, 10, 10)),
        ]
        with caplog.at_level("WARNING"):
            crops = crop_blocks(page, anns)
        assert len(crops) == 1
        assert crops[0].source.bbox[:2] == (5.0, 5.0)
        assert any("zero-area" in rec.message for rec in caplog.records)

    def test_repasting_crops_reconstructs_pixels(self):
        page = _page(seed=3)
        anns = [
            BlockAnnotation(page_id="pg", bbox=(0, 0, 30, 40)),
            BlockAnnotation(page_id="pg", bbox=(50, 20, 25, 25)),
            BlockAnnotation(page_id="pg", bbox=(10, 60, 80, 30)),
        ]
        canvas = np.zeros_like(page.pixels)
        for crop in crop_blocks(page, anns):
            x, y, w, h = (int(v) for v in crop.source.bbox)
            canvas[y:y + h, x:x + w] = crop.pixels
        for ann in anns:
            x, y, w, h = (int(v) for v in ann.bbox)
            assert np.array_equal(canvas[y:y + h, x:x + w], page.pixels[y:y + h, x:x + w])


def _ann(bbox, page="pg", cat=None, score=None):
    return BlockAnnotation(page_id=page, bbox=bbox, category=cat, score=score)


class TestMatchPredictions:
    def test_exact_predictions_all_match(self):
        gts = [_ann((0, 0, 10, 10), cat=Category.TEXT), _ann((20, 0, 10, 10), cat=Category.TITLE)]
        preds = [_ann(g.bbox) for g in gts]
        pairs = match_predictions(preds, gts, threshold=0.5)
        assert [g is not None for _, g in pairs] == [True, True]
        assert pairs[0][1].bbox == gts[0].bbox
        assert pairs[1][1].bbox == gts[1].bbox

    def test_greedy_takes_highest_overlap(self):
        gt_hi = _ann((0, 0, 10, 10))
        gt_lo = _ann((3, 0, 10, 10))
        pred = _ann((0, 0, 10, 11))  # higher IoU with gt_hi
        pairs = match_predictions([pred], [gt_lo, gt_hi], threshold=0.5)
        assert pairs[0][1] is gt_hi

    def test_matches_max_weight_assignment_on_generic_fixture(self):
        # Frozen fixture: 3 gts, 3 predictions jittered a little. All nine
        # IoUs distinct and above threshold; brute force over the 3!
        # assignments confirms greedy picks the max-weight matching here.
        gts = [
            _ann((10.829142774850526, 17.30722929348786, 20.0, 20.0)),
            _ann((15.83460234337432, 10.660475435180889, 20.0, 20.0)),
            _ann((19.122629377145444, 20.273023258423798, 20.0, 20.0)),
        ]
        preds = [
            _ann((11.178816462700732, 16.630998783799104, 20.0, 20.0)),
            _ann((16.578019035009124, 11.21189213446555, 20.0, 20.0)),
            _ann((18.16457252142944, 19.092229334409268, 20.0, 20.0)),
        ]
        weights = [[iou(p.bbox, g.bbox) for g in gts] for p in preds]
        flat = [w for row in weights for w in row]
        assert len(set(flat)) == 9 and min(flat) > 0.3
        best = max(itertools.permutations(range(3)),
                   key=lambda perm: sum(weights[i][perm[i]] for i in range(3)))
        pairs = match_predictions(preds, gts, threshold=0.3)
        greedy = tuple(gts.index(g) for _, g in pairs)
        assert greedy == best

    def test_each_gt_used_at_most_once_and_above_threshold(self):
        rng = np.random.default_rng(7)
        gts = [_ann((x * 15.0, y * 15.0, 12.0, 12.0))
               for x in range(4) for y in range(4)]
        preds = [_ann((g.bbox[0] + rng.uniform(-4, 4), g.bbox[1] + rng.uniform(-4, 4), 12.0, 12.0))
                 for g in gts for _ in range(2)]
        pairs = match_predictions(preds, gts, threshold=0.5)
        used = [g for _, g in pairs if g is not None]
        assert len(used) == len({id(g) for g in used})
        for pred, gt in pairs:
            if gt is not None:
                assert iou(pred.bbox, gt.bbox) >= 0.5
        leftover = unmatched_ground_truth(pairs, gts)
        assert len(leftover) == len(gts) - len(used)


COCO_FIXTURE = {
    "images": [
        {"id": 1, "file_name": "images/0.png", "width": 40, "height": 30},
        {"id": 2, "file_name": "images/1.png", "width": 40, "height": 30, "split": "validation"},
    ],
    "annotations": [
        {"id": 10, "image_id": 1, "bbox": [0, 0, 10, 10], "category_id": 1},
        {"id": 11, "image_id": 1, "bbox": [5, 5, 12, 8], "category_id": 2},
        {"id": 12, "image_id": 2, "bbox": [1, 1, 6, 6], "category_id": 5},
    ],
    "categories": [
        {"id": 1, "name": "text"},
        {"id": 2, "name": "title"},
        {"id": 3, "name": "list"},
        {"id": 4, "name": "table"},
        {"id": 5, "name": "figure"},
    ],
}


def _write_fixture(tmp_path, doc):
    from PIL import Image
    (tmp_path / "images").mkdir(exist_ok=True)
    for entry in doc.get("images", []):
        img = Image.new("RGB", (entry.get("width", 40), entry.get("height", 30)), (255, 255, 255))
        img.save(tmp_path / entry["file_name"])
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestLoadCoco:
    def test_counts_match_independent_json_walk(self, tmp_path):
        path = _write_fixture(tmp_path, COCO_FIXTURE)
        corpus = load_coco_annotations(path)
        # Oracle: re-read the JSON with a plain walk and count.
        raw = json.loads(path.read_text())
        id_to_name = {c["id"]: c["name"] for c in raw["categories"]}
        expected = {}
        for ann in raw["annotations"]:
            name = id_to_name[ann["category_id"]]
            expected[name] = expected.get(name, 0) + 1
        got = {cat.label.lower(): n for cat, n in category_counts(corpus.annotations).items() if n}
        assert got == expected
        assert len(corpus.pages) == len(raw["images"])
        assert corpus.splits == {"train": ("1",), "validation": ("2",)}

    def test_zero_annotations_one_image(self, tmp_path):
        doc = dict(COCO_FIXTURE, annotations=[], images=COCO_FIXTURE["images"][:1])
        corpus = load_coco_annotations(_write_fixture(tmp_path, doc))
        assert len(corpus.pages) == 1
        assert corpus.annotations == []

    def test_parse_failure_reports_byte_offset(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"images": [], "annotations": [}', encoding="utf-8")
        with pytest.raises(FormatError) as exc:
            load_coco_annotations(path)
        assert exc.value.offset is not None
        assert "byte offset" in str(exc.value)

    def test_unknown_category_name_rejected(self, tmp_path):
        doc = dict(COCO_FIXTURE, categories=COCO_FIXTURE["categories"] + [{"id": 9, "name": "sidebar"}])
        with pytest.raises(SchemaError, match="sidebar"):
            load_coco_annotations(_write_fixture(tmp_path, doc))

    def test_dangling_image_reference_rejected(self, tmp_path):
        doc = dict(COCO_FIXTURE)
        doc["annotations"] = doc["annotations"] + [
            {"id": 13, "image_id": 99, "bbox": [0, 0, 5, 5], "category_id": 1}]
        with pytest.raises(IntegrityError, match="99"):
            load_coco_annotations(_write_fixture(tmp_path, doc))

    def test_save_load_roundtrip(self, tmp_path, small_corpus):
        save_corpus(small_corpus, tmp_path)
        loaded = load_coco_annotations(tmp_path / "annotations.json")
        assert len(loaded.pages) == len(small_corpus.pages)
        assert loaded.splits == {k: tuple(sorted(v)) for k, v in small_corpus.splits.items()}
        assert loaded.block_texts == small_corpus.block_texts
        by_id = {p.page_id: p for p in loaded.pages}
        for page in small_corpus.pages:
            assert np.array_equal(by_id[page.page_id].pixels, page.pixels)
        assert [(a.page_id, a.bbox, a.category) for a in loaded.annotations] == \
               [(a.page_id, a.bbox, a.category) for a in small_corpus.annotations]
