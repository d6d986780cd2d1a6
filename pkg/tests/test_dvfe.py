import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtlayout import nn
from vtlayout.dvfe import (
    INPUT_SIZE,
    ReferenceBackbone,
    SEBlock,
    TinyBackbone,
    backbone_embed,
    build_backbone,
    embed_pooled,
    extract_deep,
    global_average_pool,
    pad_resize,
    save_backbone,
    se_pool_grads,
    se_recalibrate,
)
from vtlayout.errors import ConfigurationError, DegenerateInputError, ShapeError

from conftest import make_crop


class TestPadResize:
    def test_square_input_is_identity_up_to_scaling(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(INPUT_SIZE, INPUT_SIZE, 3), dtype=np.uint8)
        out = pad_resize(make_crop(pixels))
        assert np.array_equal((out * 255).round().astype(np.uint8), pixels)

    def test_narrow_input_gets_symmetric_white_columns(self):
        pixels = np.zeros((128, 64, 3), dtype=np.uint8)  # h=128, w=64
        out = pad_resize(make_crop(pixels))
        assert np.all(out[:, :32] == 1.0)
        assert np.all(out[:, 96:] == 1.0)
        assert np.all(out[:, 32:96] == 0.0)

    def test_wide_input_content_extent(self):
        # h=100, w=300: padded to 300x300 with 100 white rows top and bottom,
        # content lands in the middle ~round(128 * 100/300) = 43 rows.
        pixels = np.zeros((100, 300, 3), dtype=np.uint8)
        out = pad_resize(make_crop(pixels))
        content_rows = np.where((out < 0.99).any(axis=(1, 2)))[0]
        extent = content_rows.max() - content_rows.min() + 1
        assert abs(extent - round(128 * 100 / 300)) <= 2

    @given(h=st.integers(1, 300), w=st.integers(1, 300))
    @settings(max_examples=40, deadline=None)
    def test_shape_and_range(self, h, w):
        rng = np.random.default_rng(h * 1000 + w)
        pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        out = pad_resize(make_crop(pixels))
        assert out.shape == (INPUT_SIZE, INPUT_SIZE, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_degenerate_crop_rejected(self):
        from vtlayout.corpus import BlockAnnotation, BlockCrop
        ann = BlockAnnotation(page_id="p", bbox=(0.0, 0.0, 4.0, 4.0))
        hollow = BlockCrop(source=ann, pixels=np.zeros((0, 4, 3), dtype=np.uint8))
        with pytest.raises(DegenerateInputError):
            pad_resize(hollow)


class TestBackbones:
    def test_tiny_shape_follows_stride_schedule(self):
        # stem and four blocks each halve the resolution: stride 32.
        strides = [2, 2, 2, 2, 2]
        side = INPUT_SIZE
        for s in strides:
            side = (side + 1) // s if side % s else side // s
        assert side == 4
        backbone = TinyBackbone.initialize(seed=0)
        fmap = backbone_embed(np.random.default_rng(0).random((128, 128, 3)), backbone)
        assert fmap.shape == (4, 4, TinyBackbone.channels)

    @pytest.mark.slow
    def test_reference_shape_is_4x4x1280(self):
        backbone = ReferenceBackbone.initialize(seed=0)
        fmap = backbone_embed(np.random.default_rng(1).random((128, 128, 3)), backbone)
        assert fmap.shape == (4, 4, 1280)

    def test_deterministic_embedding(self):
        backbone = TinyBackbone.initialize(seed=1)
        x = np.random.default_rng(2).random((128, 128, 3))
        a = backbone_embed(x, backbone)
        b = backbone_embed(x, backbone)
        assert np.array_equal(a, b)

    def test_distinct_inputs_embed_differently(self):
        backbone = TinyBackbone.initialize(seed=1)
        zeros = backbone_embed(np.zeros((128, 128, 3)), backbone)
        ones = backbone_embed(np.ones((128, 128, 3)), backbone)
        assert not np.array_equal(zeros, ones)

    def test_weight_file_roundtrip(self, tmp_path):
        backbone = TinyBackbone.initialize(seed=4)
        path = tmp_path / "tiny.weights"
        save_backbone(backbone, path)
        loaded = build_backbone("tiny", weights_path=path)
        x = np.random.default_rng(3).random((128, 128, 3))
        assert np.array_equal(backbone_embed(x, backbone), backbone_embed(x, loaded))

    def test_weight_file_architecture_mismatch(self, tmp_path):
        backbone = TinyBackbone.initialize(seed=4)
        path = tmp_path / "tiny.weights"
        save_backbone(backbone, path)
        with pytest.raises(ShapeError, match="architecture"):
            build_backbone("reference", weights_path=path)

    def test_weight_shape_mismatch_names_the_tensor(self):
        weights = TinyBackbone.initialize(seed=0).weights
        weights["block2.pw.w"] = weights["block2.pw.w"][..., :-1]
        with pytest.raises(ShapeError, match="block2.pw.w"):
            TinyBackbone(weights)

    def test_unknown_backbone_kind(self):
        with pytest.raises(ConfigurationError):
            build_backbone("resnet")


class TestSEBlock:
    def test_zero_weights_halve_the_map(self):
        se = SEBlock(w1=np.zeros((2, 8)), b1=np.zeros(2), w2=np.zeros((8, 2)), b2=np.zeros(8))
        fmap = np.random.default_rng(0).normal(size=(3, 3, 8))
        out = se_recalibrate(fmap, se)
        assert np.allclose(out, 0.5 * fmap)

    def test_zero_map_stays_zero(self):
        se = SEBlock.initialize(8, ratio=2, seed=1)
        out = se_recalibrate(np.zeros((2, 2, 8)), se)
        assert np.all(out == 0.0)

    def test_hand_evaluated_squeeze_excite_scale(self):
        rng = np.random.default_rng(5)
        se = SEBlock.initialize(4, ratio=2, seed=5)
        fmap = rng.normal(size=(2, 2, 4))
        # Oracle: the three steps with explicit loops.
        z = np.array([fmap[:, :, c].mean() for c in range(4)])
        a1 = np.array([sum(se.w1[i, j] * z[j] for j in range(4)) + se.b1[i] for i in range(2)])
        r = np.maximum(a1, 0.0)
        a2 = np.array([sum(se.w2[i, j] * r[j] for j in range(2)) + se.b2[i] for i in range(4)])
        s = 1.0 / (1.0 + np.exp(-a2))
        expected = np.empty_like(fmap)
        for i in range(2):
            for j in range(2):
                for c in range(4):
                    expected[i, j, c] = fmap[i, j, c] * s[c]
        assert np.allclose(se_recalibrate(fmap, se), expected, atol=1e-12)

    def test_gate_strictly_inside_unit_interval(self):
        se = SEBlock.initialize(16, ratio=4, seed=2)
        z = np.random.default_rng(3).normal(size=16)
        s = se.scale_factors(z)
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_channel_mismatch_raises(self):
        se = SEBlock.initialize(8, ratio=2)
        with pytest.raises(ShapeError):
            se_recalibrate(np.zeros((2, 2, 16)), se)

    def test_ratio_must_divide_channels(self):
        with pytest.raises(ConfigurationError):
            SEBlock.initialize(10, ratio=4)


class TestGlobalAveragePool:
    def test_constant_map(self):
        fmap = np.full((5, 7, 3), 2.5)
        assert np.allclose(global_average_pool(fmap), 2.5)

    def test_single_pixel_map_is_identity(self):
        fmap = np.arange(6, dtype=np.float64).reshape(1, 1, 6)
        assert np.array_equal(global_average_pool(fmap), fmap[0, 0])

    def test_matches_explicit_sums(self):
        fmap = np.random.default_rng(4).normal(size=(3, 3, 2))
        got = global_average_pool(fmap)
        for c in range(2):
            total = 0.0
            for i in range(3):
                for j in range(3):
                    total += fmap[i, j, c]
            assert got[c] == pytest.approx(total / 9, abs=1e-12)

    def test_pool_commutes_with_channel_scaling(self):
        rng = np.random.default_rng(6)
        fmap = rng.normal(size=(4, 5, 8))
        s = rng.uniform(0.1, 0.9, size=8)
        lhs = global_average_pool(fmap * s)
        rhs = s * global_average_pool(fmap)
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestSEPoolGradients:
    def test_analytic_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        se = SEBlock.initialize(16, ratio=4, seed=9)
        fmap = rng.normal(size=(3, 3, 16))
        upstream = rng.normal(size=16)
        d_fmap, d_params = se_pool_grads(fmap, se, upstream)

        def scalar():
            return float(upstream @ global_average_pool(se_recalibrate(fmap, se)))

        step = 1e-3
        worst = 0.0
        tensors = [(fmap, d_fmap), (se.w1, d_params["se.w1"]), (se.b1, d_params["se.b1"]),
                   (se.w2, d_params["se.w2"]), (se.b2, d_params["se.b2"])]
        for arr, grad in tensors:
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            for c in rng.choice(flat.size, size=min(20, flat.size), replace=False):
                original = flat[c]
                flat[c] = original + step
                up = scalar()
                flat[c] = original - step
                down = scalar()
                flat[c] = original
                numeric = (up - down) / (2 * step)
                worst = max(worst, abs(numeric - gflat[c]) / max(abs(numeric), abs(gflat[c]), 1e-6))
        assert worst < 1e-4


class TestExtractDeep:
    def test_deterministic_and_correct_length(self, small_corpus):
        from vtlayout.corpus import crop_blocks
        page = small_corpus.pages[0]
        (crop, *_) = crop_blocks(page, small_corpus.annotations_for(page.page_id))
        backbone = TinyBackbone.initialize(seed=0)
        se = SEBlock.initialize(backbone.channels, seed=0)
        a = extract_deep(crop, backbone, se)
        b = extract_deep(crop, backbone, se)
        assert a.shape == (backbone.channels,)
        assert np.array_equal(a, b)

    def test_zeroed_se_is_half_the_plain_pipeline(self, small_corpus):
        from vtlayout.corpus import crop_blocks
        page = small_corpus.pages[0]
        (crop, *_) = crop_blocks(page, small_corpus.annotations_for(page.page_id))
        backbone = TinyBackbone.initialize(seed=0)
        c = backbone.channels
        se = SEBlock(w1=np.zeros((c // 16, c)), b1=np.zeros(c // 16),
                     w2=np.zeros((c, c // 16)), b2=np.zeros(c))
        gated = extract_deep(crop, backbone, se)
        plain = embed_pooled(crop, backbone)
        assert np.allclose(gated, 0.5 * plain, atol=1e-12)

    def test_map_route_equals_vector_route(self, small_corpus):
        # pool(se(map)) must equal scale(pool(map)) * pool(map): this is the
        # identity that lets the pipeline cache pooled pre-gate vectors.
        from vtlayout.corpus import crop_blocks
        page = small_corpus.pages[0]
        (crop, *_) = crop_blocks(page, small_corpus.annotations_for(page.page_id))
        backbone = TinyBackbone.initialize(seed=3)
        se = SEBlock.initialize(backbone.channels, seed=3)
        z = embed_pooled(crop, backbone)
        vector_route = se.scale_factors(z) * z
        map_route = extract_deep(crop, backbone, se)
        assert np.allclose(map_route, vector_route, atol=1e-10)


class TestTensorMapFormat:
    def test_roundtrip(self, tmp_path):
        tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
                   "b": np.ones(4, dtype=np.float32)}
        path = tmp_path / "t.bin"
        nn.save_tensor_map(path, tensors, {"architecture": "x", "channels": 3})
        loaded, meta = nn.load_tensor_map(path)
        assert meta == {"architecture": "x", "channels": 3}
        assert set(loaded) == {"a", "b"}
        assert np.array_equal(loaded["a"], tensors["a"])

    def test_truncated_file_rejected(self, tmp_path):
        tensors = {"a": np.ones((8, 8), dtype=np.float32)}
        path = tmp_path / "t.bin"
        nn.save_tensor_map(path, tensors, {})
        data = path.read_bytes()
        path.write_bytes(data[:-17])
        from vtlayout.errors import IntegrityError
        with pytest.raises(IntegrityError, match="truncated"):
            nn.load_tensor_map(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        from vtlayout.errors import IntegrityError
        with pytest.raises(IntegrityError):
            nn.load_tensor_map(path)
