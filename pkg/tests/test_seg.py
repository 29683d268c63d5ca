import numpy as np
import pytest

from vamae.errors import DimensionError
from vamae.model import ModelConfig, VamaeModel
from vamae.seg import (
    SegHead,
    binarize_logits,
    dice,
    evaluate_pair,
    iou,
    precision,
    recall,
    seg_forward,
)


class TestSegHead:
    def test_output_matches_input_resolution(self, tiny_config):
        model = VamaeModel(tiny_config)
        head = SegHead(tiny_config)
        img = np.random.default_rng(0).random((16, 16))
        logits = seg_forward(img, model, head)
        assert logits.shape == (16, 16)

    def test_block_count_follows_patch_size(self, desk_config):
        assert len(SegHead(desk_config).blocks) == 3  # P=8
        cfg16 = ModelConfig(image_size=64, patch_size=16, encoder_dim=64)
        assert len(SegHead(cfg16).blocks) == 4  # P=16: four upsampling blocks

    def test_channel_schedule_halves(self, desk_config):
        head = SegHead(desk_config)
        chans = [(b.c_in, b.c_out) for b in head.blocks]
        assert chans == [(64, 32), (32, 16), (16, 8)]

    def test_deterministic(self, tiny_config):
        model = VamaeModel(tiny_config, rng=np.random.default_rng(1))
        head = SegHead(tiny_config, rng=np.random.default_rng(2))
        img = np.random.default_rng(3).random((16, 16))
        a = seg_forward(img, model, head).data
        b = seg_forward(img, model, head).data
        assert np.array_equal(a, b)

    def test_encoder_sees_all_patches(self, tiny_config, monkeypatch):
        model = VamaeModel(tiny_config)
        head = SegHead(tiny_config)
        seen = {}
        orig = model.encode

        def spy(tokens):
            seen["count"] = tokens.shape[0]
            return orig(tokens)

        monkeypatch.setattr(model, "encode", spy)
        seg_forward(np.zeros((16, 16)), model, head)
        assert seen["count"] == model.n_patches

    def test_shape_invariance_other_sizes(self):
        cfg = ModelConfig(image_size=32, patch_size=8, encoder_dim=32,
                          encoder_depth=1, encoder_heads=2, decoder_depth=1,
                          decoder_dim=16, decoder_heads=2, head_hidden_dims=(16,))
        model = VamaeModel(cfg)
        head = SegHead(cfg)
        out = seg_forward(np.zeros((32, 32)), model, head)
        assert out.shape == (32, 32)

    def test_token_shape_validated(self, tiny_config):
        head = SegHead(tiny_config)
        from vamae.autodiff import Tensor

        with pytest.raises(DimensionError):
            head(Tensor(np.zeros((3, 8), dtype=np.float32)))


class TestMetrics:
    def test_identical_masks(self):
        m = np.zeros((8, 8), dtype=np.uint8)
        m[2:5, 2:5] = 1
        assert dice(m, m) == 1.0
        assert iou(m, m) == 1.0
        assert precision(m, m) == 1.0
        assert recall(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice(a, b) == 0.0
        assert iou(a, b) == 0.0

    def test_half_overlap(self):
        a = np.array([[1, 1, 0, 0]], dtype=np.uint8)
        b = np.array([[0, 1, 1, 0]], dtype=np.uint8)
        assert dice(a, b) == 0.5

    def test_subset_precision_recall(self):
        target = np.zeros((4, 4), dtype=np.uint8)
        target[1:3, 1:3] = 1
        pred = np.zeros_like(target)
        pred[1, 1] = 1  # strict subset
        assert precision(pred, target) == 1.0
        assert recall(pred, target) < 1.0

    def test_empty_conventions(self):
        empty = np.zeros((3, 3), dtype=np.uint8)
        one = empty.copy()
        one[0, 0] = 1
        assert dice(empty, empty) == 1.0
        assert iou(empty, empty) == 1.0
        assert precision(empty, one) == 0.0
        assert precision(empty, empty) == 1.0
        assert recall(one, empty) == 0.0

    def test_dice_symmetry_and_iou_identity(self, rng):
        for _ in range(100):
            a = (rng.random((6, 6)) > 0.6).astype(np.uint8)
            b = (rng.random((6, 6)) > 0.6).astype(np.uint8)
            assert dice(a, b) == dice(b, a)
            d, i = dice(a, b), iou(a, b)
            assert abs(d - (2.0 * i / (1.0 + i))) < 1e-12
            assert i <= d + 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice(np.zeros((2, 2), dtype=np.uint8), np.zeros((3, 3), dtype=np.uint8))

    def test_binarize_at_zero_logit(self):
        logits = np.array([[-0.1, 0.0], [0.1, 5.0]])
        assert np.array_equal(binarize_logits(logits), [[0, 0], [1, 1]])

    def test_evaluate_pair_bundle(self):
        m = np.zeros((4, 4), dtype=np.uint8)
        m[0] = 1
        metrics = evaluate_pair(m, m)
        assert metrics.dice == metrics.iou == metrics.precision == metrics.recall == 1.0
