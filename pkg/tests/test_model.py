import numpy as np
import pytest

from vamae import autodiff as ad
from vamae.autodiff import Tensor
from vamae.errors import ConfigError
from vamae.masking import select_mask
from vamae.model import (
    ModelConfig,
    VamaeModel,
    sincos_position_embedding,
    trunc_normal,
)


def make_mask(n, ratio, seed=0):
    return select_mask(np.random.default_rng(seed).random(n), ratio)


def zero_block_weights(model):
    """Zero every residual-branch output projection so blocks become identity."""
    for blk in model.encoder_blocks + model.decoder_blocks:
        blk.attn.wo.w.data = np.zeros_like(blk.attn.wo.w.data)
        blk.attn.wo.b.data = np.zeros_like(blk.attn.wo.b.data)
        blk.mlp.fc2.w.data = np.zeros_like(blk.mlp.fc2.w.data)
        blk.mlp.fc2.b.data = np.zeros_like(blk.mlp.fc2.b.data)


class TestConfig:
    def test_paper_scale_head_ends_at_patch_dim(self):
        cfg = ModelConfig.paper_scale()
        assert cfg.head_hidden_dims == (256, 128)
        assert cfg.patch_dim == 256  # 16x16 patches: final projection is P^2

    def test_divisibility_validated(self):
        with pytest.raises(ConfigError):
            ModelConfig(encoder_dim=65)
        with pytest.raises(ConfigError):
            ModelConfig(image_size=60, patch_size=8)

    def test_round_trip_dict(self, desk_config):
        assert ModelConfig.from_dict(desk_config.to_dict()) == desk_config

    def test_encoder_larger_than_decoder(self, desk_config):
        model = VamaeModel(desk_config)
        enc = sum(p.data.size for p in model.encoder_parameters())
        dec_names = {p.name for p in model.parameters()} - {
            p.name for p in model.encoder_parameters()
        }
        dec = sum(
            p.data.size
            for p in model.parameters()
            if p.name in dec_names and p.name.startswith("decoder")
        )
        assert enc > dec


class TestPositionEmbedding:
    def test_shape_and_determinism(self):
        emb = sincos_position_embedding(4, 4, 16)
        assert emb.shape == (16, 16)
        assert np.array_equal(emb, sincos_position_embedding(4, 4, 16))

    def test_distinct_positions(self):
        emb = sincos_position_embedding(8, 8, 64)
        # all rows pairwise distinct
        assert len(np.unique(np.round(emb, 9), axis=0)) == 64


class TestTruncNormal:
    def test_bounded_and_seeded(self):
        rng = np.random.default_rng(5)
        w = trunc_normal(rng, (1000,), std=0.02)
        assert np.abs(w).max() <= 0.04
        w2 = trunc_normal(np.random.default_rng(5), (1000,), std=0.02)
        assert np.array_equal(w, w2)


class TestForward:
    def test_visible_token_counts(self, tiny_config):
        model = VamaeModel(tiny_config)
        patches = np.random.default_rng(0).random((4, 64))
        assert model.embed_visible(patches, None).shape == (4, tiny_config.encoder_dim)
        mask = make_mask(4, 0.75)
        assert model.embed_visible(patches, mask).shape == (1, tiny_config.encoder_dim)

    def test_quarter_visible_at_ratio_75(self, desk_config):
        model = VamaeModel(desk_config)
        n = model.n_patches
        mask = make_mask(n, 0.75)
        patches = np.random.default_rng(0).random((n, desk_config.patch_dim))
        latents = model.encode(model.embed_visible(patches, mask))
        assert latents.shape == (n // 4, desk_config.encoder_dim)

    def test_encode_shape_contract(self, tiny_config):
        model = VamaeModel(tiny_config)
        tokens = Tensor(np.random.default_rng(1).random((3, 8)).astype(np.float32))
        assert model.encode(tokens).shape == (3, 8)

    def test_encode_zero_weights_identity(self, tiny_config):
        model = VamaeModel(tiny_config)
        zero_block_weights(model)
        tokens = np.random.default_rng(2).random((4, 8)).astype(np.float32)
        out = model.encode(Tensor(tokens))
        assert np.array_equal(out.data, tokens)

    def test_encode_permutation_equivariance(self, desk_config):
        model = VamaeModel(desk_config, rng=np.random.default_rng(3))
        rng = np.random.default_rng(4)
        tokens = rng.random((10, desk_config.encoder_dim)).astype(np.float32)
        perm = np.arange(10)
        perm[[2, 7]] = perm[[7, 2]]
        out = model.encode(Tensor(tokens)).data
        out_p = model.encode(Tensor(tokens[perm])).data
        assert np.allclose(out[perm], out_p, atol=1e-5)

    def test_decode_fills_every_position(self, tiny_config):
        model = VamaeModel(tiny_config)
        mask = make_mask(4, 0.5)
        latents = Tensor(np.zeros((2, 8), dtype=np.float32))
        assert model.decode(latents, mask).shape == (4, 8)

    def test_decode_zero_weights_mask_token_plus_pos(self, tiny_config):
        model = VamaeModel(tiny_config)
        zero_block_weights(model)
        model.decoder_embed.w.data = np.zeros_like(model.decoder_embed.w.data)
        mask = make_mask(4, 0.5)
        latents = Tensor(np.ones((2, 8), dtype=np.float32))
        out = model.decode(latents, mask).data
        expected = model.mask_token.data[0] + model.dec_pos[mask.masked_indices]
        assert np.allclose(out[mask.masked_indices], expected, atol=1e-7)
        # visible rows carry only their positional embedding (embed zeroed)
        vis = mask.visible_indices()
        assert np.allclose(out[vis], model.dec_pos[vis], atol=1e-7)

    def test_heads_shapes_and_independence(self, tiny_config):
        model = VamaeModel(tiny_config)
        patches = np.random.default_rng(5).random((4, 64))
        mask = make_mask(4, 0.5)
        out = model.forward_pretrain(patches, mask)
        for pred in (out.pred_intensity, out.pred_vesselness, out.pred_skeleton):
            assert pred.shape == (4, 64)
        assert out.latents.shape == (2, 8)

        before_i = out.pred_intensity.data.copy()
        before_v = out.pred_vesselness.data.copy()
        before_s = out.pred_skeleton.data.copy()
        model.heads["skeleton"].out.w.data += 1.0
        out2 = model.forward_pretrain(patches, mask)
        assert np.array_equal(out2.pred_intensity.data, before_i)
        assert np.array_equal(out2.pred_vesselness.data, before_v)
        assert not np.array_equal(out2.pred_skeleton.data, before_s)

    def test_forward_deterministic(self, tiny_config):
        model = VamaeModel(tiny_config, rng=np.random.default_rng(8))
        patches = np.random.default_rng(9).random((4, 64))
        mask = make_mask(4, 0.75, seed=2)
        a = model.forward_pretrain(patches, mask)
        b = model.forward_pretrain(patches, mask)
        assert np.array_equal(a.pred_intensity.data, b.pred_intensity.data)

    def test_masked_predictions_depend_on_visible_content(self, tiny_config):
        model = VamaeModel(tiny_config, rng=np.random.default_rng(10))
        rng = np.random.default_rng(11)
        patches = rng.random((4, 64))
        mask = make_mask(4, 0.75, seed=1)
        visible = mask.visible_indices()[0]
        out1 = model.forward_pretrain(patches, mask).pred_intensity.data
        patches2 = patches.copy()
        patches2[visible] += 0.25
        out2 = model.forward_pretrain(patches2, mask).pred_intensity.data
        assert not np.allclose(
            out1[mask.masked_indices], out2[mask.masked_indices], atol=1e-7
        )

    def test_unique_parameter_names(self, desk_config):
        model = VamaeModel(desk_config)
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))

    def test_state_dict_round_trip(self, tiny_config):
        m1 = VamaeModel(tiny_config, rng=np.random.default_rng(1))
        m2 = VamaeModel(tiny_config, rng=np.random.default_rng(2))
        patches = np.random.default_rng(3).random((4, 64))
        mask = make_mask(4, 0.5)
        m2.load_state_dict({k: p.data for k, p in m1.state_dict().items()})
        a = m1.forward_pretrain(patches, mask).pred_skeleton.data
        b = m2.forward_pretrain(patches, mask).pred_skeleton.data
        assert np.array_equal(a, b)

    def test_load_rejects_mismatch(self, tiny_config):
        model = VamaeModel(tiny_config)
        with pytest.raises(ConfigError):
            model.load_state_dict({"nope": np.zeros(3)})
