import math

import numpy as np
import pytest

from endoclass.dataset import ClassSet
from endoclass.errors import FusionMismatch, ShapeMismatch
from endoclass.models import (BackboneConfig, DenseBlock, DenseBlockConfig,
                              ResidualBlock, ResidualBlockConfig, Backbone,
                              build_ensemble, channel_trace, densenet121_config,
                              ensemble_forward, resnet50_config, softmax,
                              tiny_densenet_config, tiny_resnet_config)

CLASSES = ClassSet([f"c{i}" for i in range(10)])


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_large_logits_do_not_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_exp_of_logs_recovers_ratios(self):
        # Oracle: softmax(ln k) is k / sum(k) by direct exponentiation.
        logits = np.log(np.array([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_allclose(softmax(logits), [0.1, 0.2, 0.3, 0.4],
                                   rtol=1e-12)

    def test_translation_invariance(self):
        rng = rng_for(0)
        z = rng.normal(size=(4, 10))
        np.testing.assert_allclose(softmax(z), softmax(z + 17.3), atol=1e-9)


class TestResidualBlock:
    def test_zero_main_branch_reduces_to_activation(self):
        cfg = ResidualBlockConfig(in_channels=8, out_channels=8, stride=1)
        block = ResidualBlock("rb", cfg, rng_for(1))
        assert block.shortcut is None  # identity shortcut
        # Zero the last BN's affine params so F(x) vanishes.
        bn3 = block.main.layers[-1]
        bn3.gamma.data[:] = 0.0
        bn3.beta.data[:] = 0.0
        x = rng_for(2).normal(size=(2, 8, 6, 6))
        out = block.forward(x, train=False)
        np.testing.assert_allclose(out, np.maximum(x, 0.0))

    def test_stride_one_preserves_shape(self):
        cfg = ResidualBlockConfig(in_channels=16, out_channels=16, stride=1)
        block = ResidualBlock("rb", cfg, rng_for(3))
        out = block.forward(np.zeros((2, 16, 8, 8)), train=False)
        assert out.shape == (2, 16, 8, 8)

    def test_stride_two_halves_spatial_dims(self):
        cfg = ResidualBlockConfig(in_channels=16, out_channels=32, stride=2)
        block = ResidualBlock("rb", cfg, rng_for(4))
        assert block.shortcut is not None  # projection required
        out = block.forward(np.zeros((2, 16, 8, 8)), train=False)
        assert out.shape == (2, 32, 4, 4)

    def test_channel_mismatch_raises(self):
        cfg = ResidualBlockConfig(in_channels=8, out_channels=8)
        block = ResidualBlock("rb", cfg, rng_for(5))
        with pytest.raises(ShapeMismatch):
            block.forward(np.zeros((1, 4, 8, 8)), train=False)


class TestDenseBlock:
    def test_channel_count(self):
        cfg = DenseBlockConfig(num_layers=6, growth_rate=32, in_channels=64)
        assert cfg.out_channels == 64 + 6 * 32 == 256
        block = DenseBlock("db", cfg, rng_for(6))
        out = block.forward(np.zeros((1, 64, 4, 4)), train=False)
        assert out.shape == (1, 256, 4, 4)

    def test_single_layer_concat_keeps_input_prefix(self):
        cfg = DenseBlockConfig(num_layers=1, growth_rate=8, in_channels=5)
        block = DenseBlock("db", cfg, rng_for(7))
        x = rng_for(8).normal(size=(2, 5, 4, 4))
        out = block.forward(x, train=False)
        assert out.shape[1] == 5 + 8
        np.testing.assert_array_equal(out[:, :5], x)

    def test_spatial_dims_unchanged(self):
        cfg = DenseBlockConfig(num_layers=3, growth_rate=4, in_channels=8)
        block = DenseBlock("db", cfg, rng_for(9))
        out = block.forward(np.zeros((1, 8, 7, 9)), train=False)
        assert out.shape == (1, 8 + 12, 7, 9)


class TestChannelTraces:
    def test_densenet_121_hand_trace(self):
        # Oracle: hand-traced 121 plan with halving transitions.
        # stem 64 -> block 256 -> trans 128 -> block 512 -> trans 256
        #   -> block 1024 -> trans 512 -> block 1024
        cfg = densenet121_config(10)
        assert channel_trace(cfg) == [64, 256, 128, 512, 256, 1024, 512, 1024]
        assert cfg.feature_dim == 1024

    def test_resnet_50_widths(self):
        cfg = resnet50_config(10)
        assert channel_trace(cfg) == [64, 256, 512, 1024, 2048]
        assert cfg.feature_dim == 2048

    def test_tiny_dims_stay_small(self):
        assert tiny_densenet_config(10).feature_dim <= 64
        assert tiny_resnet_config(10).feature_dim <= 64
        assert tiny_densenet_config(10).stage_sizes == (1, 1)
        assert tiny_resnet_config(10).stage_sizes == (1, 1)

    def test_config_roundtrip(self):
        cfg = densenet121_config(7, input_size=64)
        again = BackboneConfig.from_dict(cfg.to_dict())
        assert again == cfg


class TestBackboneForward:
    def test_tiny_densenet_shapes(self):
        cfg = tiny_densenet_config(10)
        net = Backbone(cfg, rng_for(10), "a")
        logits, feats = net.forward(np.zeros((2, 3, 32, 32)), train=False)
        assert logits.shape == (2, 10)
        assert feats.shape == (2, cfg.feature_dim)

    def test_tiny_resnet_shapes(self):
        cfg = tiny_resnet_config(10)
        net = Backbone(cfg, rng_for(11), "b")
        logits, feats = net.forward(np.zeros((2, 3, 32, 32)), train=False)
        assert logits.shape == (2, 10)
        assert feats.shape == (2, cfg.feature_dim)

    def test_zero_feature_map_gives_bias_logits(self):
        cfg = tiny_resnet_config(4)
        net = Backbone(cfg, rng_for(12), "b")
        net.classifier.bias.data[:] = np.array([1.0, -2.0, 3.0, 0.5])
        feats = np.zeros((3, cfg.feature_dim))
        logits = net.classifier.forward(feats, train=False)
        np.testing.assert_allclose(logits,
                                   np.tile([1.0, -2.0, 3.0, 0.5], (3, 1)))


class TestEnsemble:
    def make_tiny(self, fusion="mean_prob", k=10):
        cs = ClassSet([f"c{i}" for i in range(k)])
        return build_ensemble("tiny", cs, fusion=fusion, seed=0)

    def test_identical_logits_collapse_to_softmax(self):
        z = np.array([[0.3, -1.0, 2.0]])
        for fusion in ("mean_prob", "mean_logit"):
            model = self.make_tiny(fusion, k=3)
            np.testing.assert_allclose(model.fuse(z, z), softmax(z), rtol=1e-12)

    def test_uniform_partner_preserves_argmax(self):
        model = self.make_tiny("mean_prob", k=4)
        za = np.array([[4.0, 0.0, 0.0, 0.0]])
        zb = np.zeros((1, 4))
        probs = model.fuse(za, zb)
        assert probs.argmax() == 0

    def test_fusion_symmetry(self):
        model = self.make_tiny("mean_prob", k=5)
        rng = rng_for(13)
        za, zb = rng.normal(size=(2, 3, 5))
        np.testing.assert_array_equal(model.fuse(za, zb), model.fuse(zb, za))

    def test_probability_rows_normalized(self):
        model = self.make_tiny()
        x = rng_for(14).normal(size=(4, 3, 32, 32))
        probs, la, lb, feats = ensemble_forward(model, x)
        assert probs.shape == (4, 10)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert feats.shape == (4, model.feature_dim)

    def test_k_mismatch_raises(self):
        cs10 = ClassSet([f"c{i}" for i in range(10)])
        a = Backbone(tiny_densenet_config(10), rng_for(15), "a")
        b = Backbone(tiny_resnet_config(9), rng_for(16), "b")
        with pytest.raises(FusionMismatch):
            from endoclass.models import EnsembleModel
            EnsembleModel(a, b, cs10)

    def test_default_feature_width_is_3072(self):
        # 1024 + 2048 from the two default layouts.
        assert (densenet121_config(10).feature_dim
                + resnet50_config(10).feature_dim) == 3072

    def test_duplicate_inputs_give_identical_features(self):
        model = self.make_tiny()
        x = rng_for(17).normal(size=(1, 3, 32, 32))
        batch = np.concatenate([x, x], axis=0)
        _, _, _, feats = model.forward(batch, train=False)
        np.testing.assert_array_equal(feats[0], feats[1])
        assert np.all(np.isfinite(feats))
