"""Model assembly shape contracts and the offline similarity path."""

import numpy as np
import pytest

from dams.amtpn import ConfigError, PyramidConfig
from dams.cbam import CbamConfig
from dams.model import (Backbone, ClipPathConfig, DamsModel,
                        DegenerateEmbeddingError, ModelConfig,
                        clip_binary_probs, clip_scores, pseudo_labels)

SMALL = ModelConfig(input_dim=16, channels=8, depth=1, head_hidden=4,
                    pyramid=PyramidConfig(scales=(1, 3), channels=8,
                                          reduction_ratio=2),
                    cbam=CbamConfig(reduction_ratio=2, temporal_kernel=3))


def rng(seed=0):
    return np.random.default_rng(seed)


class TestBackbone:
    def test_depth_zero_is_pure_projection(self):
        bb = Backbone(6, 4, 0, rng(0))
        x = rng(1).standard_normal((2, 6, 7))
        out = bb.forward(x, train=True)
        expected = bb.proj.forward(x)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("t", [1, 2, 7, 27, 64])
    def test_length_preserved(self, t):
        bb = Backbone(6, 4, 2, rng(2))
        x = rng(3).standard_normal((2, 6, t))
        assert bb.forward(x, train=False).shape == (2, 4, t)

    def test_gradient(self):
        from dams.checks import check_backbone
        for seed in range(3):
            report = check_backbone(seed, tolerance=1e-5)
            assert report.passed, f"seed {seed}: {report.max_rel_error}"


class TestModelForward:
    def test_shape_contract(self):
        model = DamsModel(ModelConfig(input_dim=32, channels=16, depth=1),
                          rng(0))
        x = rng(1).standard_normal((2, 32, 32))
        out = model.forward(x)
        assert out.frame_logits.shape == (2, 32)
        assert out.frame_scores.shape == (2, 32)
        assert out.embeddings.shape == (2, 16, 32)
        assert out.aff_weights.shape == (2, 4)

    def test_scores_in_unit_interval(self):
        model = DamsModel(SMALL, rng(2))
        x = rng(3).standard_normal((2, 16, 12)) * 10
        out = model.forward(x)
        assert np.all(out.frame_scores > 0) and np.all(out.frame_scores < 1)

    def test_deterministic_forward(self):
        model = DamsModel(SMALL, rng(4))
        x = rng(5).standard_normal((1, 16, 9))
        a = model.forward(x).frame_logits
        b = model.forward(x).frame_logits
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("t", [1, 2, 7, 27, 64])
    def test_all_lengths(self, t):
        model = DamsModel(SMALL, rng(6))
        out = model.forward(rng(7).standard_normal((1, 16, t)))
        assert out.frame_logits.shape == (1, t)

    def test_ablation_switches_change_structure(self):
        base = DamsModel(SMALL, rng(8))
        assert base.amtpn is not None and base.cbam is not None
        import dataclasses
        off = dataclasses.replace(SMALL, use_amtpn=False, use_cbam=False)
        bare = DamsModel(off, rng(8))
        assert bare.amtpn is None and bare.cbam is None
        x = rng(9).standard_normal((1, 16, 9))
        assert bare.forward(x).frame_logits.shape == (1, 9)

    def test_use_tpp_false_forces_single_scale(self):
        import dataclasses
        cfg = dataclasses.replace(SMALL, use_tpp=False)
        assert cfg.pyramid.scales == (1,)

    def test_dropout_deterministic_under_rng(self):
        import dataclasses
        cfg = dataclasses.replace(SMALL, dropout=0.5)
        model = DamsModel(cfg, rng(10))
        x = rng(11).standard_normal((2, 16, 9))
        a = model.forward(x, train=True,
                          dropout_rng=np.random.default_rng(7)).frame_logits
        b = model.forward(x, train=True,
                          dropout_rng=np.random.default_rng(7)).frame_logits
        np.testing.assert_array_equal(a, b)

    def test_full_model_gradient(self):
        from dams.checks import check_full_model
        report = check_full_model(0, tolerance=1e-4, max_entries_per_param=3,
                                  rng=np.random.default_rng(0))
        assert report.passed, report.max_rel_error


class TestClipScores:
    def test_rows_sum_to_one(self):
        v = rng(0).standard_normal((5, 8))
        u = rng(1).standard_normal((3, 8))
        s = clip_scores(v, u, ClipPathConfig())
        assert s.shape == (5, 3)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)

    def test_single_class_all_ones(self):
        s = clip_scores(rng(2).standard_normal((4, 8)),
                        rng(3).standard_normal((1, 8)), ClipPathConfig())
        np.testing.assert_allclose(s, 1.0, atol=1e-12)

    def test_closed_form_orthogonal(self):
        # frame equals text 0 and is orthogonal to the others; temperature 1
        u = np.eye(3)
        v = np.asarray([[1.0, 0.0, 0.0]])
        s = clip_scores(v, u, ClipPathConfig(temperature=1.0))
        expected = np.e / (np.e + 2.0)
        np.testing.assert_allclose(s[0, 0], expected, atol=1e-12)

    def test_scale_invariance(self):
        v = rng(4).standard_normal((4, 8))
        u = rng(5).standard_normal((2, 8))
        a = clip_scores(v, u, ClipPathConfig())
        b = clip_scores(3.7 * v, u, ClipPathConfig())
        c = clip_scores(v, 0.2 * u, ClipPathConfig())
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, c, atol=1e-12)

    def test_zero_norm_rejected(self):
        v = np.zeros((2, 4))
        with pytest.raises(DegenerateEmbeddingError):
            clip_scores(v, np.eye(4), ClipPathConfig())

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            clip_scores(np.ones((2, 4)), np.ones((2, 5)), ClipPathConfig())

    def test_offline_determinism(self):
        v = rng(6).standard_normal((4, 8))
        u = rng(7).standard_normal((2, 8))
        a = clip_scores(v, u, ClipPathConfig())
        b = clip_scores(v, u, ClipPathConfig())
        np.testing.assert_array_equal(a, b)


class TestClipBinaryProbs:
    def test_identical_frames_give_half(self):
        v = np.tile(rng(0).standard_normal(8), (5, 1))
        u = rng(1).standard_normal((2, 8))
        p = clip_binary_probs(v, u, ClipPathConfig())
        np.testing.assert_allclose(p, 0.5, atol=1e-12)

    def test_lambda_to_zero_collapses_to_half(self):
        v = rng(2).standard_normal((6, 8))
        u = rng(3).standard_normal((2, 8))
        p = clip_binary_probs(v, u, ClipPathConfig(scaling=1e-9))
        np.testing.assert_allclose(p, 0.5, atol=1e-6)

    def test_two_frame_scalar_case(self):
        # cosines 0.9 and 0.1, lambda 10: centered logits +/-4
        u = np.asarray([[1.0, 0.0]])
        v = np.asarray([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(1 - 0.01)]])
        p = clip_binary_probs(v, u, ClipPathConfig(scaling=10.0))
        expected = 1.0 / (1.0 + np.exp(-np.asarray([4.0, -4.0])))
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_values_in_open_interval(self):
        p = clip_binary_probs(rng(4).standard_normal((10, 8)),
                              rng(5).standard_normal((3, 8)),
                              ClipPathConfig())
        assert np.all(p > 0) and np.all(p < 1)


class TestPseudoLabels:
    def test_strict_threshold(self):
        labels = pseudo_labels(np.asarray([0.2, 0.7, 0.5]), 0.5)
        np.testing.assert_array_equal(labels, [0.0, 1.0, 0.0])

    def test_threshold_near_one_all_zero(self):
        labels = pseudo_labels(rng(0).random(20), 1.0 - 1e-12)
        np.testing.assert_array_equal(labels, np.zeros(20))

    def test_monotone_in_threshold(self):
        probs = rng(1).random(50)
        prev = pseudo_labels(probs, 0.1)
        for theta in (0.3, 0.5, 0.7, 0.9):
            cur = pseudo_labels(probs, theta)
            assert np.all(cur <= prev)
            prev = cur


class TestClipPathConfig:
    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            ClipPathConfig(temperature=0.0)
        with pytest.raises(ConfigError):
            ClipPathConfig(scaling=-1.0)
        with pytest.raises(ConfigError):
            ClipPathConfig(threshold=1.0)
