"""Backbone shapes, PCAM pooling invariants, corpus selection, pretraining loss."""

import math

import numpy as np
import pytest

from cvit import backbone as B
from cvit import tensor as T
from cvit.data import FINDINGS
from cvit.errors import ConfigError, DataError
from cvit.tensor import Tape, Tensor, backward, grad_check

RNG = lambda s: np.random.default_rng(s)


def _small(rng=None, depth=2, channels=8, findings=("opacity", "consolidation", "pneumonia"), dtype=np.float64):
    rng = rng or RNG(0)
    bb = B.Backbone(rng, depth=depth, out_channels=channels, dtype=dtype)
    heads = B.PcamHeads(rng, channels, findings, dtype=dtype)
    return bb, heads


class TestBackbone:
    def test_shape_contract(self):
        bb = B.Backbone(RNG(1), depth=3, out_channels=64)
        fmap = bb(Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32)))
        assert fmap.grid.shape == (2, 64, 8, 8)
        assert fmap.tokens().shape == (2, 64, 64)

    def test_indivisible_size_rejected(self):
        bb = B.Backbone(RNG(2), depth=3, out_channels=16)
        with pytest.raises(ConfigError):
            bb(Tensor(np.zeros((1, 1, 60, 60), dtype=np.float32)))

    def test_zero_weights_zero_output(self):
        bb = B.Backbone(RNG(3), depth=2, out_channels=8, dtype=np.float64)
        for stage in bb.stages:
            stage["conv1_w"].value.data[:] = 0
            stage["conv2_w"].value.data[:] = 0
        out = bb(Tensor(RNG(4).normal(size=(1, 1, 16, 16)))).grid.numpy()
        np.testing.assert_allclose(out, 0.0)

    def test_deterministic_same_seed(self):
        x = RNG(5).normal(size=(1, 1, 32, 32)).astype(np.float32)
        a = B.Backbone(RNG(6), depth=2, out_channels=8)(Tensor(x)).grid.numpy()
        b = B.Backbone(RNG(6), depth=2, out_channels=8)(Tensor(x)).grid.numpy()
        np.testing.assert_array_equal(a, b)

    def test_token_view_is_row_major_reshape(self):
        bb = B.Backbone(RNG(7), depth=1, out_channels=4, dtype=np.float64)
        fmap = bb(Tensor(RNG(8).normal(size=(1, 1, 8, 8))))
        grid = fmap.grid.numpy()[0]  # (C, H, W)
        tokens = fmap.tokens().numpy()[0]  # (H*W, C)
        h, w = grid.shape[1:]
        for i in range(h):
            for j in range(w):
                np.testing.assert_array_equal(tokens[i * w + j], grid[:, i, j])


class TestPcam:
    def test_uniform_scores_give_uniform_attention(self):
        bb, heads = _small()
        heads.score_w.value.data[:] = 0.0  # constant score map
        fmap = bb(Tensor(RNG(9).normal(size=(2, 1, 16, 16))))
        out = heads(fmap)
        h = fmap.height * fmap.width
        np.testing.assert_allclose(out.attention.numpy(), 1.0 / h, atol=1e-12)

    def test_hot_cell_attention_value(self):
        # scores (10,-10,-10,-10): attention at the hot cell is
        # sigmoid(10) / (sigmoid(10) + 3 sigmoid(-10))
        scores = np.array([[10.0, -10.0], [-10.0, -10.0]])
        s = 1.0 / (1.0 + np.exp(-scores))
        expected_hot = s[0, 0] / s.sum()
        assert expected_hot == pytest.approx(0.999864, abs=1e-6)
        probs = T.sigmoid(Tensor(scores[None, None], dtype="f64"))
        att = T.div(probs, T.reduce_sum(probs))
        assert att.numpy()[0, 0, 0, 0] == pytest.approx(expected_hot, abs=1e-12)

    def test_attention_sums_to_one(self):
        bb, heads = _small(RNG(10))
        fmap = bb(Tensor(RNG(11).normal(size=(3, 1, 16, 16))))
        att = heads(fmap).attention.numpy()
        np.testing.assert_allclose(att.sum(axis=(2, 3)), 1.0, atol=1e-6)
        probs = heads(fmap).prob_maps.numpy()
        assert (probs > 0).all() and (probs < 1).all()

    def test_constant_feature_pooled_equals_pixel_feature(self):
        bb, heads = _small(RNG(12))
        fmap = bb(Tensor(RNG(13).normal(size=(1, 1, 16, 16))))
        const = np.tile(RNG(14).normal(size=(1, 8, 1, 1)), (1, 1, 4, 4))
        out = heads(B.FeatureMap(Tensor(const)))
        np.testing.assert_allclose(out.pooled.numpy()[0], np.tile(const[0, :, 0, 0], (3, 1)), atol=1e-9)

    def test_spatial_permutation_equivariance(self):
        _, heads = _small(RNG(15))
        grid = RNG(16).normal(size=(1, 8, 4, 4))
        out = heads(B.FeatureMap(Tensor(grid)))
        perm = RNG(17).permutation(16)
        permuted = grid.reshape(1, 8, 16)[:, :, perm].reshape(1, 8, 4, 4)
        out_p = heads(B.FeatureMap(Tensor(permuted)))
        # attention permutes identically; pooled features and probs unchanged
        np.testing.assert_allclose(
            out_p.attention.numpy().reshape(3, 16), out.attention.numpy().reshape(3, 16)[:, perm], atol=1e-12
        )
        np.testing.assert_allclose(out_p.pooled.numpy(), out.pooled.numpy(), atol=1e-10)
        np.testing.assert_allclose(out_p.probs.numpy(), out.probs.numpy(), atol=1e-12)


class TestPretrainLoss:
    def test_exact_predictions_zero_loss(self):
        labels = np.array([[1, 0, 1]])
        loss = B.finding_bce(Tensor(labels.astype(np.float64)), labels)
        assert loss.item() == 0.0

    def test_half_everywhere_ln2(self):
        labels = np.array([[1, 0], [0, 1]])
        loss = B.finding_bce(Tensor(np.full((2, 2), 0.5), dtype="f64"), labels)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_bad_labels_rejected(self):
        with pytest.raises(DataError):
            B.finding_bce(Tensor(np.full((1, 2), 0.5)), np.array([[0.4, 1.0]]))

    def test_gradient_through_pcam_path(self):
        bb, heads = _small(RNG(18), depth=2, channels=6)
        labels = np.array([[1, 0, 1], [0, 1, 0]])

        def f(img):
            out = heads(bb(img))
            return B.finding_bce(out.probs, labels)

        err = grad_check(f, Tensor(RNG(19).normal(size=(2, 1, 8, 8))), eps=1e-5)
        assert err <= 1e-4


class TestCorpus:
    def test_before_pcam_is_identity(self):
        bb, heads = _small(RNG(20))
        fmap = bb(Tensor(RNG(21).normal(size=(1, 1, 16, 16))))
        out = B.select_corpus(fmap, None, "before-pcam", FINDINGS)
        assert out is fmap

    def test_after_pcam_channel_extents(self):
        bb, heads = _small(RNG(22), channels=8, findings=FINDINGS)
        fmap = bb(Tensor(RNG(23).normal(size=(1, 1, 16, 16))))
        pcam = heads(fmap)
        assert B.select_corpus(fmap, pcam, "after-pcam:1", FINDINGS).grid.shape[1] == 8
        assert B.select_corpus(fmap, pcam, "after-pcam:3", FINDINGS).grid.shape[1] == 24
        assert B.select_corpus(fmap, pcam, "after-pcam:10", FINDINGS).grid.shape[1] == 80
        assert B.corpus_channels("after-pcam:3", 64, FINDINGS) == 192

    def test_uniform_attention_weighted_map_is_scaled_feature(self):
        bb, heads = _small(RNG(24), findings=FINDINGS)
        heads.score_w.value.data[:] = 0.0
        fmap = bb(Tensor(RNG(25).normal(size=(1, 1, 16, 16))))
        pcam = heads(fmap)
        out = B.select_corpus(fmap, pcam, "after-pcam:1", FINDINGS)
        n = fmap.height * fmap.width
        np.testing.assert_allclose(out.grid.numpy(), fmap.grid.numpy() / n, atol=1e-9)

    def test_unknown_mode_and_missing_finding(self):
        bb, heads = _small(RNG(26))
        fmap = bb(Tensor(np.zeros((1, 1, 16, 16))))
        with pytest.raises(ConfigError):
            B.select_corpus(fmap, None, "after-pcam:2", FINDINGS)
        with pytest.raises(ConfigError):
            B.select_corpus(fmap, heads(fmap), "after-pcam:1", ("a", "b"))
