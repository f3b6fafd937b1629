"""Heads: classifier, map head, zone geometry, ROI pooling, losses."""

import math

import numpy as np
import pytest

from cvit import heads as H
from cvit import tensor as T
from cvit.errors import DataError, ShapeError
from cvit.nn import Param
from cvit.tensor import Tape, Tensor, backward
from oracles import brute_zone_argmax, brute_zone_pool, scalar_softmax_ce


def _rect_mask(height=32, width=32, rows=(4, 28), lungs=((2, 14), (18, 30))):
    mask = np.zeros((height, width), dtype=bool)
    for c0, c1 in lungs:
        mask[rows[0] : rows[1], c0:c1] = True
    return mask


def _random_mask(rng, size=24):
    mask = np.zeros((size, size), dtype=bool)
    for c0, c1 in ((1, size // 2 - 1), (size // 2 + 1, size - 1)):
        top = rng.integers(1, size // 3)
        bot = rng.integers(2 * size // 3, size)
        for r in range(top, bot):
            wobble = rng.integers(0, 3)
            mask[r, c0 + wobble : c1 - rng.integers(0, 3)] = True
    return mask


class TestClassifier:
    def test_zero_weights_pass_bias(self):
        head = H.ClassifierHead(np.random.default_rng(0), dim=4, dtype=np.float64)
        head.w.value.data[:] = 0.0
        head.b.value.data[:] = [1.0, 0.0, -1.0]
        logits = head(Tensor(np.zeros((2, 4))))
        np.testing.assert_allclose(logits.numpy(), [[1.0, 0.0, -1.0]] * 2)

    def test_uniform_logits_loss_ln3(self):
        loss = H.classification_loss(Tensor(np.zeros((2, 3)), dtype="f64"), [0, 2])
        assert loss.item() == pytest.approx(math.log(3.0), abs=1e-12)

    def test_confident_correct_drives_loss_to_zero(self):
        logits = np.array([[30.0, 0.0, 0.0]])
        loss = H.classification_loss(Tensor(logits, dtype="f64"), [0])
        assert loss.item() < 1e-8

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(3, 3))
        logits = Tensor(raw, dtype="f64", requires_grad=True)
        labels = np.array([0, 2, 1])
        with Tape():
            backward(H.classification_loss(logits, labels))
        shifted = np.exp(raw - raw.max(axis=1, keepdims=True))
        softmax = shifted / shifted.sum(axis=1, keepdims=True)
        expected = (softmax - np.eye(3)[labels]) / 3.0
        np.testing.assert_allclose(logits.grad, expected, atol=1e-10)
        # and against the scalar oracle via finite differences on one logit
        loss0 = scalar_softmax_ce(list(raw[0]), 0)
        assert H.classification_loss(Tensor(raw[:1], dtype="f64"), [0]).item() == pytest.approx(loss0)

    def test_invalid_label_data_error(self):
        with pytest.raises(DataError):
            H.classification_loss(Tensor(np.zeros((1, 3))), [5])


class TestMapHead:
    def test_shape_contract_and_range(self):
        rng = np.random.default_rng(2)
        mh = H.MapHead(rng, dim=16, dtype=np.float64)
        out = mh(Tensor(rng.normal(size=(2, 16, 8, 8))))
        assert out.shape == (2, 128, 128)
        assert (out.numpy() > 0).all() and (out.numpy() < 1).all()

    def test_zero_final_conv_gives_half(self):
        rng = np.random.default_rng(3)
        mh = H.MapHead(rng, dim=8, dtype=np.float64)
        mh.final_w.value.data[:] = 0.0
        mh.final_b.value.data[:] = 0.0
        out = mh(Tensor(rng.normal(size=(1, 8, 4, 4))))
        np.testing.assert_allclose(out.numpy(), 0.5)


class TestZonePartition:
    def test_height_twelve_boundaries(self):
        # lung support rows 0..11 -> upper 0-4, middle 5-7, lower 8-11
        mask = np.zeros((12, 8), dtype=bool)
        mask[:, 0:3] = True
        mask[:, 5:8] = True
        zones = H.zone_partition(mask)
        right = zones[:, 0]
        assert (right[0:5] == 1).all() and (right[5:8] == 2).all() and (right[8:12] == 3).all()
        left = zones[:, 6]
        assert (left[0:5] == 4).all() and (left[5:8] == 5).all() and (left[8:12] == 6).all()

    def test_disjoint_and_cover(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            mask = _random_mask(rng)
            zones = H.zone_partition(mask)
            assert ((zones > 0) == mask).all()  # zones exactly cover the support
            assert (zones[~mask] == 0).all()

    def test_translation_covariance(self):
        mask = _rect_mask()
        zones = H.zone_partition(mask)
        shifted = np.zeros_like(mask)
        shifted[3:, :] = mask[:-3, :]
        zshift = H.zone_partition(shifted)
        np.testing.assert_array_equal(zshift[3:, :], zones[:-3, :])

    def test_single_lung_leaves_other_zones_empty(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[4:12, 1:7] = True  # right lung only
        zones = H.zone_partition(mask)
        assert set(np.unique(zones)) <= {0, 1, 2, 3}

    def test_empty_mask_data_error(self):
        with pytest.raises(DataError):
            H.zone_partition(np.zeros((8, 8), dtype=bool))


class TestRoiPooling:
    def test_all_zero_map(self):
        mask = _rect_mask(16, 16, rows=(2, 14), lungs=((1, 7), (9, 15)))
        zones = H.zone_partition(mask)
        out = H.roi_max_pool(Tensor(np.zeros((16, 16)), dtype="f64"), mask, zones)
        np.testing.assert_array_equal(out.numpy(), np.zeros((3, 2)))
        assert H.global_score(out) == 0.0

    def test_single_hot_pixel_right_upper(self):
        mask = _rect_mask(24, 24, rows=(0, 24), lungs=((0, 11), (13, 24)))
        zones = H.zone_partition(mask)
        sev = np.zeros((24, 24))
        sev[1, 2] = 0.9  # row 1 -> upper band, col 2 -> right lung
        out = H.roi_max_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
        np.testing.assert_allclose(out, [[0.9, 0.0], [0.0, 0.0], [0.0, 0.0]])

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            mask = _random_mask(rng)
            zones = H.zone_partition(mask)
            sev = rng.random((24, 24))
            got_max = H.roi_max_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
            np.testing.assert_array_equal(got_max, brute_zone_pool(sev, mask, zones, "max"))
            got_avg = H.roi_avg_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
            np.testing.assert_allclose(got_avg, brute_zone_pool(sev, mask, zones, "avg"), atol=1e-12)

    def test_mask_exclusion(self):
        rng = np.random.default_rng(6)
        mask = _random_mask(rng)
        zones = H.zone_partition(mask)
        sev = rng.random((24, 24))
        base = H.roi_max_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
        for _ in range(20):
            mutated = sev.copy()
            outside = np.argwhere(~mask)
            r, c = outside[rng.integers(0, len(outside))]
            mutated[r, c] = rng.random() * 10
            np.testing.assert_array_equal(
                H.roi_max_pool(Tensor(mutated, dtype="f64"), mask, zones).numpy(), base
            )

    def test_monotone_under_pointwise_increase(self):
        rng = np.random.default_rng(7)
        mask = _random_mask(rng)
        zones = H.zone_partition(mask)
        sev = rng.random((24, 24))
        base = H.roi_max_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
        bumped = H.roi_max_pool(Tensor(sev + rng.random((24, 24)), dtype="f64"), mask, zones).numpy()
        assert (bumped >= base).all()

    def test_gradient_hits_argmax_pixels_only(self):
        rng = np.random.default_rng(8)
        mask = _random_mask(rng)
        zones = H.zone_partition(mask)
        sev = rng.random((24, 24))
        t = Tensor(sev, dtype="f64", requires_grad=True)
        with Tape():
            out = H.roi_max_pool(t, mask, zones)
            backward(T.reduce_sum(out))
        expected = brute_zone_argmax(sev, mask, zones)
        nonzero = set(map(tuple, np.argwhere(t.grad != 0)))
        assert nonzero == set(expected.values())

    def test_avg_vs_max_single_hot_pixel(self):
        mask = np.zeros((24, 24), dtype=bool)
        mask[2:22, 2:12] = True  # one 10-wide right lung
        zones = H.zone_partition(mask)
        sev = np.zeros((24, 24))
        hot = np.argwhere(zones == 1)[0]
        sev[hot[0], hot[1]] = 1.0
        mx = H.roi_max_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
        av = H.roi_avg_pool(Tensor(sev, dtype="f64"), mask, zones).numpy()
        assert mx[0, 0] == 1.0
        assert av[0, 0] == pytest.approx(1.0 / (zones == 1).sum())

    def test_constant_map_avg(self):
        mask = _rect_mask(24, 24, rows=(2, 22), lungs=((2, 11), (13, 22)))
        zones = H.zone_partition(mask)
        out = H.roi_avg_pool(Tensor(np.full((24, 24), 0.7), dtype="f64"), mask, zones).numpy()
        np.testing.assert_allclose(out, 0.7)

    def test_resolution_mismatch(self):
        mask = _rect_mask(16, 16, rows=(2, 14), lungs=((1, 7), (9, 15)))
        zones = H.zone_partition(mask)
        with pytest.raises(ShapeError):
            H.roi_max_pool(Tensor(np.zeros((8, 8))), mask, zones)


class TestScores:
    def test_global_score_all_ones(self):
        assert H.global_score(np.ones((3, 2))) == 6.0

    def test_binarized_boundary_is_inclusive(self):
        arr = np.full((3, 2), 0.5)
        assert H.global_score(arr) == pytest.approx(3.0)
        assert H.binarized_score(arr) == 6

    def test_mixed(self):
        arr = np.array([[0.9, 0.0], [0.0, 0.0], [0.0, 0.0]])
        assert H.global_score(arr) == pytest.approx(0.9)
        assert H.binarized_score(arr) == 1


class TestSeverityLoss:
    def test_exact_match_zero(self):
        labels = np.array([[1, 0], [0, 1], [0, 0]])
        loss = H.severity_loss(Tensor(labels.astype(np.float64)), labels)
        assert loss.item() == 0.0

    def test_uniform_half_quarter(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        loss = H.severity_loss(Tensor(np.full((3, 2), 0.5), dtype="f64"), labels)
        assert loss.item() == pytest.approx(0.25)

    def test_non_binary_label_rejected(self):
        with pytest.raises(DataError):
            H.severity_loss(Tensor(np.zeros((3, 2))), np.full((3, 2), 0.3))

    def test_gradient_support_is_argmax_only(self):
        rng = np.random.default_rng(9)
        mask = _random_mask(rng)
        zones = H.zone_partition(mask)
        sev = rng.random((24, 24))
        labels = (rng.random((3, 2)) > 0.5).astype(int)
        t = Tensor(sev, dtype="f64", requires_grad=True)
        with Tape():
            arr = H.roi_max_pool(t, mask, zones)
            backward(H.severity_loss(arr, labels))
        expected = set(brute_zone_argmax(sev, mask, zones).values())
        nonzero = set(map(tuple, np.argwhere(t.grad != 0)))
        assert nonzero <= expected  # zero-gradient zones may drop out
        assert len(nonzero) > 0
