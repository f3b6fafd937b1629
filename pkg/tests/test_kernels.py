"""Backend equivalence: compiled and pure conv kernels against each other and the loop oracle."""

import numpy as np
import pytest

from cvit import kernels
from oracles import naive_conv2d

CASES = [(1, 0, 1, 4, 8), (1, 1, 3, 2, 7), (2, 1, 4, 4, 8), (2, 0, 2, 3, 9), (1, 2, 2, 2, 6)]


def _rand(shape, dtype, seed):
    return np.ascontiguousarray(np.random.default_rng(seed).normal(size=shape).astype(dtype))


@pytest.mark.parametrize("name,mod", sorted(kernels.backends().items()))
class TestEachBackend:
    def test_forward_matches_loop_oracle(self, name, mod):
        for stride, pad, ci, co, h in CASES:
            x = _rand((2, ci, h, h), np.float64, h)
            w = _rand((co, ci, 3, 3), np.float64, h + 1)
            got = mod.conv2d_forward(x, w, stride, pad)
            for b in range(2):
                np.testing.assert_allclose(got[b], naive_conv2d(x[b], w, stride, pad), atol=1e-6)

    def test_grad_input_matches_transpose_oracle(self, name, mod):
        # <dy, conv(x)> == <grad_input(dy), x> for every (dy, x) pair
        rng = np.random.default_rng(21)
        for stride, pad, ci, co, h in CASES:
            x = np.ascontiguousarray(rng.normal(size=(2, ci, h, h)))
            w = np.ascontiguousarray(rng.normal(size=(co, ci, 3, 3)))
            y = mod.conv2d_forward(x, w, stride, pad)
            dy = np.ascontiguousarray(rng.normal(size=y.shape))
            dx = mod.conv2d_grad_input(dy, w, stride, pad, h, h)
            assert float((dy * y).sum()) == pytest.approx(float((dx * x).sum()), rel=1e-10)

    def test_grad_weight_matches_transpose_oracle(self, name, mod):
        rng = np.random.default_rng(22)
        for stride, pad, ci, co, h in CASES:
            x = np.ascontiguousarray(rng.normal(size=(2, ci, h, h)))
            w = np.ascontiguousarray(rng.normal(size=(co, ci, 3, 3)))
            y = mod.conv2d_forward(x, w, stride, pad)
            dy = np.ascontiguousarray(rng.normal(size=y.shape))
            dw = mod.conv2d_grad_weight(x, dy, 3, stride, pad)
            assert float((dy * y).sum()) == pytest.approx(float((dw * w).sum()), rel=1e-10)


@pytest.mark.skipif(not kernels.compiled_available(), reason="compiled extension not built")
class TestBackendAgreement:
    def test_all_entry_points_agree(self):
        mods = kernels.backends()
        rng = np.random.default_rng(23)
        for stride, pad, ci, co, h in CASES:
            x = np.ascontiguousarray(rng.normal(size=(3, ci, h, h)))
            w = np.ascontiguousarray(rng.normal(size=(co, ci, 3, 3)))
            y = {n: m.conv2d_forward(x, w, stride, pad) for n, m in mods.items()}
            np.testing.assert_allclose(y["compiled"], y["pure"], atol=1e-12)
            dy = np.ascontiguousarray(rng.normal(size=y["pure"].shape))
            dx = {n: m.conv2d_grad_input(dy, w, stride, pad, h, h) for n, m in mods.items()}
            np.testing.assert_allclose(dx["compiled"], dx["pure"], atol=1e-12)
            dw = {n: m.conv2d_grad_weight(x, dy, 3, stride, pad) for n, m in mods.items()}
            np.testing.assert_allclose(dw["compiled"], dw["pure"], atol=1e-12)

    def test_float32_supported(self):
        mods = kernels.backends()
        x = _rand((2, 3, 8, 8), np.float32, 1)
        w = _rand((4, 3, 3, 3), np.float32, 2)
        y = {n: m.conv2d_forward(x, w, 2, 1) for n, m in mods.items()}
        assert y["compiled"].dtype == np.float32
        np.testing.assert_allclose(y["compiled"], y["pure"], atol=1e-5)

    def test_repeat_runs_bit_identical(self):
        # fixed inner summation order per output element, any thread count
        mod = kernels.backends()["compiled"]
        x = _rand((4, 8, 16, 16), np.float32, 3)
        w = _rand((8, 8, 3, 3), np.float32, 4)
        first = mod.conv2d_forward(x, w, 1, 1)
        for _ in range(3):
            np.testing.assert_array_equal(mod.conv2d_forward(x, w, 1, 1), first)
