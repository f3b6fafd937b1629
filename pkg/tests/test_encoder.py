"""Encoder: projection, token assembly, attention invariants, equivariance, gradients."""

import numpy as np
import pytest

from cvit import encoder as E
from cvit import tensor as T
from cvit.errors import ConfigError, ShapeError
from cvit.tensor import Tensor, grad_check

RNG = lambda s: np.random.default_rng(s)


def _encoder(seed=0, layers=2, heads=2, dim=8, dtype=np.float64, dropout=0.0):
    return E.Encoder(RNG(seed), E.EncoderConfig(layers, heads, dim, 2.0, dropout), dtype)


class TestProjection:
    def test_identity_projection(self):
        proj = E.TokenProjector(RNG(1), 6, 6, dtype=np.float64)
        proj.w.value.data[:] = np.eye(6)
        proj.b.value.data[:] = 0.0
        tokens = RNG(2).normal(size=(2, 5, 6))
        np.testing.assert_allclose(proj(Tensor(tokens)).numpy(), tokens)

    def test_zero_weights_give_bias(self):
        proj = E.TokenProjector(RNG(3), 6, 4, dtype=np.float64)
        proj.w.value.data[:] = 0.0
        proj.b.value.data[:] = [1.0, 2.0, 3.0, 4.0]
        out = proj(Tensor(np.ones((1, 7, 6)))).numpy()
        np.testing.assert_allclose(out, np.tile([1.0, 2.0, 3.0, 4.0], (1, 7, 1)))

    def test_equals_flat_matmul_oracle(self):
        proj = E.TokenProjector(RNG(4), 6, 4, dtype=np.float64)
        tokens = RNG(5).normal(size=(2, 5, 6))
        got = proj(Tensor(tokens)).numpy()
        want = np.einsum("bnc,cd->bnd", tokens, proj.w.value.numpy()) + proj.b.value.numpy()
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_channel_mismatch(self):
        proj = E.TokenProjector(RNG(6), 6, 4)
        with pytest.raises(ShapeError):
            proj(Tensor(np.zeros((1, 5, 7), dtype=np.float32)))


class TestAssembly:
    def test_zero_positional_embedding(self):
        tokens = RNG(7).normal(size=(2, 4, 3))
        cls = RNG(8).normal(size=(1, 1, 3))
        pos = np.zeros((1, 5, 3))
        out = E.assemble_input(Tensor(tokens), Tensor(cls), Tensor(pos)).numpy()
        np.testing.assert_allclose(out[:, 0], np.tile(cls[0], (2, 1)))
        np.testing.assert_allclose(out[:, 1:], tokens)

    def test_zero_tokens_give_pos_plus_cls(self):
        pos = RNG(9).normal(size=(1, 5, 3))
        cls = RNG(10).normal(size=(1, 1, 3))
        out = E.assemble_input(Tensor(np.zeros((1, 4, 3))), Tensor(cls), Tensor(pos)).numpy()
        np.testing.assert_allclose(out[0, 0], pos[0, 0] + cls[0, 0])
        np.testing.assert_allclose(out[0, 1:], pos[0, 1:])

    def test_shape_contract(self):
        out = E.assemble_input(
            Tensor(np.zeros((1, 64, 64))), Tensor(np.zeros((1, 1, 64))), Tensor(np.zeros((1, 65, 64)))
        )
        assert out.shape == (1, 65, 64)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            E.assemble_input(
                Tensor(np.zeros((1, 4, 3))), Tensor(np.zeros((1, 1, 3))), Tensor(np.zeros((1, 4, 3)))
            )


class TestEncoder:
    def test_output_shape_preserved(self):
        enc = _encoder(11, layers=3, heads=4, dim=16)
        z0 = Tensor(RNG(12).normal(size=(2, 10, 16)))
        state = enc(z0)
        assert state.final.shape == (2, 10, 16)
        assert len(state.attention) == 3

    def test_attention_rows_sum_to_one(self):
        enc = _encoder(13, layers=2, heads=2, dim=8)
        state = enc(Tensor(RNG(14).normal(size=(3, 7, 8))))
        for attn in state.attention:
            np.testing.assert_allclose(attn.numpy().sum(axis=-1), 1.0, atol=1e-6)

    def test_token_permutation_equivariance_zero_pos(self):
        # permuting non-class tokens permutes outputs identically and leaves
        # the class token's state unchanged (no positional signal present)
        enc = E.Encoder(RNG(15), E.EncoderConfig(2, 2, 8, 2.0, 0.0), np.float32)
        tokens = RNG(16).normal(size=(1, 6, 8)).astype(np.float32)
        perm = RNG(17).permutation(5)
        base = enc(Tensor(tokens)).final.numpy()
        shuffled = tokens.copy()
        shuffled[:, 1:] = tokens[:, 1:][:, perm]
        out = enc(Tensor(shuffled)).final.numpy()
        np.testing.assert_allclose(out[:, 0], base[:, 0], atol=1e-5)
        np.testing.assert_allclose(out[:, 1:], base[:, 1:][:, perm], atol=1e-5)

    def test_class_feature_and_residual_reconstruct(self):
        enc = _encoder(18)
        state = enc(Tensor(RNG(19).normal(size=(2, 5, 8))))
        cls = state.class_feature().numpy()
        res = state.residual_tokens().numpy()
        np.testing.assert_array_equal(cls, state.final.numpy()[:, 0])
        np.testing.assert_array_equal(res, state.final.numpy()[:, 1:])
        rebuilt = np.concatenate([cls[:, None], res], axis=1)
        np.testing.assert_array_equal(rebuilt, state.final.numpy())

    def test_residual_grid_round_trip(self):
        enc = _encoder(20)
        state = enc(Tensor(RNG(21).normal(size=(1, 5, 8))))
        res = state.residual_tokens()
        grid = T.reshape(res, (1, 2, 2, 8))
        back = T.reshape(grid, (1, 4, 8))
        np.testing.assert_array_equal(back.numpy(), res.numpy())

    def test_deterministic_eval_forward(self):
        enc = _encoder(22)
        z = Tensor(RNG(23).normal(size=(1, 5, 8)))
        np.testing.assert_array_equal(enc(z).final.numpy(), enc(z).final.numpy())

    def test_class_feature_depends_on_every_token(self):
        # perturbations must carry non-constant structure: a constant shift of
        # one token row sits in the layer norms' null space by design
        enc = _encoder(24)
        tokens = RNG(25).normal(size=(1, 5, 8))
        base = enc(Tensor(tokens)).class_feature().numpy()
        noise = RNG(26).normal(size=8)
        for n in range(1, 5):
            bumped = tokens.copy()
            bumped[0, n] += noise
            out = enc(Tensor(bumped)).class_feature().numpy()
            assert np.abs(out - base).max() > 1e-9

    def test_dropout_needs_rng_and_perturbs(self):
        enc = _encoder(26, dropout=0.3)
        z = Tensor(RNG(27).normal(size=(1, 5, 8)))
        with pytest.raises(ConfigError):
            enc(z, train=True)
        a = enc(z, train=True, rng=RNG(1)).final.numpy()
        b = enc(z, train=True, rng=RNG(1)).final.numpy()
        c = enc(z, train=True, rng=RNG(2)).final.numpy()
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 0

    def test_degenerate_layer_count_rejected(self):
        with pytest.raises(ConfigError):
            E.EncoderConfig(0, 2, 8)
        with pytest.raises(ConfigError):
            E.EncoderConfig(2, 3, 8)

    def test_full_gradient_tiny_config(self):
        # loss -> encoder input on an L=1, 2-head, D=8, 2x2-grid setup
        enc = _encoder(28, layers=1, heads=2, dim=8)
        proj = E.TokenProjector(RNG(29), 3, 8, dtype=np.float64)
        cls = Tensor(RNG(30).normal(size=(1, 1, 8)))
        pos = Tensor(RNG(31).normal(size=(1, 5, 8)))
        readout = Tensor(RNG(32).normal(size=(8, 1)))

        def f(tokens):
            z0 = E.assemble_input(proj(tokens), cls, pos)
            state = enc(z0)
            return T.reduce_sum(T.matmul(state.class_feature(), readout))

        err = grad_check(f, Tensor(RNG(33).normal(size=(1, 4, 3))), eps=1e-5)
        assert err <= 1e-4
