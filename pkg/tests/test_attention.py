import math

import numpy as np
import pytest

from utransformer import tensor as T
from utransformer.attention import (
    MHCA,
    MHSA,
    MultiHeadProjection,
    pool_factor,
    positional_encoding_2d,
    scaled_dot_product_attention,
)
from utransformer.nn import initialize
from utransformer.tensor import ShapeError, Tensor


def randomized(module, seed, scale=1.0):
    module.astype(np.float64)
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.data = rng.normal(scale=scale, size=p.shape)
    return module


class TestPositionalEncoding:
    def test_origin(self):
        pe = positional_encoding_2d(4, 4, 16).data[0, :, 0, 0]
        q = 4
        assert np.all(pe[0:q] == 0) and np.all(pe[2 * q : 3 * q] == 0)
        assert np.all(pe[q : 2 * q] == 1) and np.all(pe[3 * q :] == 1)

    def test_range(self):
        pe = positional_encoding_2d(64, 64, 32).data
        assert pe.min() >= -1 and pe.max() <= 1

    def test_neighbours_differ(self):
        pe = positional_encoding_2d(4, 4, 16).data[0]
        assert np.max(np.abs(pe[:, 0, 0] - pe[:, 1, 0])) > 1e-3

    @pytest.mark.parametrize("c", [4, 16, 128])
    def test_positions_distinct_on_64_grid(self, c):
        pe = positional_encoding_2d(64, 64, c, np.float64).data[0].reshape(c, -1).T
        sq = (pe * pe).sum(1)
        d2 = sq[:, None] + sq[None, :] - 2 * pe @ pe.T
        np.fill_diagonal(d2, np.inf)
        assert d2.min() > 1e-8

    def test_deterministic(self):
        assert np.array_equal(positional_encoding_2d(5, 7, 8).data, positional_encoding_2d(5, 7, 8).data)

    def test_channels_not_divisible(self):
        with pytest.raises(ShapeError):
            positional_encoding_2d(4, 4, 6)


class TestScaledDotProduct:
    def test_single_key(self):
        q = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
        k = Tensor(np.random.default_rng(1).normal(size=(1, 3)))
        v = Tensor(np.array([[2.0, -1.0, 0.5, 4.0]]))
        out, a = scaled_dot_product_attention(q, k, v)
        assert np.array_equal(a.data, np.ones((5, 1)))
        np.testing.assert_allclose(out.data, np.repeat(v.data, 5, axis=0))

    def test_closed_form(self):
        out, a = scaled_dot_product_attention(
            Tensor(np.array([[1.0, 0.0]])), Tensor(np.eye(2)), Tensor(np.eye(2))
        )
        e = math.exp(1 / math.sqrt(2))
        expected = [e / (e + 1), 1 / (e + 1)]
        np.testing.assert_allclose(a.data[0], expected, atol=1e-12)
        np.testing.assert_allclose(a.data[0], [0.6698, 0.3302], atol=1e-4)
        np.testing.assert_allclose(out.data[0], [0.6698, 0.3302], atol=1e-4)

    def test_orthogonal_query_is_uniform(self):
        k = np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0], [0, -1.0, 0]])
        v = np.random.default_rng(2).normal(size=(4, 5))
        out, a = scaled_dot_product_attention(Tensor(np.array([[0, 0, 2.0]])), Tensor(k), Tensor(v))
        np.testing.assert_allclose(a.data, 0.25)
        np.testing.assert_allclose(out.data[0], v.mean(axis=0), atol=1e-12)

    def test_scale_sensitivity(self):
        rng = np.random.default_rng(3)
        q, k, v = rng.normal(size=(6, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 2))
        _, a1 = scaled_dot_product_attention(Tensor(q), Tensor(k), Tensor(v))
        _, a2 = scaled_dot_product_attention(Tensor(2 * q), Tensor(k), Tensor(v))
        assert np.max(np.abs(a1.data - a2.data)) > 1e-4

    def test_dimension_errors(self):
        with pytest.raises(ShapeError):
            scaled_dot_product_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 1))))
        with pytest.raises(ShapeError):
            scaled_dot_product_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 1))))


class TestProjection:
    def test_widths(self):
        p = MultiHeadProjection(16, 4, query_channels=32)
        assert p.w_q.shape == (32, 16) and p.w_k.shape == (16, 16) and p.w_o.shape == (16, 16)
        assert p.d_k == 4

    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            MultiHeadProjection(10, 4)
        with pytest.raises(ValueError):
            MultiHeadProjection(8, 0)


class TestMHSA:
    def test_zero_value_projection_is_identity(self):
        block = randomized(MHSA(8, 1, pe=True), 4)
        block.proj.w_v.data[...] = 0
        x = np.random.default_rng(5).normal(size=(2, 8, 4, 4))
        out, _ = block(Tensor(x))
        assert np.array_equal(out.data, x)

    def test_shape_and_maps(self):
        block = MHSA(16, 4)
        initialize(block, 0)
        x = Tensor(np.random.default_rng(6).normal(size=(1, 16, 8, 8)).astype(np.float32))
        out, maps = block(x)
        assert out.shape == x.shape
        assert len(maps) == 4
        for a in maps:
            assert a.shape == (1, 64, 64)
            np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
            assert a.min() >= 0 and a.max() <= 1

    def test_pe_requires_divisible_channels(self):
        with pytest.raises(ShapeError):
            MHSA(6, 2, pe=True)
        MHSA(6, 2, pe=False)

    def test_full_receptive_field(self):
        block = randomized(MHSA(8, 2), 7, scale=0.5)
        x = Tensor(np.random.default_rng(8).normal(size=(1, 8, 8, 8)), requires_grad=True)
        out, _ = block(x)
        sel = np.zeros(out.shape)
        sel[0, 3, 2, 5] = 1.0
        T.backward(T.tsum(T.mul(out, Tensor(sel))))
        assert np.all(np.abs(x.grad).sum(axis=1)[0] > 0)


class TestMHCA:
    def _inputs(self, n=2, cs=16, cy=32, hs=8, seed=9):
        rng = np.random.default_rng(seed)
        return Tensor(rng.normal(size=(n, cs, hs, hs))), Tensor(rng.normal(size=(n, cy, hs // 2, hs // 2)))

    def test_zero_embedding_gives_half_gate(self):
        block = randomized(MHCA(16, 32, 4), 10)
        block.embed_w.data[...] = 0
        block.embed_b.data[...] = 0
        s, y = self._inputs()
        out, _, z = block(s, y)
        assert np.all(z.data == 0.5)
        y_up = T.upsample_bilinear(y, 8, 8).data
        np.testing.assert_array_equal(out.data, np.concatenate([0.5 * s.data, y_up], axis=1))

    def test_output_channels(self):
        block = randomized(MHCA(16, 32, 4), 11)
        s, y = self._inputs()
        out, maps, z = block(s, y)
        assert out.shape == (2, 48, 8, 8)
        assert z.shape == s.shape
        assert len(maps) == 4

    def test_z_strictly_inside_unit_interval(self):
        # initialized scale; N(0,1) weights saturate the float sigmoid to exactly 0 or 1
        block = MHCA(16, 32, 2).astype(np.float64)
        initialize(block, 12)
        s, y = self._inputs(seed=13)
        _, _, z = block(s, y)
        assert z.data.min() > 0 and z.data.max() < 1

    def test_forced_gates(self):
        block = randomized(MHCA(16, 32, 2), 14)
        s, y = self._inputs(seed=15)
        y_up = T.upsample_bilinear(y, 8, 8).data
        out, _, _ = block(s, y, z_override=Tensor(np.ones(s.shape)))
        assert np.array_equal(out.data, np.concatenate([s.data, y_up], axis=1))
        out, _, _ = block(s, y, z_override=Tensor(np.zeros(s.shape)))
        assert not out.data[:, :16].any()

    def test_pooling_bounds_token_grid(self):
        block = randomized(MHCA(8, 16, 2, pool_cap=4), 16)
        s, y = self._inputs(n=1, cs=8, cy=16, hs=16)
        _, maps, _ = block(s, y)
        assert maps[0].shape == (1, 16, 16)

    def test_errors(self):
        block = MHCA(16, 32, 4)
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 16, 8, 8))), Tensor(np.zeros((1, 32, 8, 8))))
        with pytest.raises(ValueError):
            MHCA(16, 32, 4, pool_cap=0)
        with pytest.raises(ShapeError):
            MHCA(6, 32, 2, pe=True)

    def test_pool_factor(self):
        assert pool_factor(64, 64, 16) == 4
        assert pool_factor(8, 8, 16) == 1
        assert pool_factor(32, 16, 16) == 2
        with pytest.raises(ValueError):
            pool_factor(8, 8, 0)
