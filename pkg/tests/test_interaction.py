import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofmamba.interaction import (Fusion, MutualCrossAttention, SequencePool, attention_weights, fuse, mca,
                                    seq_pool, single_head_attention)
from spoofmamba.numerics import Tensor, no_grad
from spoofmamba.numerics.nn import Linear


def loop_attention(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = np.array([q[i] @ k[j] / np.sqrt(q.shape[1]) for j in range(k.shape[0])])
        w = np.exp(s - s.max())
        w /= w.sum()
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def layer_norm_rows(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


class TestAttention:
    def test_loop_oracle(self, rng):
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        np.testing.assert_allclose(single_head_attention(q, k, v).data, loop_attention(q, k, v), atol=1e-6)

    def test_projected_oracle(self, rng):
        mca_layer = MutualCrossAttention(4, rng).astype(np.float64)
        p = mca_layer.f_from_t
        q, k = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        lin = lambda m, x: x @ m.weight.data.T + m.bias.data
        expect = loop_attention(lin(p.query, q), lin(p.key, k), lin(p.value, k))
        np.testing.assert_allclose(single_head_attention(q, k, k, p).data, expect, atol=1e-6)

    def test_zero_values(self, rng):
        out = single_head_attention(rng.standard_normal((3, 4)), np.zeros((5, 4)), np.zeros((5, 4)))
        assert np.all(out.data == 0.0)

    def test_single_key(self, rng):
        v = rng.standard_normal((1, 4))
        out = single_head_attention(rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), v)
        np.testing.assert_allclose(out.data, np.repeat(v, 3, axis=0))

    def test_empty_keys(self, rng):
        with pytest.raises(ValueError):
            single_head_attention(rng.standard_normal((3, 4)), np.zeros((0, 4)), np.zeros((0, 4)))

    def test_width_mismatch(self, rng):
        with pytest.raises(ValueError):
            attention_weights(Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((2, 5))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**31 - 1), st.floats(0.1, 20))
    def test_rows_sum_to_one(self, lq, lk, seed, scale):
        r = np.random.default_rng(seed)
        w = attention_weights(Tensor(scale * r.standard_normal((lq, 8))), Tensor(scale * r.standard_normal((lk, 8))))
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


class TestMutualCrossAttention:
    @pytest.fixture
    def layer(self, rng):
        return MutualCrossAttention(8, rng).astype(np.float64)

    def test_shapes(self, layer, rng):
        x_f, x_t = Tensor(rng.standard_normal((2, 23, 8))), Tensor(rng.standard_normal((2, 29, 8)))
        a, b = layer(x_f, x_t)
        assert a.shape == (2, 23, 8) and b.shape == (2, 29, 8)

    def test_zero_temporal_branch(self, layer, rng):
        layer.f_from_t.value.bias.data[...] = 0.0
        x_f = rng.standard_normal((5, 8))
        new_f, _ = layer(Tensor(x_f), Tensor(np.zeros((7, 8))))
        np.testing.assert_allclose(new_f.data, layer_norm_rows(x_f), atol=1e-12)

    def test_simultaneous_update(self, layer, rng):
        x_f, x_t = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
        new_f, new_t = layer(Tensor(x_f), Tensor(x_t))
        attn_t = single_head_attention(x_t, x_f, x_f, layer.t_from_f).data
        np.testing.assert_allclose(new_t.data, layer_norm_rows(x_t + attn_t), atol=1e-12)
        attn_f = single_head_attention(x_f, x_t, x_t, layer.f_from_t).data
        np.testing.assert_allclose(new_f.data, layer_norm_rows(x_f + attn_f), atol=1e-12)

    def test_role_swap(self, layer, rng):
        x_f, x_t = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((7, 8)))
        a_f, a_t = layer(x_f, x_t)
        swapped = MutualCrossAttention(8, rng).astype(np.float64)
        swapped.f_from_t.load_state_dict(layer.t_from_f.state_dict())
        swapped.t_from_f.load_state_dict(layer.f_from_t.state_dict())
        swapped.norm_f.load_state_dict(layer.norm_t.state_dict())
        swapped.norm_t.load_state_dict(layer.norm_f.state_dict())
        b_t, b_f = swapped(x_t, x_f)
        np.testing.assert_array_equal(a_f.data, b_f.data)
        np.testing.assert_array_equal(a_t.data, b_t.data)

    def test_literal_form_without_projections(self, rng):
        layer = MutualCrossAttention(8, rng, projections=False).astype(np.float64)
        assert layer.num_parameters() == 32
        x_f, x_t = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
        new_f, _ = layer(Tensor(x_f), Tensor(x_t))
        np.testing.assert_allclose(new_f.data, layer_norm_rows(x_f + loop_attention(x_f, x_t, x_t)), atol=1e-9)

    def test_disabled_is_passthrough(self, rng):
        x_f, x_t = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((7, 8)))
        a, b = mca(None, x_f, x_t)
        assert a is x_f and b is x_t

    def test_empty_branch(self, layer, rng):
        with pytest.raises(ValueError):
            layer(Tensor(np.zeros((0, 8))), Tensor(rng.standard_normal((7, 8))))


class TestSequencePool:
    def test_zero_logits_mean(self, rng):
        x = rng.standard_normal((6, 4))
        np.testing.assert_allclose(seq_pool(x, np.zeros((6, 1))).data, x.mean(axis=0), atol=1e-14)

    def test_single_row(self, rng):
        x = rng.standard_normal((1, 4))
        np.testing.assert_allclose(seq_pool(x, rng.standard_normal((1, 1))).data, x[0])

    def test_saturation(self, rng):
        x = rng.standard_normal((6, 4))
        z = np.zeros((6, 1))
        z[3] = 1e4
        np.testing.assert_allclose(seq_pool(x, z).data, x[3], atol=1e-12)

    def test_module_batched(self, rng):
        pool = SequencePool(4, rng)
        assert pool(Tensor(rng.standard_normal((3, 6, 4)).astype(np.float32))).shape == (3, 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 20), st.integers(0, 2**31 - 1))
    def test_convex_hull(self, L, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((L, 5))
        z = seq_pool(x, 10 * r.standard_normal((L, 1))).data
        assert np.all(z <= x.max(axis=0) + 1e-12)
        assert np.all(z >= x.min(axis=0) - 1e-12)


class TestFuse:
    def make(self, rng, weight):
        proj = Linear(8, 4, rng).astype(np.float64)
        proj.weight.data[...] = weight
        proj.bias.data[...] = 0.0
        return proj

    def test_block_identity(self, rng):
        z_f, z_t = rng.standard_normal(4), rng.standard_normal(4)
        proj = self.make(rng, np.hstack([np.eye(4), np.zeros((4, 4))]))
        np.testing.assert_array_equal(fuse(proj, z_f, z_t).data, z_f)

    def test_half_sum(self, rng):
        z_f, z_t = rng.standard_normal(4), rng.standard_normal(4)
        proj = self.make(rng, 0.5 * np.hstack([np.eye(4), np.eye(4)]))
        np.testing.assert_allclose(fuse(proj, z_f, z_t).data, (z_f + z_t) / 2, atol=1e-15)

    def test_matmul_oracle(self, rng):
        layer = Fusion(4, rng).astype(np.float64)
        z_f, z_t = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        w, b = layer.proj.weight.data, layer.proj.bias.data
        expect = [[sum(w[o, i] * np.concatenate([z_f[n], z_t[n]])[i] for i in range(8)) + b[o]
                   for o in range(4)] for n in range(2)]
        with no_grad():
            np.testing.assert_allclose(layer(Tensor(z_f), Tensor(z_t)).data, expect, atol=1e-12)
