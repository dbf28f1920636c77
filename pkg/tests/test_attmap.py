import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spoofmamba.attmap import AttentionMap2D, attention_logits, attention_weights, branch_split
from spoofmamba.numerics import Tensor

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def loop_logits(layer, x):
    """Position-wise 1x1 convolutions written out per pixel."""
    w1 = layer.conv1.weight.data[:, :, 0, 0]
    b1 = layer.conv1.bias.data
    w2 = layer.conv2.weight.data[0, :, 0, 0]
    b2 = layer.conv2.bias.data[0]
    B, C, F, T = x.shape
    out = np.empty((B, F, T))
    for b in range(B):
        for f in range(F):
            for t in range(T):
                h = w1 @ x[b, :, f, t] + b1
                h = SELU_SCALE * np.where(h > 0, h, SELU_ALPHA * (np.exp(np.minimum(h, 0)) - 1))
                out[b, f, t] = w2 @ h + b2
    return out


@pytest.fixture
def layer(rng):
    return AttentionMap2D(64, rng).astype(np.float64)


class TestLogits:
    def test_shape(self, layer, rng):
        x = Tensor(rng.standard_normal((2, 64, 23, 29)))
        assert attention_logits(layer, x).shape == (2, 23, 29)

    def test_zero_input_gives_constant_logits(self, layer):
        z = layer.logits(Tensor(np.zeros((1, 64, 4, 5)))).data
        assert np.all(z == z[0, 0, 0])
        att = attention_weights(Tensor(z))
        np.testing.assert_allclose(att.m_spec.data, 1 / 5)
        np.testing.assert_allclose(att.m_temp.data, 1 / 4)

    def test_loop_oracle(self, layer, rng):
        x = rng.standard_normal((2, 64, 3, 4))
        np.testing.assert_allclose(layer.logits(Tensor(x)).data, loop_logits(layer, x), rtol=1e-10, atol=1e-12)


class TestWeights:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.1, 30))
    def test_rows_and_columns_normalised(self, F, T, seed, scale):
        z = scale * np.random.default_rng(seed).standard_normal((2, F, T))
        att = attention_weights(Tensor(z))
        np.testing.assert_allclose(att.m_spec.data.sum(axis=2), 1.0, atol=1e-6)
        np.testing.assert_allclose(att.m_temp.data.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(att.m_spec.data >= 0) and np.all(att.m_spec.data <= 1)

    def test_weights_strictly_inside_unit_interval(self, rng):
        att = attention_weights(Tensor(rng.standard_normal((1, 23, 29))))
        for m in (att.m_spec.data, att.m_temp.data):
            assert np.all((m > 0) & (m < 1))

    def test_joint_softmax_sums_over_plane(self, rng):
        att = attention_weights(Tensor(rng.standard_normal((2, 3, 4))), joint_softmax=True)
        np.testing.assert_allclose(att.m_spec.data.sum(axis=(1, 2)), 1.0, atol=1e-12)


class TestBranchSplit:
    def test_constant_logits_give_means(self, rng):
        x = rng.standard_normal((2, 5, 3, 4))
        x_f, x_t = branch_split(Tensor(x), Tensor(np.full((2, 3, 4), 0.7)))
        np.testing.assert_allclose(x_f.data, x.mean(axis=3).transpose(0, 2, 1), atol=1e-14)
        np.testing.assert_allclose(x_t.data, x.mean(axis=2).transpose(0, 2, 1), atol=1e-14)

    def test_disabled_path_matches_constant_logits(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 3, 4)))
        for a, b in zip(branch_split(x, None), branch_split(x, Tensor(np.zeros((2, 3, 4))))):
            np.testing.assert_allclose(a.data, b.data, atol=1e-14)

    def test_saturated_logit_selects_pixel(self, rng):
        x = rng.standard_normal((5, 3, 4))
        z = np.zeros((3, 4))
        z[1, 2] = 1e4
        x_f, x_t = branch_split(Tensor(x), Tensor(z))
        np.testing.assert_allclose(x_f.data[1], x[:, 1, 2], atol=1e-12)
        np.testing.assert_allclose(x_t.data[2], x[:, 1, 2], atol=1e-12)

    def test_encoder_sized_shapes(self, layer, rng):
        x_f, x_t = layer(Tensor(rng.standard_normal((1, 64, 23, 29))))
        assert x_f.shape == (1, 23, 64)
        assert x_t.shape == (1, 29, 64)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            branch_split(Tensor(rng.standard_normal((1, 2, 3, 4))), Tensor(np.zeros((1, 4, 3))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_convex_hull(self, F, T, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, 3, F, T))
        x_f, x_t = branch_split(Tensor(x), Tensor(5 * r.standard_normal((1, F, T))))
        tol = 1e-12
        assert np.all(x_f.data[0] <= x.max(axis=3)[0].T + tol)
        assert np.all(x_f.data[0] >= x.min(axis=3)[0].T - tol)
        assert np.all(x_t.data[0] <= x.max(axis=2)[0].T + tol)
        assert np.all(x_t.data[0] >= x.min(axis=2)[0].T - tol)
