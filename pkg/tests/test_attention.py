import math

import numpy as np
import pytest

from babn import tensor as T
from babn.attention import (AttentionConfig, AttentionModel, LAYER_FIELDS, LayerParams, PHI_CLAMP, f_dot,
                            f_norm, init_base_params, self_attention, transformer_block)
from babn.randvar import RngStream
from babn.tensor import Tensor


def make_layer(d, ffn, rng, **overrides):
    vals = {
        "wq": rng.normal(size=(d, d)) / math.sqrt(d), "bq": np.zeros(d),
        "wk": rng.normal(size=(d, d)) / math.sqrt(d), "bk": np.zeros(d),
        "wv": rng.normal(size=(d, d)) / math.sqrt(d), "bv": np.zeros(d),
        "wo": rng.normal(size=(d, d)) / math.sqrt(d), "bo": np.zeros(d),
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "w1": rng.normal(size=(d, ffn)) / math.sqrt(d), "b1": np.zeros(ffn),
        "w2": rng.normal(size=(ffn, d)) / math.sqrt(ffn), "b2": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
    }
    vals.update(overrides)
    return LayerParams(**{f: Tensor(vals[f], requires_grad=True) for f in LAYER_FIELDS})


class TestFDot:
    def test_scaling(self):
        out = f_dot(Tensor([[1.0, 0, 0, 0]]), Tensor([[2.0, 0, 0, 0], [0, 2.0, 0, 0]]))
        np.testing.assert_allclose(out.data, [[1.0, 0.0]])

    def test_gram_matrix(self, np_rng):
        x = np_rng.normal(size=(3, 1))
        np.testing.assert_allclose(f_dot(Tensor(x), Tensor(x)).data, x @ x.T)

    def test_transpose_identity(self, np_rng):
        q, k = Tensor(np_rng.normal(size=(3, 4))), Tensor(np_rng.normal(size=(5, 4)))
        np.testing.assert_allclose(f_dot(q, k).data, f_dot(k, q).data.T)

    def test_clamped(self):
        out = f_dot(Tensor([[100.0]]), Tensor([[100.0]]))
        assert out.item() == PHI_CLAMP

    def test_shape_error(self):
        with pytest.raises(T.ShapeError):
            f_dot(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


class TestFNorm:
    def test_ratio(self):
        np.testing.assert_allclose(f_norm(Tensor([[1.0, 3.0]])).data, [[0.25, 0.75]])

    @pytest.mark.parametrize("c", [1e-200, 0.3, 7.0, 1e200])
    def test_constant_rows(self, c):
        np.testing.assert_allclose(f_norm(Tensor([[c, c, c]])).data, [[1 / 3] * 3])

    def test_exp_matches_softmax(self, np_rng):
        phi = np_rng.normal(size=(4, 6)) * 3
        np.testing.assert_allclose(f_norm(T.exp(Tensor(phi))).data, T.softmax(Tensor(phi)).data, atol=1e-12)

    def test_degenerate_row(self):
        with pytest.raises(FloatingPointError):
            f_norm(Tensor([[0.0, 0.0]]))


class TestSelfAttention:
    def test_uniform_weights_average_values(self, np_rng):
        d = 4
        layer = make_layer(d, 4, np_rng, wq=np.zeros((d, d)), wk=np.zeros((d, d)), wv=np.eye(d), wo=np.eye(d))
        x = np.eye(d)
        out, w = self_attention(Tensor(x), layer, n_heads=2)
        np.testing.assert_allclose(w.data, np.full((1, 2, d, d), 1 / d))
        np.testing.assert_allclose(out.data, np.tile(x.mean(axis=0), (d, 1)), atol=1e-15)

    def test_single_key(self, np_rng):
        d = 4
        layer = make_layer(d, 4, np_rng, wv=np.eye(d), wo=np.eye(d))
        x = np_rng.normal(size=(1, d))
        out, w = self_attention(Tensor(x), layer, n_heads=2)
        np.testing.assert_array_equal(w.data, np.ones((1, 2, 1, 1)))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_block_gradcheck(self, np_rng):
        layer = make_layer(4, 6, np_rng)
        x = Tensor(np_rng.normal(size=(2, 4)), requires_grad=True)
        target = np_rng.normal(size=(2, 4))
        params = [x] + [getattr(layer, f) for f in LAYER_FIELDS]
        f = lambda: (transformer_block(x, layer, 2) * target).sum()
        assert T.gradcheck(f, params) < 1e-4


class TestModel:
    def test_embedding_row(self):
        cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, vocab_size=5, max_seq_len=3)
        m = AttentionModel(cfg, rng=RngStream(0))
        x = m.embed(np.array([[0]]))
        np.testing.assert_allclose(x.data[0, 0], m.params["embed.tok"].data[0] + m.params["embed.pos"].data[0])

    @pytest.mark.parametrize("pooling, shape", [("tokens", (3, 4, 5)), ("mean", (3, 5)), ("last", (3, 5))])
    def test_logit_shapes(self, pooling, shape):
        cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, vocab_size=7, max_seq_len=4,
                              n_classes=5, pooling=pooling)
        assert AttentionModel(cfg, rng=RngStream(0)).forward(np.zeros((3, 4), int)).shape == shape

    def test_untrained_is_chance_on_balanced_data(self):
        cfg = AttentionConfig(d_model=16, n_heads=2, n_layers=2, ffn_hidden=16, vocab_size=8, max_seq_len=6,
                              n_classes=2, pooling="mean")
        m = AttentionModel(cfg, rng=RngStream(3))
        r = RngStream(4)
        x = r.integers(0, 8, (10_000, 6))
        y = r.integers(0, 2, 10_000)
        acc = (m.predict_proba(x).argmax(-1) == y).mean()
        assert abs(acc - 0.5) < 0.05

    def test_init_is_deterministic(self):
        cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8)
        a, b = init_base_params(cfg, RngStream(1)), init_base_params(cfg, RngStream(1))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_rejects_long_sequences(self):
        cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8, max_seq_len=3)
        with pytest.raises(ValueError):
            AttentionModel(cfg, rng=RngStream(0)).forward(np.zeros((1, 4), int))

    def test_shape_validation(self):
        cfg = AttentionConfig(d_model=8, n_heads=2, n_layers=1, ffn_hidden=8)
        params = init_base_params(cfg, RngStream(0))
        params["head.w"] = np.zeros((3, 3))
        with pytest.raises(T.ShapeError):
            AttentionModel(cfg, params=params)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttentionConfig(d_model=6, n_heads=4)
        with pytest.raises(ValueError):
            AttentionConfig(pooling="max")
