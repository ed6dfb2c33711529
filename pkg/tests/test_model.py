import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL, TINY
from dpa import ModelConfig, ModelWeights, build_random, forward
from dpa.model import (
    ConfigError,
    attention_forward,
    glu_forward,
    head_contribution,
    head_outputs,
    neuron_contribution,
    rms_norm,
    rope_rotate,
)
from dpa.zoo import zero_model
from oracles import forward_loop


class TestRMSNorm:
    def test_unit_rms_input(self):
        xt, sigma = rms_norm(np.ones(4), np.ones(4), 0.0)
        np.testing.assert_array_equal(xt, np.ones(4))
        assert sigma == 1.0

    def test_zero_input(self):
        xt, sigma = rms_norm(np.zeros(5), np.arange(5.0), 1e-6)
        np.testing.assert_array_equal(xt, np.zeros(5))
        assert sigma == pytest.approx(1e-3)

    def test_hand_example(self):
        xt, sigma = rms_norm(np.array([3.0, 4.0]), np.ones(2), 0.0)
        assert sigma == pytest.approx(math.sqrt(12.5), rel=1e-15)
        np.testing.assert_allclose(xt, [0.848528137423857, 1.131370849898476], rtol=1e-12)

    def test_no_mean_centering(self):
        # a constant vector keeps its sign and magnitude 1 after normalization
        xt, _ = rms_norm(np.full(3, 7.0), np.ones(3), 0.0)
        np.testing.assert_allclose(xt, np.ones(3))


class TestRope:
    def test_zero_position_is_identity(self, rng):
        v = rng.standard_normal(8)
        np.testing.assert_array_equal(rope_rotate(v, 0), v)

    def test_unit_pair(self):
        np.testing.assert_allclose(rope_rotate(np.array([1.0, 0.0]), 1, 10000.0),
                                   [math.cos(1.0), math.sin(1.0)], atol=1e-15)

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            rope_rotate(np.ones(3), 1)
        with pytest.raises(ConfigError):
            ModelConfig(n_layers=1, n_heads=2, d_model=6, d_ffn=4, vocab_size=5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 500))
    def test_norm_preserved(self, seed, m):
        v = np.random.default_rng(seed).standard_normal(16)
        assert np.linalg.norm(rope_rotate(v, m)) == pytest.approx(np.linalg.norm(v), rel=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 200), st.integers(0, 200))
    def test_relative_offset(self, seed, m, n):
        r = np.random.default_rng(seed)
        q, k = r.standard_normal(16), r.standard_normal(16)
        lhs = rope_rotate(q, m) @ rope_rotate(k, n)
        rhs = q @ rope_rotate(k, n - m)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_inverse(self, rng):
        v = rng.standard_normal((5, 8))
        pos = np.arange(5)
        np.testing.assert_allclose(rope_rotate(rope_rotate(v, pos), pos, inverse=True), v, atol=1e-14)


class TestAttention:
    def test_single_position(self, tiny_weights):
        layer = tiny_weights.layers[0]
        x = np.random.default_rng(0).standard_normal((1, TINY.d_model))
        out = attention_forward(x, layer, TINY)
        dh = TINY.head_dim
        for h in range(TINY.n_heads):
            assert out.alpha[h, 0, 0] == 1.0
            expected = (x[0] @ layer.W_V[:, h * dh:(h + 1) * dh]) @ layer.W_O[h * dh:(h + 1) * dh]
            np.testing.assert_allclose(out.output[h, 0], expected, rtol=1e-13)

    def test_zero_output_projection(self, tiny_weights):
        d = dict(tiny_weights.layers[0].__dict__)
        d["W_O"] = np.zeros_like(d["W_O"])
        layer = type(tiny_weights.layers[0])(**d)
        x = np.random.default_rng(1).standard_normal((4, TINY.d_model))
        assert not np.any(attention_forward(x, layer, TINY).output)

    def test_matches_loop_oracle(self):
        config = ModelConfig(n_layers=1, n_heads=2, d_model=4, d_ffn=3, vocab_size=5)
        w = build_random(config, 9)
        layer = w.layers[0]
        x = np.random.default_rng(2).standard_normal((3, 4))
        out = attention_forward(x, layer, config)
        dh = config.head_dim
        for h in range(2):
            for i in range(3):
                q = [sum(x[i, r] * layer.W_Q[r, h * dh + c] for r in range(4)) for c in range(dh)]
                q = [q[0] * math.cos(i) - q[1] * math.sin(i), q[0] * math.sin(i) + q[1] * math.cos(i)]
                scores = []
                for j in range(i + 1):
                    k = [sum(x[j, r] * layer.W_K[r, h * dh + c] for r in range(4)) for c in range(dh)]
                    k = [k[0] * math.cos(j) - k[1] * math.sin(j), k[0] * math.sin(j) + k[1] * math.cos(j)]
                    scores.append((q[0] * k[0] + q[1] * k[1]) / math.sqrt(dh))
                z = sum(math.exp(s) for s in scores)
                y = [0.0] * 4
                for j in range(i + 1):
                    a = math.exp(scores[j]) / z
                    assert out.alpha[h, i, j] == pytest.approx(a, rel=1e-12)
                    v = [sum(x[j, r] * layer.W_V[r, h * dh + c] for r in range(4)) for c in range(dh)]
                    for c in range(4):
                        y[c] += a * sum(v[m] * layer.W_O[h * dh + m, c] for m in range(dh))
                np.testing.assert_allclose(out.output[h, i], y, rtol=1e-12, atol=1e-14)


class TestGLU:
    def test_saturated_gate_disables(self, small_weights):
        layer = small_weights.layers[0]
        x = np.abs(np.random.default_rng(3).standard_normal((4, SMALL.d_model)))
        d = dict(layer.__dict__)
        d["W_G"] = -np.ones_like(layer.W_G) * 40.0 / x.sum(axis=1).min()
        saturated = type(layer)(**d)
        out = glu_forward(x, saturated)
        assert out.pre.max() <= -40.0
        assert np.abs(out.output).max() < 1e-12

    def test_zero_input(self, small_weights):
        out = glu_forward(np.zeros((3, SMALL.d_model)), small_weights.layers[0])
        np.testing.assert_array_equal(out.output, 0.0)

    def test_sum_of_neurons(self, small_weights):
        layer = small_weights.layers[1]
        x = np.random.default_rng(4).standard_normal((5, SMALL.d_model))
        out = glu_forward(x, layer)
        total = sum(np.outer(out.gate[:, n] * out.up[:, n], layer.W_D[n]) for n in range(SMALL.d_ffn))
        np.testing.assert_allclose(out.output, total, rtol=1e-12, atol=1e-12)


class TestForward:
    def test_matches_loop_oracle(self):
        for seed in range(3):
            w = build_random(TINY, seed)
            tokens = [int(t) for t in np.random.default_rng(seed).integers(0, TINY.vocab_size, 5)]
            out = forward(tokens, w)
            logits, resid = forward_loop(tokens, w)
            np.testing.assert_allclose(out.logits, logits, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(out.cache.resid, resid, rtol=1e-12, atol=1e-12)

    def test_errors(self, tiny_weights):
        with pytest.raises(ValueError):
            forward([], tiny_weights)
        with pytest.raises(ValueError):
            forward([0, TINY.vocab_size], tiny_weights)
        with pytest.raises(ValueError):
            forward([-1], tiny_weights)
        with pytest.raises(ValueError):
            forward([0] * (TINY.max_seq_len + 1), tiny_weights)

    def test_modules_writing_nothing(self, small_weights):
        layers = []
        for layer in small_weights.layers:
            d = dict(layer.__dict__)
            d["W_O"] = np.zeros_like(layer.W_O)
            d["W_D"] = np.zeros_like(layer.W_D)
            layers.append(d)
        w = ModelWeights.build(SMALL, small_weights.embedding, layers, small_weights.final_norm,
                               small_weights.unembedding)
        tokens = [1, 5, 2, 9]
        out = forward(tokens, w)
        xf, _ = rms_norm(w.embedding[tokens], w.final_norm, SMALL.norm_eps)
        np.testing.assert_allclose(out.logits, xf @ w.unembedding, rtol=1e-13)

    def test_prefix_invariance(self, small_weights):
        tokens = [3, 7, 1, 0, 22, 5, 9]
        full = forward(tokens, small_weights).logits
        for n in range(1, len(tokens)):
            np.testing.assert_allclose(forward(tokens[:n], small_weights).logits, full[:n], rtol=1e-12, atol=1e-13)

    def test_cache_invariants(self, small_weights):
        cache = forward([4, 2, 8, 8, 1, 0], small_weights).cache
        np.testing.assert_allclose(cache.alpha.sum(axis=-1), 1.0, atol=1e-9)
        T = cache.seq_len
        assert not np.any(cache.alpha[..., np.triu_indices(T, k=1)[0], np.triu_indices(T, k=1)[1]])
        np.testing.assert_allclose(cache.means, cache.alpha @ cache.values, atol=1e-9)

    def test_nonfinite_weights_rejected(self, tiny_weights):
        emb = tiny_weights.embedding.copy()
        emb[0, 0] = np.nan
        with pytest.raises(ConfigError):
            ModelWeights.build(TINY, emb, tiny_weights.layers, tiny_weights.final_norm, tiny_weights.unembedding)

    def test_shape_mismatch_rejected(self, tiny_weights):
        with pytest.raises(ConfigError):
            ModelWeights.build(TINY, tiny_weights.embedding[:-1], tiny_weights.layers,
                               tiny_weights.final_norm, tiny_weights.unembedding)

    def test_weights_read_only(self, tiny_weights):
        with pytest.raises(ValueError):
            tiny_weights.embedding[0, 0] = 1.0


class TestDecomposition:
    def test_heads_sum_to_attention(self, small_weights):
        cache = forward([1, 2, 3, 4, 5], small_weights).cache
        for l in range(SMALL.n_layers):
            total = sum(head_contribution(cache, l, h) for h in range(SMALL.n_heads))
            np.testing.assert_allclose(total, cache.resid_mid[l] - cache.resid[l], rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(head_outputs(cache, l).sum(axis=0), total, rtol=1e-12, atol=1e-13)

    def test_neurons_sum_to_glu(self, small_weights):
        cache = forward([1, 2, 3, 4, 5], small_weights).cache
        for l in range(SMALL.n_layers):
            total = sum(neuron_contribution(cache, l, n) for n in range(SMALL.d_ffn))
            np.testing.assert_allclose(total, cache.resid[l + 1] - cache.resid_mid[l], rtol=1e-10, atol=1e-12)

    def test_residual_additivity(self, small_weights):
        cache = forward([6, 0, 6, 2], small_weights).cache
        total = cache.resid[0].copy()
        for l in range(SMALL.n_layers):
            total += sum(head_contribution(cache, l, h) for h in range(SMALL.n_heads))
            total += sum(neuron_contribution(cache, l, n) for n in range(SMALL.d_ffn))
        np.testing.assert_allclose(total, cache.resid[-1], rtol=1e-9, atol=1e-10)

    def test_index_errors(self, small_weights):
        cache = forward([1, 2], small_weights).cache
        with pytest.raises(IndexError):
            head_contribution(cache, SMALL.n_layers, 0)
        with pytest.raises(IndexError):
            head_contribution(cache, 0, SMALL.n_heads)
        with pytest.raises(IndexError):
            neuron_contribution(cache, 0, SMALL.d_ffn)


def test_degenerate_zero_layer_model():
    config = ModelConfig(n_layers=0, n_heads=2, d_model=8, d_ffn=4, vocab_size=6)
    w = zero_model(config, 1)
    out = forward([1, 2, 3], w)
    xf, _ = rms_norm(w.embedding[[1, 2, 3]], w.final_norm, config.norm_eps)
    np.testing.assert_allclose(out.logits, xf @ w.unembedding)
