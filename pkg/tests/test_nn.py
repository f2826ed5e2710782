import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdet.errors import ConfigError
from spdet.gradcheck import finite_difference_check
from spdet.nn import (
    AttentionWeights,
    feed_forward,
    FeedForwardWeights,
    gather_rows,
    init_attention,
    init_feed_forward,
    init_layer_norm,
    l2_normalize_rows,
    layer_norm,
    multi_head_attention,
    named_parameters,
)
from spdet.tensor import Tensor

from oracles import attention_oracle, attn_lists


def identity_attention(dim, value_dim=None):
    dv = dim if value_dim is None else value_dim
    eye = lambda d: Tensor(np.eye(d), requires_grad=True)
    zero = lambda d: Tensor(np.zeros(d), requires_grad=True)
    return AttentionWeights(
        wq=eye(dim), bq=zero(dim), wk=eye(dim), bk=zero(dim),
        wv=eye(dv), bv=zero(dv), wo=eye(dv), bo=zero(dv),
    )


class TestMultiHeadAttention:
    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.normal(size=(3, 4)))
        k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        v = Tensor(rng.normal(size=(5, 4)))
        out = multi_head_attention(q, k, v, 1, identity_attention(4))
        assert np.allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)

    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(1)
        q = Tensor(rng.normal(size=(4, 4)))
        k = Tensor(rng.normal(size=(1, 4)))
        v = Tensor(rng.normal(size=(1, 4)))
        out = multi_head_attention(q, k, v, 1, identity_attention(4))
        assert np.allclose(out.data, np.tile(v.data, (4, 1)), atol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(2, 4))
        k = rng.normal(size=(3, 4))
        v = rng.normal(size=(3, 4))
        w = init_attention(np.random.default_rng(5), 4)
        for heads in (1, 2):
            out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads, w)
            ref = attention_oracle(q.tolist(), k.tolist(), v.tolist(), *attn_lists(w), heads)
            assert np.max(np.abs(out.data - np.array(ref))) < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_multi_head_equals_closed_form_when_one_head(self, seed):
        rng = np.random.default_rng(seed)
        q = Tensor(rng.normal(size=(3, 4)))
        kv = Tensor(rng.normal(size=(2, 4)))
        w = init_attention(np.random.default_rng(seed + 1), 4)
        out = multi_head_attention(q, kv, kv, 1, w).data
        qp = q.data @ w.wq.data + w.bq.data
        kp = kv.data @ w.wk.data + w.bk.data
        vp = kv.data @ w.wv.data + w.bv.data
        scores = qp @ kp.T / math.sqrt(4)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        closed = (e / e.sum(axis=1, keepdims=True)) @ vp @ w.wo.data + w.bo.data
        assert np.max(np.abs(out - closed)) < 1e-12

    def test_indivisible_heads_rejected(self):
        x = Tensor(np.zeros((2, 6)))
        with pytest.raises(ConfigError):
            multi_head_attention(x, x, x, 4, identity_attention(6))

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        q = Tensor(rng.uniform(-1, 1, (2, 4)), requires_grad=True)
        v = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        w = init_attention(np.random.default_rng(4), 4)
        params = {"q": q, "v": v}
        params.update(dict(named_parameters(w, "attn")))
        report = finite_difference_check(
            params, lambda: multi_head_attention(q, v, v, 2, w).power(2.0).sum()
        )
        assert report.passed, report.summary_lines()


class TestLayerNorm:
    def test_constant_row_collapses_to_zero(self):
        w = init_layer_norm(4)
        out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), w.gain, w.bias)
        assert np.allclose(out.data, 0.0)

    def test_two_point_symmetry(self):
        w = init_layer_norm(2)
        out = layer_norm(Tensor([[1.0, 3.0]]), w.gain, w.bias, eps=1e-12)
        assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.uniform(-1, 1, (2, 5)), requires_grad=True)
        w = init_layer_norm(5)
        params = {"x": x, "gain": w.gain, "bias": w.bias}
        mix = Tensor(rng.normal(size=(2, 5)))
        report = finite_difference_check(
            params, lambda: (layer_norm(x, w.gain, w.bias) * mix).sum()
        )
        assert report.passed and all(c.max_rel_err < 1e-5 for c in report.checks)


class TestFeedForward:
    def test_zero_weights_zero_output(self):
        dims = (3, 8)
        w = FeedForwardWeights(
            w1=Tensor(np.zeros((8, 32)), requires_grad=True),
            b1=Tensor(np.zeros(32), requires_grad=True),
            w2=Tensor(np.zeros((32, 8)), requires_grad=True),
            b2=Tensor(np.zeros(8), requires_grad=True),
        )
        out = feed_forward(Tensor(np.random.default_rng(0).normal(size=dims)), w)
        assert np.array_equal(out.data, np.zeros(dims))

    def test_identity_construction(self):
        # Push the activation far into its linear regime: gelu(z) ~ z for z >> 0,
        # so W1=I (+offset 8), W2=I (-offset) composes to identity on [-1, 1].
        d, offset = 4, 8.0
        w1 = np.zeros((d, 4 * d))
        w2 = np.zeros((4 * d, d))
        w1[:d, :d] = np.eye(d)
        w2[:d, :d] = np.eye(d)
        w = FeedForwardWeights(
            w1=Tensor(w1), b1=Tensor(np.full(4 * d, offset) * (np.arange(4 * d) < d)),
            w2=Tensor(w2), b2=Tensor(np.full(d, -offset)),
        )
        x = np.random.default_rng(1).uniform(-1, 1, (3, d))
        out = feed_forward(Tensor(x), w)
        assert np.max(np.abs(out.data - x)) < 1e-6

    def test_grad_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-1, 1, (3, 8)), requires_grad=True)
        w = init_feed_forward(np.random.default_rng(8), 8)
        params = {"x": x}
        params.update(dict(named_parameters(w, "ffn")))
        report = finite_difference_check(params, lambda: feed_forward(x, w).power(2.0).sum())
        assert report.passed and all(c.max_rel_err < 1e-5 for c in report.checks)


class TestHelpers:
    def test_gather_rows(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = gather_rows(table, [2, 0, 2])
        assert np.array_equal(out.data, table.data[[2, 0, 2]])
        out.sum().backward()
        assert np.array_equal(table.grad[:, 0], [1.0, 0.0, 2.0, 0.0])

    def test_l2_normalize_rows(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(5, 7)))
        norms = np.linalg.norm(l2_normalize_rows(x).data, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-12

    def test_named_parameters_stable_order(self):
        w = init_attention(np.random.default_rng(0), 4)
        names = [n for n, _ in named_parameters(w, "a")]
        assert names == ["a.wq", "a.bq", "a.wk", "a.bk", "a.wv", "a.bv", "a.wo", "a.bo"]
