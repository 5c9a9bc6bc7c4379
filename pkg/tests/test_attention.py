import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lopa import attention as at
from lopa import numeric as nm


def naive_head(w, xq, ctx):
    """Plain softmax over q.k logits, no stabilisation."""
    q = w.wq @ xq[:, 0]
    logits = np.array([q @ (w.wk @ ctx[:, j]) for j in range(ctx.shape[1])]) * w.factor
    a = np.exp(logits) / np.exp(logits).sum()
    return sum(a[j] * (w.wv @ ctx[:, j]) for j in range(ctx.shape[1]))[:, None], a


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


cases = st.tuples(
    st.sampled_from([4, 8, 16]),  # d
    st.sampled_from([1, 2, 4]),  # d_head divisor
    st.integers(0, 6),  # m
    st.integers(1, 8),  # n
    st.sampled_from([at.UNSCALED, at.INV_SQRT_DH]),
    st.integers(0, 2**31),
)


@settings(max_examples=150, deadline=None)
@given(cases)
def test_direct_equals_decomposed(case):
    d, div, m, n, mode, seed = case
    rng = np.random.default_rng(seed)
    w = at.HeadWeights.random(rng, d, d // div, mode)
    xq = rng.standard_normal((d, 1))
    z = rng.standard_normal((d, m))
    x = rng.standard_normal((d, n))
    direct = at.prefix_forward_direct(w, xq, z, x)
    dec = at.prefix_forward_decomposed(w, xq, z, x)
    assert rel_err(dec, direct) <= 1e-10


@settings(max_examples=80, deadline=None)
@given(cases)
def test_head_and_weights_match_naive_oracle(case):
    d, div, m, n, mode, seed = case
    rng = np.random.default_rng(seed)
    w = at.HeadWeights.random(rng, d, d // div, mode)
    xq = rng.standard_normal((d, 1))
    z = rng.standard_normal((d, m))
    x = rng.standard_normal((d, n))
    out, a = naive_head(w, xq, np.concatenate([z, x], axis=1))
    assert np.allclose(at.prefix_forward_direct(w, xq, z, x), out, rtol=1e-12, atol=1e-13)
    assert np.allclose(at.prefix_attention_weights(w, xq, z, x), a[:m], rtol=1e-12, atol=1e-15)


def test_empty_prefix_is_plain_attention(rng):
    w = at.HeadWeights.random(rng, 8, 4)
    xq, x = rng.standard_normal((8, 1)), rng.standard_normal((8, 5))
    z = np.zeros((8, 0))
    plain = at.head_forward(w, xq, x)
    assert np.array_equal(at.prefix_forward_direct(w, xq, z, x), plain)
    assert np.array_equal(at.prefix_forward_decomposed(w, xq, z, x), plain)
    assert at.prefix_attention_weights(w, xq, z, x).shape == (0,)


def test_weights_stay_finite_for_large_logits(rng):
    w = at.HeadWeights.random(rng, 8, 8, at.UNSCALED, std=30.0)
    xq, z, x = (rng.standard_normal((8, k)) * 10 for k in (1, 3, 4))
    a = at.prefix_attention_weights(w, xq, z, x)
    assert np.all(np.isfinite(a)) and a.sum() <= 1.0 + 1e-12
    dec = at.prefix_forward_decomposed(w, xq, z, x)
    assert rel_err(dec, at.prefix_forward_direct(w, xq, z, x)) <= 1e-10


def test_zero_prefix_still_rescales(rng):
    # z = 0 adds no bias but its keys still take softmax mass
    w = at.HeadWeights.random(rng, 8, 4)
    xq, x = rng.standard_normal((8, 1)), rng.standard_normal((8, 5))
    z = np.zeros((8, 2))
    a = at.prefix_attention_weights(w, xq, z, x)
    o = at.head_forward(w, xq, x)
    assert a.sum() > 0
    assert np.allclose(at.prefix_forward_direct(w, xq, z, x), (1 - a.sum()) * o, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31))
def test_offset_subspace_rank_bounded(d_head, m, seed):
    rng = np.random.default_rng(seed)
    w = at.HeadWeights.random(rng, 12, d_head)
    z = rng.standard_normal((12, m))
    rank = at.offset_subspace_rank(w, z)
    assert rank == min(m, d_head)
    basis = at.offset_subspace_basis(w, z)
    assert basis.shape == (d_head, rank)
    assert at.same_span(basis, w.wv @ z)


def test_offset_span_contains_bias(rng):
    w = at.HeadWeights.random(rng, 10, 5)
    xq, z, x = rng.standard_normal((10, 1)), rng.standard_normal((10, 2)), rng.standard_normal((10, 4))
    a = at.prefix_attention_weights(w, xq, z, x)
    bias = w.wv @ z @ a[:, None]
    basis = at.offset_subspace_basis(w, z)
    resid = bias - basis @ (basis.T @ bias)
    assert np.abs(resid).max() < 1e-12


def test_shape_errors(rng):
    w = at.HeadWeights.random(rng, 8, 4)
    with pytest.raises(nm.ShapeError):
        at.prefix_forward_direct(w, np.ones((7, 1)), np.ones((8, 1)), np.ones((8, 2)))
    with pytest.raises(nm.ShapeError):
        at.HeadWeights(np.ones((4, 8)), np.ones((4, 8)), np.ones((3, 8)))
    with pytest.raises(ValueError):
        at.MultiHeadConfig(10, 3)
