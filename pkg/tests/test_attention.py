import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from propattn import tensor as T
from propattn.attention import (
    HALF_PI, SCHEME_KINDS, AttentionInputs, LeaPModule, LeaPPair, ReweightScheme, cos_branch_factors,
    fixed_proportions, implicit_score_matrix, init_attention_params, leap_module_params,
    leap_param_overhead, linear_attention, multi_head_attention, quadratic_reweighted_oracle,
    reweight_matrix, rotation_matrix, softmax_attention,
)
from propattn.tensor import Tensor
from propattn.verify import random_leap, rel_err, scheme_for


def _inputs(rng, n, d=4, causal=False, lead=(), n_k=None):
    n_k = n if n_k is None else n_k
    return AttentionInputs(rng.normal(size=lead + (n, d)), rng.normal(size=lead + (n_k, d)),
                           rng.normal(size=lead + (n_k, 3)), causal=causal)


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(SCHEME_KINDS), n=st.integers(1, 40), d=st.sampled_from([2, 4, 6]),
       causal=st.booleans(), seed=st.integers(0, 2 ** 32 - 1))
def test_linear_matches_quadratic_oracle(kind, n, d, causal, seed):
    rng = np.random.default_rng(seed)
    inp = _inputs(rng, n, d, causal)
    sch = scheme_for(kind, n)
    leap = random_leap(d, rng) if kind == "cos_leap" else None
    out, flags = linear_attention(inp, sch, leap, return_flags=True)
    ref, ref_flags = quadratic_reweighted_oracle(inp, sch, leap, return_flags=True)
    assert rel_err(out.data, ref) <= 1e-6
    np.testing.assert_array_equal(flags, ref_flags)


@settings(max_examples=40, deadline=None)
@given(n1=st.integers(1, 20), n2=st.integers(1, 20), seed=st.integers(0, 2 ** 32 - 1),
       kind=st.sampled_from(["none", "cos_fixed", "cos_leap", "rope"]))
def test_cross_attention_lengths_differ(n1, n2, seed, kind):
    rng = np.random.default_rng(seed)
    inp = _inputs(rng, n1, 4, n_k=n2)
    leap = random_leap(4, rng) if kind == "cos_leap" else None
    assert rel_err(linear_attention(inp, kind, leap).data, quadratic_reweighted_oracle(inp, kind, leap)) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1))
def test_ptolemy_split(a, b):
    (ca, sa), (cb, sb) = cos_branch_factors([a]), cos_branch_factors([b])
    assert math.isclose(ca[0] * cb[0] + sa[0] * sb[0], math.cos(HALF_PI * (a - b)), abs_tol=1e-12)
    assert min(ca[0], sa[0], cb[0], sb[0]) >= 0.0


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(["cos_fixed", "cos_leap", "step_length", "max_length", "stepping_max_length"]),
       n=st.integers(1, 30), causal=st.booleans(), seed=st.integers(0, 2 ** 32 - 1))
def test_reweight_in_unit_interval_and_rows_stochastic(kind, n, causal, seed):
    rng = np.random.default_rng(seed)
    inp = _inputs(rng, n, 4, causal)
    leap = random_leap(4, rng) if kind == "cos_leap" else None
    sigma = reweight_matrix(inp, scheme_for(kind, n), leap)
    assert sigma.min() >= -1e-12 and sigma.max() <= 1 + 1e-12
    scores, flags = implicit_score_matrix(inp, scheme_for(kind, n), leap)
    assert scores.min() >= 0.0
    np.testing.assert_allclose(scores.sum(-1)[~flags], 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(SCHEME_KINDS), n=st.integers(2, 24), seed=st.integers(0, 2 ** 32 - 1))
def test_causal_rows_ignore_future_tokens(kind, n, seed):
    rng = np.random.default_rng(seed)
    inp = _inputs(rng, n, 4, causal=True)
    sch = scheme_for(kind, n)
    leap = random_leap(4, rng) if kind == "cos_leap" else None
    cut = n // 2
    q, k, v = (x.data.copy() for x in (inp.q, inp.k, inp.v))
    for x in (q, k, v):
        x[cut:] = rng.normal(size=x[cut:].shape)
    full = linear_attention(inp, sch, leap).data
    mutated = linear_attention(AttentionInputs(q, k, v, causal=True), sch, leap).data
    np.testing.assert_array_equal(full[:cut], mutated[:cut])


def test_prefix_invariant_kinds_are_streaming_causal(rng):
    # schemes whose proportions depend only on the token index give identical prefixes
    for sch in (ReweightScheme("none"), ReweightScheme("rope"), ReweightScheme("max_length", max_length=64),
                ReweightScheme("stepping_max_length", step=4), ReweightScheme("step_length")):
        inp = _inputs(rng, 20, 4, causal=True)
        head = AttentionInputs(inp.q.data[:9], inp.k.data[:9], inp.v.data[:9], causal=True)
        assert rel_err(linear_attention(inp, sch).data[:9], linear_attention(head, sch).data) <= 1e-9


def test_proportions_are_one_based():
    np.testing.assert_allclose(fixed_proportions(4), [0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(fixed_proportions(3, "max_length", max_length=6), [1 / 6, 2 / 6, 3 / 6])
    np.testing.assert_allclose(fixed_proportions(5, "stepping_max_length", step=2), [.5, 1, .75, 1, 5 / 6])
    np.testing.assert_allclose(fixed_proportions(2, "step_length", step_count=4), [.25, .5])
    with pytest.raises(ValueError):
        fixed_proportions(5, "max_length", max_length=4)


def test_cos_fixed_reweight_values():
    inp = _inputs(np.random.default_rng(0), 3, 2)
    sigma = reweight_matrix(inp, "cos_fixed")
    assert math.isclose(sigma[0, 2], math.cos(HALF_PI * (1 / 3 - 1)))
    np.testing.assert_allclose(np.diag(sigma), 1.0)


def test_step_length_causal_uses_current_length():
    inp = _inputs(np.random.default_rng(0), 4, 2, causal=True)
    sigma = reweight_matrix(inp, "step_length")
    assert math.isclose(sigma[1, 0], math.cos(HALF_PI * (1 - 1 / 2)))
    assert math.isclose(sigma[3, 0], math.cos(HALF_PI * (1 - 1 / 4)))
    assert sigma[0, 1] == 0.0


def test_constant_leap_collapses_to_plain_linear(rng):
    inp = _inputs(rng, 12, 4)
    leap = random_leap(4, rng)
    for m in (leap.q, leap.k):
        m.W2.data[...] = 0.0
        m.b2.data[...] = 0.3
    np.testing.assert_allclose(linear_attention(inp, "cos_leap", leap).data, linear_attention(inp, "none").data,
                               rtol=1e-12, atol=1e-12)


def test_leap_one_side_off_uses_fixed_proportions(rng):
    inp = _inputs(rng, 9, 4)
    leap = LeaPPair(q=LeaPModule(4, 2, rng))
    sch = ReweightScheme("cos_leap", leap_k=False)
    assert rel_err(linear_attention(inp, sch, leap).data, quadratic_reweighted_oracle(inp, sch, leap)) <= 1e-9
    with pytest.raises(ValueError):
        linear_attention(inp, "cos_leap", leap)


def test_leap_output_range_and_numpy_twin(rng):
    m = LeaPModule(8, 2, rng)
    x = rng.normal(size=(3, 5, 8)) * 10
    p = m.forward(Tensor(x)).data
    assert p.shape == (3, 5) and p.min() >= 0 and p.max() <= 1
    np.testing.assert_allclose(p, m.forward_numpy(x), rtol=1e-12)
    with pytest.raises(ValueError):
        LeaPModule(6, 4)


def test_rope_relative_position_property(rng):
    d = 6
    for a, b in [(0, 3), (5, 2), (11, 11)]:
        Ra, Rb = rotation_matrix(a, d), rotation_matrix(b, d)
        np.testing.assert_allclose(Ra.T @ Rb, rotation_matrix(b - a, d), atol=1e-12)
        np.testing.assert_allclose(Ra.T @ Ra, np.eye(d), atol=1e-12)


def test_denominator_floor_flags_dead_rows():
    q = np.array([[-1.0, -1.0], [1.0, 0.5]])
    k = np.array([[0.5, 1.0], [1.0, 1.0]])
    inp = AttentionInputs(q, k, np.ones((2, 2)))
    out, flags = linear_attention(inp, "cos_fixed", return_flags=True)
    assert flags.tolist() == [True, False]
    np.testing.assert_array_equal(out.data[0], 0.0)
    assert np.all(np.isfinite(out.data))


def test_softmax_attention_rows_sum_to_one_causal(rng):
    inp = _inputs(rng, 6, 4, causal=True)
    v = np.eye(6)
    inp = AttentionInputs(inp.q, inp.k, v, causal=True)
    w = softmax_attention(inp).data
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert np.all(np.triu(w, 1) == 0)


@pytest.mark.parametrize("scheme", ["softmax", "none", "cos_fixed", "cos_leap", "rope"])
def test_multi_head_shapes_and_batch_independence(scheme, rng):
    d, heads = 8, 2
    params = {k[2:]: v for k, v in init_attention_params(d, rng, "a.").items()}
    leap = random_leap(d // heads, rng) if scheme == "cos_leap" else None
    x = rng.normal(size=(3, 5, d))
    out = multi_head_attention(Tensor(x), Tensor(x), params, heads, scheme, causal=True, leap=leap)
    single = multi_head_attention(Tensor(x[1]), Tensor(x[1]), params, heads, scheme, causal=True, leap=leap)
    assert out.shape == (3, 5, d)
    np.testing.assert_allclose(out.data[1], single.data, rtol=1e-10, atol=1e-12)
    with pytest.raises(ValueError):
        multi_head_attention(Tensor(x), Tensor(x), params, 3, scheme)


def test_scheme_parsing():
    assert ReweightScheme.parse("rope").kind == "rope"
    assert ReweightScheme.parse({"kind": "cos_leap", "leap_k": False}).leap_k is False
    with pytest.raises(ValueError):
        ReweightScheme.parse("bogus")
    with pytest.raises(ValueError):
        ReweightScheme.parse({"kind": "max_length"})
    with pytest.raises(ValueError):
        ReweightScheme.parse({"kind": "none", "extra": 1})


def test_leap_parameter_counts():
    assert leap_module_params(8, 1) == 8 * 8 + 8 + 8 + 1
    assert leap_module_params(8, 8) == 8 + 3
    m = LeaPModule(8, 4)
    assert m.n_params == leap_module_params(8, 4)
    count, frac = leap_param_overhead(64, 2, 2, 4, base_params=100000)
    assert count == 2 * 2 * leap_module_params(32, 4) and frac == count / 100000
