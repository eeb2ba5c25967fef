from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from propattn.attention import SCHEME_KINDS, AttentionInputs, linear_attention
from propattn.streaming import (
    APPEND, RECOMPUTE, StreamTrace, WaitKSchedule, cross_attention_stream_update, default_max_len,
    frames_required, state_append, state_decode, state_init, validate_trace, waitk_reads_required,
)
from propattn.verify import causality_check, random_leap, rel_err, scheme_for, stream_causal


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(SCHEME_KINDS), n=st.integers(1, 64), seed=st.integers(0, 2 ** 32 - 1))
def test_stepwise_decode_equals_batch_causal(kind, n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(n, 4)) for _ in range(3))
    sch = scheme_for(kind, n)
    leap = random_leap(4, rng) if kind == "cos_leap" else None
    got, flags, _ = stream_causal(sch, q, k, v, leap)
    want, want_flags = linear_attention(AttentionInputs(q, k, v, causal=True), sch, leap, return_flags=True)
    assert rel_err(got, want.data) <= 1e-6
    np.testing.assert_array_equal(flags, want_flags)


@pytest.mark.parametrize("kind", ["none", "cos_fixed", "cos_leap", "rope", "max_length"])
def test_per_token_cost_is_constant(kind, rng):
    sch = scheme_for(kind, 64)
    s = state_init(sch, 8)
    leap = random_leap(8, rng) if kind == "cos_leap" else None
    costs = []
    for t in range(50):
        before = s.ops
        state_append(s, rng.normal(size=8), rng.normal(size=8), p_k=None if leap else 0.5, position=t,
                     leap_k=leap.k if leap else None)
        state_decode(s, rng.normal(size=8), p_q=None if leap else 0.5, position=t, leap_q=leap.q if leap else None)
        costs.append(s.ops - before)
    assert len(set(costs)) == 1
    assert s.M.shape == (sch.branches, 8, 8)


def test_step_length_state_cost_grows():
    s = state_init("step_length", 4)
    for _ in range(3):
        state_append(s, np.ones(4), np.ones(4))
    before = s.ops
    state_decode(s, np.ones(4))
    assert s.ops - before == 3 * 8


@pytest.mark.parametrize("kind", ["none", "cos_leap", "rope"])
def test_cross_append_in_pieces_equals_batch(kind, rng):
    keys, vals = rng.normal(size=(10, 4)), rng.normal(size=(10, 3))
    leap = random_leap(4, rng) if kind == "cos_leap" else None
    lk = leap.k if leap else None
    whole = cross_attention_stream_update(APPEND, state_init(kind, 4, 3), keys, vals, leap_k=lk)
    parts = state_init(kind, 4, 3)
    for a, b in ((0, 1), (1, 6), (6, 10)):
        parts = cross_attention_stream_update(APPEND, parts, keys[a:b], vals[a:b], leap_k=lk)
    np.testing.assert_allclose(whole.M, parts.M, atol=1e-12)
    rebuilt = cross_attention_stream_update(RECOMPUTE, parts, keys, vals, leap_k=lk)
    np.testing.assert_allclose(rebuilt.M, whole.M, atol=1e-12)
    assert rebuilt.tokens_seen == 10
    # the state answers queries like batch non-causal cross attention
    q = rng.normal(size=(3, 4))
    want = linear_attention(AttentionInputs(q, keys, vals), kind, leap,
                            positions=(np.arange(3), np.arange(10))).data
    got = np.array([state_decode(whole, qi, position=i, leap_q=leap.q if leap else None)[0]
                    for i, qi in enumerate(q)])
    assert rel_err(got, want) <= 1e-10


def test_stream_update_validation(rng):
    s = state_init("none", 4)
    with pytest.raises(ValueError):
        cross_attention_stream_update("sideways", s, rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
    with pytest.raises(ValueError):
        cross_attention_stream_update(APPEND, s, np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        state_append(state_init("cos_fixed", 4), np.ones(4), np.ones(4))
    with pytest.raises(ValueError):
        state_append(state_init("cos_fixed", 4), np.ones(4), np.ones(4), p_k=1.5)


def test_empty_state_decode_is_flagged():
    out, flagged = state_decode(state_init("cos_fixed", 3), np.ones(3), p_q=1.0)
    assert flagged and not out.any()


def test_waitk_schedule_rule():
    sched = WaitKSchedule(3, 2)
    assert sched.total_blocks(7) == 4
    assert [waitk_reads_required(i, sched, 4) for i in range(1, 5)] == [3, 4, 4, 4]
    assert [frames_required(i, sched, 7) for i in (1, 2)] == [6, 7]
    assert default_max_len(sched, 7) == 14
    assert WaitKSchedule.offline().k > 10 ** 6
    with pytest.raises(ValueError):
        WaitKSchedule(0)
    with pytest.raises(ValueError):
        waitk_reads_required(0, sched, 4)


def test_trace_roundtrip_and_validation():
    sched = WaitKSchedule(2)
    tr = StreamTrace()
    tr.read(2, 1)
    tr.write(5, 1)
    tr.read(1, 2)
    tr.write(6, 2)
    back = StreamTrace.from_jsonl(tr.to_jsonl())
    assert back.tokens == [5, 6] and back.reads_before_writes() == [2, 3]
    assert validate_trace(back, sched, 5) == []
    bad = StreamTrace()
    bad.read(1, 1)
    bad.write(1, 1)
    assert validate_trace(bad, sched, 5)
    with pytest.raises(ValueError):
        StreamTrace.from_jsonl('{"action": "JUMP", "units": 1, "token": null, "step": 0}\n')


def test_unread_frame_mutation_never_changes_emitted_tokens():
    check = causality_check(trials=3, k=2)
    assert check["passed"], check
