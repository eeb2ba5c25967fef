import numpy as np
import pytest

from propattn import tensor as T
from propattn.attention import leap_param_overhead
from propattn.model import (
    Transformer, TransformerConfig, greedy_decode, lra_like_config, simulate_simultaneous,
    transformer_param_count,
)
from propattn.streaming import APPEND, RECOMPUTE, WaitKSchedule, validate_trace


def _cfg(**kw):
    base = dict(d_model=16, heads=2, enc_layers=1, dec_layers=2, ffn_dim=24, vocab_size=12, max_positions=40,
                dropout=0.0, seed=3)
    base.update(kw)
    return TransformerConfig(**base)


CENSUS = [
    _cfg(),
    _cfg(sites={"enc_self": "cos_leap", "dec_self": "cos_leap", "cross": "cos_leap"}, leap_downsample=2),
    _cfg(sites={"dec_self": {"kind": "cos_leap", "leap_k": False}}),
    _cfg(arch="decoder", sites={"dec_self": "rope"}),
    _cfg(arch="encoder", sites={"enc_self": "cos_leap"}, n_classes=5),
    lra_like_config(),
]


@pytest.mark.parametrize("cfg", CENSUS, ids=range(len(CENSUS)))
def test_closed_form_count_matches_census(cfg):
    assert Transformer(cfg).n_params() == transformer_param_count(cfg)


def test_lra_leap_overhead_is_small():
    count, frac = leap_param_overhead(64, 2, 2, 4)
    cfg = lra_like_config()
    assert count == transformer_param_count(cfg) - transformer_param_count(cfg, include_leap=False)
    assert frac <= 0.015
    _, frac_small = leap_param_overhead(64, 2, 2, 32)
    assert frac_small < 0.003


SITE_MAPS = [
    {},
    {"dec_self": "cos_leap", "cross": "cos_leap", "enc_self": "cos_leap"},
    {"dec_self": "none", "cross": "rope"},
    {"dec_self": "step_length", "cross": "max_length"},
    {"dec_self": "stepping_max_length", "cross": "none"},
]


@pytest.mark.parametrize("sites", SITE_MAPS, ids=range(len(SITE_MAPS)))
@pytest.mark.parametrize("enc_mode", [APPEND, RECOMPUTE])
def test_stream_step_logits_equal_batch(sites, enc_mode, rng):
    m = Transformer(_cfg(sites=sites))
    src = rng.integers(0, 10, size=7)
    tgt = rng.integers(0, 10, size=(1, 5))
    tgt_in, _ = m.teacher_forcing(tgt)
    with T.no_grad():
        batch = m.logits(src[None], tgt_in).data[0]
    sess = m.stream_session(enc_mode)
    sess.read(src[:3])
    sess.read(src[3:])
    got = np.array([sess.step(t) for t in tgt_in[0]])
    np.testing.assert_allclose(got, batch, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("sites", SITE_MAPS[:3], ids=range(3))
def test_offline_waitk_equals_greedy(sites, rng):
    m = Transformer(_cfg(sites=sites))
    src = rng.integers(0, 10, size=6)
    trace, toks = simulate_simultaneous(m, src, WaitKSchedule.offline(), max_len=9)
    assert toks == greedy_decode(m, src[None], 9)[0]
    assert validate_trace(trace, WaitKSchedule.offline(), 6) == []


def test_waitk_trace_obeys_schedule_and_truncation(rng):
    m = Transformer(_cfg())
    sched = WaitKSchedule(2, 2)
    trace, toks = simulate_simultaneous(m, rng.integers(0, 10, size=7), sched, max_len=3)
    assert validate_trace(trace, sched, 7) == []
    if len(toks) == 3:
        assert trace.truncated


@pytest.mark.parametrize("sites", [{"cross": "cos_fixed"}, {"dec_self": "cos_fixed"}, {"cross": "step_length"},
                                   {"dec_self": {"kind": "cos_leap", "leap_k": False}}])
def test_length_dependent_sites_refuse_to_stream(sites):
    with pytest.raises(ValueError):
        Transformer(_cfg(sites=sites)).stream_session()


def test_model_loss_gradients_match_finite_differences():
    m = Transformer(_cfg(d_model=8, heads=2, enc_layers=1, dec_layers=1, ffn_dim=8, vocab_size=6,
                         sites={"dec_self": "cos_leap", "cross": "rope"}))
    src, tgt = np.array([[1, 2, 3]]), np.array([[3, 1]])
    picks = [m.params[n] for n in ("dec.0.self.leap.q.W2", "dec.0.cross.Wq", "enc.0.ffn.b1")]
    assert T.grad_check_params(lambda: T.scale_shift(m.loss(src, tgt), 1e-3, 0.0), picks) < 1e-4


def test_shapes_per_architecture(rng):
    enc = Transformer(_cfg(arch="encoder", n_classes=3))
    assert enc.logits(rng.integers(0, 10, size=(2, 5))).shape == (2, 3)
    dec = Transformer(_cfg(arch="decoder"))
    assert dec.logits(rng.integers(0, 10, size=(2, 5))).shape == (2, 5, 12)
    with pytest.raises(ValueError):
        enc.stream_session()


def test_positions_beyond_limit_raise(rng):
    m = Transformer(_cfg(arch="decoder", max_positions=4))
    with pytest.raises(ValueError):
        m.logits(rng.integers(0, 10, size=(1, 5)))


def test_config_validation_and_roundtrip():
    cfg = _cfg(sites={"cross": "rope"})
    assert TransformerConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.encoder_causal is True and cfg.sites["dec_self"] == "softmax"
    for bad in ({"heads": 3}, {"sites": {"middle": "none"}}, {"sites": {"cross": "bogus"}}, {"dropout": 1.0},
                {"leap_downsample": 3}, {"arch": "mixer"}):
        with pytest.raises(ValueError):
            _cfg(**bad)
    with pytest.raises(ValueError):
        TransformerConfig.from_dict({"width": 3})


def test_same_seed_same_weights():
    a, b = Transformer(_cfg()), Transformer(_cfg())
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
