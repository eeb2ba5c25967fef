"""Acceptance gate: criteria 1-9, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are
also printed without ``-s``).
"""
import time

import numpy as np
import pytest

from propattn.attention import leap_param_overhead
from propattn.bench import measure_throughput
from propattn.metrics import bundled_table_text, parse_table, table_rcp
from propattn.model import Transformer, TransformerConfig, lra_like_config, transformer_param_count
from propattn.tasks import TaskSpec, generate_task
from propattn.train import TrainConfig, compare_schemes, evaluate, train
from propattn.verify import equivalence_suite, gradient_suite, metrics_suite, streaming_suite


@pytest.fixture
def report(capsys):
    def emit(n, name, passed, detail, seconds):
        with capsys.disabled():
            status = "PASS" if passed else "FAIL"
            print(f"\n[criterion {n}] {status} {name}: {detail} ({seconds:.1f} s)")
    return emit


def _suite(fn, *args, **kw):
    t0 = time.perf_counter()
    checks = fn(*args, **kw)
    return checks, time.perf_counter() - t0


def _failed(checks):
    return [c for c in checks if not c["passed"]]


def test_c1_table_reproduction(report):
    t0 = time.perf_counter()
    scored, std = table_rcp(parse_table(bundled_table_text()))
    dt = time.perf_counter() - t0
    worst = max(abs(r["rcp"] - r["printed_rcp"]) for r in scored)
    anchors = {r["scheme"]: round(r["rcp"], 2) for r in scored}
    ok = worst <= 0.02 and len(scored) == 10 and dt < 1.0
    report(1, "score table", ok, f"{len(scored)} rows, worst |diff| {worst:.4f}, std_bench {std:.6f}, "
                                 f"anchors {anchors['leap_1.5pct']}/{anchors['cosformer']}/{anchors['linear']}", dt)
    assert ok


def test_c2_oracle_equivalence(report):
    checks, dt = _suite(equivalence_suite, seeds=20)
    bad = _failed(checks)
    worst = max(c["value"] for c in checks if c["name"].startswith("linear_vs_oracle"))
    ok = not bad and dt < 30
    report(2, "oracle equivalence", ok, f"{len(checks)} checks, worst rel err {worst:.2e}", dt)
    assert ok, bad


def test_c3_streaming_equivalence(report):
    checks, dt = _suite(streaming_suite)
    bad = _failed(checks)
    ok = not bad and dt < 30
    report(3, "streaming equivalence", ok, f"{len(checks)} checks, failures {[c['name'] for c in bad]}", dt)
    assert ok, bad


def test_c4_gradient_checks(report):
    checks, dt = _suite(gradient_suite, instances=5)
    bad = _failed(checks)
    detail = ", ".join(f"{c['name']} {c['value']:.1e}" for c in checks)
    ok = not bad and dt < 60
    report(4, "gradient checks", ok, detail, dt)
    assert ok, bad


def test_c5_metric_properties(report):
    checks, dt = _suite(metrics_suite, grid=1000)
    bad = _failed(checks)
    ok = not bad and dt < 5
    report(5, "metric properties", ok, f"{len(checks)} checks over a 1000-point grid", dt)
    assert ok, bad


COPY_MODEL = dict(arch="encdec", d_model=32, heads=4, enc_layers=2, dec_layers=2, ffn_dim=64, vocab_size=18,
                  max_positions=64, sites={"dec_self": "cos_leap"}, dropout=0.1)
COPY_TRAIN = dict(batch_size=32, steps=800, lr=5e-3, warmup=200, clip=1.0)


def test_c6_toy_training(report):
    spec = TaskSpec("copy", min_len=16, max_len=16, vocab=16)
    t0 = time.perf_counter()
    scores = []
    for seed in range(3):
        train_ds = generate_task(spec, 4000, seed=seed)
        dev_ds = generate_task(spec, 200, seed=seed + 1000)
        model = Transformer(TransformerConfig(**COPY_MODEL, seed=seed))
        train(model, train_ds, TrainConfig(**COPY_TRAIN, seed=seed))
        scores.append(evaluate(model, dev_ds, "sequence_accuracy"))
    dt = time.perf_counter() - t0
    ok = sum(s >= 0.95 for s in scores) >= 2
    report(6, "copy task, cos_leap decoder self-attention", ok,
           f"held-out sequence accuracy per seed {[round(s, 3) for s in scores]}", dt)
    assert ok


def test_c7_trend_check(report):
    """Reported, not asserted: the direction of the cos_leap vs none gap."""
    spec = TaskSpec("toy_translate", min_len=16, max_len=16, vocab=16)
    train_ds, dev_ds = generate_task(spec, 2000, seed=0), generate_task(spec, 200, seed=1000)
    cfg = TransformerConfig(d_model=32, heads=4, enc_layers=2, dec_layers=2, ffn_dim=64, vocab_size=18,
                            max_positions=64, dropout=0.1)
    t0 = time.perf_counter()
    rows = compare_schemes(train_ds, dev_ds, cfg, [{"dec_self": "cos_leap"}, {"dec_self": "none"}],
                           TrainConfig(batch_size=32, steps=150, lr=5e-3, warmup=50), seeds=[0, 1, 2])
    dt = time.perf_counter() - t0
    ppl = {r["scheme"]: r["mean"] for r in rows}
    order = " < ".join(sorted(ppl, key=ppl.get))
    direction = ppl["dec_self=cos_leap"] <= ppl["dec_self=none"]
    report(7, "trend (soft)", True, f"mean dev perplexity {{{', '.join(f'{k}: {v:.3f}' for k, v in ppl.items())}}}"
                                    f"; order {order}; cos_leap <= none: {direction}", dt)
    assert all(np.isfinite(v) for v in ppl.values())


LINEAR = ("none", "cos_fixed", "cos_leap", "rope")


def test_c8_scaling_shape(report):
    t0 = time.perf_counter()
    ratios = {}
    for scheme in LINEAR + ("softmax",):
        r1k, r4k = measure_throughput(scheme, [1024, 4096], d_model=64, heads=2, reps=5, batch=1)
        ratios[scheme] = r1k.itr_per_sec / r4k.itr_per_sec
    dt = time.perf_counter() - t0
    ok = all(ratios[s] <= 6 for s in LINEAR) and ratios["softmax"] >= 7 and dt < 300
    report(8, "scaling shape t(4k)/t(1k)", ok, ", ".join(f"{k} {v:.2f}" for k, v in ratios.items()), dt)
    assert ok, ratios


def test_c9_parameter_overhead(report):
    t0 = time.perf_counter()
    cfg = lra_like_config(leap_downsample=4)
    census = Transformer(cfg).n_params()
    closed = transformer_param_count(cfg)
    count, frac = leap_param_overhead(64, 2, 2, 4)
    base = transformer_param_count(cfg, include_leap=False)
    ok = census == closed and frac <= 0.015 and closed - base == count
    report(9, "parameter overhead", ok, f"LeaP {count} of base {base} = {100 * frac:.2f}%, "
                                        f"census {census} vs closed form {closed}", time.perf_counter() - t0)
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
