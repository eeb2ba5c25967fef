import numpy as np
import pytest

from propattn.model import Transformer, TransformerConfig
from propattn.tasks import Dataset, TaskSpec, chunk_reverse, generate_task, task_target
from propattn.train import (
    Adam, TrainConfig, TrainingDiverged, clip_global_norm, compare_schemes, evaluate, load_checkpoint, lr_at,
    save_checkpoint, train,
)
from propattn.tensor import Tensor


def test_targets():
    assert task_target("copy", [1, 2, 3]) == [1, 2, 3]
    assert task_target("reverse", [1, 2, 3]) == [3, 2, 1]
    assert task_target("parity", [1, 0, 1, 1]) == [1]
    assert chunk_reverse(list(range(6)), 4) == [3, 2, 1, 0, 5, 4]
    with pytest.raises(ValueError):
        task_target("char_lm", [1])


@pytest.mark.parametrize("kind", ["copy", "reverse", "parity", "toy_translate"])
def test_generation_is_deterministic_and_consistent(kind):
    spec = TaskSpec(kind, min_len=3, max_len=9, vocab=7)
    a, b = generate_task(spec, 50, seed=4), generate_task(spec, 50, seed=4)
    assert a == b and a != generate_task(spec, 50, seed=5)
    for s, t in zip(a.src, a.tgt):
        assert 3 <= len(s) <= 9 and t == task_target(kind, s)
        assert max(s) < (2 if kind == "parity" else 7)


def test_char_lm_windows(tmp_path):
    path = tmp_path / "text.txt"
    path.write_bytes(b"hello streaming world, " * 10)
    ds = generate_task(TaskSpec("char_lm", min_len=5, max_len=5, text_path=str(path)), 20)
    for s, t in zip(ds.src, ds.tgt):
        assert s[1:] == t[:-1]
    with pytest.raises(ValueError):
        TaskSpec("char_lm")


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec("sorting")
    with pytest.raises(ValueError):
        TaskSpec(min_len=5, max_len=4)
    with pytest.raises(ValueError):
        TaskSpec.from_dict({"kind": "copy", "colour": 1})
    spec = TaskSpec("parity")
    assert (spec.arch, spec.n_classes) == ("encoder", 2)
    assert TaskSpec("copy", vocab=16).model_vocab == 18


def test_dataset_jsonl_roundtrip_and_batches(tmp_path, rng):
    ds = generate_task(TaskSpec("reverse", min_len=2, max_len=5), 40)
    ds.to_jsonl(tmp_path / "d.jsonl")
    assert Dataset.from_jsonl(tmp_path / "d.jsonl") == ds
    seen = 0
    for src, tgt in ds.batches(8, rng):
        assert src.shape[0] <= 8 and src.shape == tgt.shape
        seen += src.shape[0]
    assert seen == len(ds)
    (tmp_path / "bad.jsonl").write_text('{"src": [1]}\n')
    with pytest.raises(ValueError):
        Dataset.from_jsonl(tmp_path / "bad.jsonl")


def test_lr_schedule():
    tc = TrainConfig(steps=10, warmup=4, lr=1.0)
    assert [lr_at(s, tc) for s in range(4)] == [0.25, 0.5, 0.75, 1.0]
    assert lr_at(9, tc) == pytest.approx(1 / 6) and lr_at(10, tc) == 0.0


def test_adam_minimizes_quadratic():
    p = {"x": Tensor(np.array([3.0, -2.0]))}
    opt = Adam(p)
    for _ in range(400):
        opt.step({"x": 2 * p["x"].data}, 0.05)
    assert np.abs(p["x"].data).max() < 1e-2


def test_clip_global_norm():
    g, norm = clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == 5.0 and np.isclose(np.hypot(g["a"], g["b"]), 1.0)
    g2, _ = clip_global_norm({"a": np.array([0.1])}, 1.0)
    assert g2["a"][0] == 0.1


def test_train_config_strict():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"step": 3})
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert TrainConfig.from_dict({"betas": [0.8, 0.9]}).betas == (0.8, 0.9)


def _tiny(sites=None, seed=0, dropout=0.1):
    return Transformer(TransformerConfig(d_model=16, heads=2, enc_layers=1, dec_layers=1, ffn_dim=32,
                                         vocab_size=8, max_positions=16, sites=sites or {}, dropout=dropout,
                                         seed=seed))


def test_training_is_deterministic_and_learns():
    ds = generate_task(TaskSpec("copy", min_len=4, max_len=4, vocab=6), 200)
    tc = TrainConfig(batch_size=16, steps=60, lr=1e-2, warmup=10)
    _, l1 = train(_tiny({"dec_self": "cos_leap"}), ds, tc)
    _, l2 = train(_tiny({"dec_self": "cos_leap"}), ds, tc)
    assert l1 == l2
    assert np.mean(l1[-10:]) < np.mean(l1[:10]) - 0.3


def test_divergence_is_reported():
    m = _tiny()
    m.params["out.b"].data[0] = np.nan
    ds = generate_task(TaskSpec("copy", min_len=3, max_len=3, vocab=6), 10)
    with pytest.raises(TrainingDiverged):
        train(m, ds, TrainConfig(steps=2))


def test_evaluate_metrics_bounds():
    ds = generate_task(TaskSpec("copy", min_len=3, max_len=4, vocab=6), 30)
    m = _tiny()
    acc = evaluate(m, ds, "token_accuracy")
    seq = evaluate(m, ds, "sequence_accuracy")
    ppl = evaluate(m, ds, "perplexity")
    assert 0 <= seq <= 1 and 0 <= acc <= 1 and ppl >= 1
    with pytest.raises(ValueError):
        evaluate(m, Dataset(), "perplexity")
    with pytest.raises(ValueError):
        evaluate(m, ds, "bleu")


def test_checkpoint_roundtrip(tmp_path):
    m = _tiny({"cross": "cos_leap"}, seed=4)
    save_checkpoint(m, tmp_path / "ck", extra={"note": 1})
    back, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["extra"] == {"note": 1} and manifest["n_floats"] == m.n_params()
    assert all(np.array_equal(back.params[k].data, m.params[k].data) for k in m.params)
    raw = (tmp_path / "ck" / "weights.bin").read_bytes()
    (tmp_path / "ck" / "weights.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck")


def test_compare_schemes_adds_softmax_baseline():
    ds = generate_task(TaskSpec("copy", min_len=3, max_len=3, vocab=6), 40)
    cfg = _tiny().cfg
    rows = compare_schemes(ds, ds[:10], cfg, [{"dec_self": "none"}], TrainConfig(steps=3, batch_size=8),
                           seeds=[0, 1])
    assert [r["scheme"] for r in rows] == ["softmax", "dec_self=none"]
    assert all(len(r["per_seed"]) == 2 for r in rows)
