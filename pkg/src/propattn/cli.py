"""``propattn`` command line: verify, train, eval, bench, simulate, rcp, dump.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.
"""
import argparse
import csv
import json
from pathlib import Path
import sys

import numpy as np

DEFAULT_SEED = 17
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _csv_list(text, cast=str):
    try:
        return [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from None


def load_config(path, allowed, required=()):
    """Strict JSON config: unknown keys and missing files are usage errors."""
    if path is None:
        cfg = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    missing = [k for k in required if k not in cfg]
    if missing:
        raise UsageError(f"missing config keys: {missing}")
    return cfg


def _seed(args, cfg):
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", DEFAULT_SEED))


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args):
    from .verify import run_suite
    summary = run_suite(args.suite)
    summary["seed"] = args.seed if args.seed is not None else DEFAULT_SEED
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        _write_json(_out(args) / f"verify_{args.suite}.json", summary)
    print(text)
    return EXIT_OK if summary["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# train / eval

TRAIN_KEYS = ("task", "model", "train", "n_train", "n_dev", "metrics", "seed")


def _build_run(cfg, seed):
    from .model import Transformer, TransformerConfig
    from .tasks import TaskSpec
    from .train import TrainConfig
    try:
        task = TaskSpec.from_dict({**cfg.get("task", {}), "seed": seed})
        mdict = dict(cfg.get("model", {}))
        for fixed in ("arch", "vocab_size", "n_classes", "seed"):
            if fixed in mdict:
                raise ValueError(f"model.{fixed} is derived from the task and seed")
        mdict.update(arch=task.arch, vocab_size=task.model_vocab, seed=seed)
        if task.n_classes:
            mdict["n_classes"] = task.n_classes
        mdict.setdefault("max_positions", max(64, task.max_len + 2))
        mcfg = TransformerConfig.from_dict(mdict)
        tc = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return task, mcfg, tc, Transformer(mcfg)


def _datasets(task, cfg, seed):
    from .tasks import generate_task
    n_train, n_dev = int(cfg.get("n_train", 2000)), int(cfg.get("n_dev", 200))
    return generate_task(task, n_train, seed=seed), generate_task(task, n_dev, seed=seed + 1)


def _metrics_for(task, cfg):
    from .train import METRICS
    default = ["token_accuracy", "sequence_accuracy", "perplexity"]
    metrics = cfg.get("metrics", default)
    bad = [m for m in metrics if m not in METRICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}")
    return metrics


def cmd_train(args):
    from .train import TrainingDiverged, evaluate, save_checkpoint, train
    cfg = load_config(args.config, TRAIN_KEYS, required=("task",))
    seed = _seed(args, cfg)
    task, mcfg, tc, model = _build_run(cfg, seed)
    metrics = _metrics_for(task, cfg)
    out = _out(args)
    train_ds, dev_ds = _datasets(task, cfg, seed)
    train_ds.to_jsonl(out / "train.jsonl")
    dev_ds.to_jsonl(out / "dev.jsonl")
    losses = []
    status = EXIT_OK
    try:
        train(model, train_ds, tc, on_step=lambda s, v: losses.append((s, v)))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        status = EXIT_FAIL
    with open(out / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "seed"])
        for s, v in losses:
            w.writerow([s, repr(float(v)), seed])
    if status != EXIT_OK:
        return status
    save_checkpoint(model, out / "checkpoint", extra={"task": task.to_dict(), "train": tc.to_dict(),
                                                      "seed": seed})
    scores = {m: evaluate(model, dev_ds, m) for m in metrics}
    _write_json(out / "eval.json", {"seed": seed, "task": task.kind, "sites": mcfg.sites, "dev": scores,
                                    "steps": tc.steps})
    print(json.dumps({"seed": seed, "dev": scores}, sort_keys=True))
    return EXIT_OK


EVAL_KEYS = ("checkpoint", "dataset", "n_dev", "metrics", "seed")


def _load_ckpt(path):
    from .train import load_checkpoint
    if path is None or not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"unreadable checkpoint {path}: {exc}") from None


def _task_from_manifest(manifest):
    from .tasks import TaskSpec
    task = manifest.get("extra", {}).get("task")
    if task is None:
        raise UsageError("checkpoint does not record its task; pass a dataset")
    return TaskSpec.from_dict(task)


def cmd_eval(args):
    from .tasks import Dataset, generate_task
    from .train import evaluate
    cfg = load_config(args.config, EVAL_KEYS, required=("checkpoint",))
    seed = _seed(args, cfg)
    model, manifest = _load_ckpt(cfg["checkpoint"])
    if "dataset" in cfg:
        ds = Dataset.from_jsonl(cfg["dataset"])
    else:
        ds = generate_task(_task_from_manifest(manifest), int(cfg.get("n_dev", 200)), seed=seed + 1)
    if len(ds) == 0:
        raise UsageError("evaluation set is empty")
    metrics = _metrics_for(None, cfg)
    scores = {m: evaluate(model, ds, m) for m in metrics}
    _write_json(_out(args) / "eval.json", {"seed": seed, "scores": scores})
    print(json.dumps(scores, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

BENCH_KEYS = ("schemes", "seq_lens", "d_model", "heads", "reps", "batch", "causal", "quality", "seed")


def cmd_bench(args):
    from .bench import measure_throughput, tradeoff_report, write_bench_csv, write_report_csv
    from .report import write_svg
    cfg = load_config(args.config, BENCH_KEYS)
    seed = _seed(args, cfg)
    schemes = args.scheme or cfg.get("schemes", ["softmax", "none", "cos_leap"])
    lens = args.seq_lens or cfg.get("seq_lens", [256, 512, 1024])
    quality = cfg.get("quality")
    results = []
    try:
        for s in schemes:
            results += measure_throughput(s, lens, d_model=int(cfg.get("d_model", 64)),
                                          heads=int(cfg.get("heads", 2)), reps=int(cfg.get("reps", 5)),
                                          batch=int(cfg.get("batch", 1)), causal=bool(cfg.get("causal", False)),
                                          seed=seed)
        rows, points = tradeoff_report(results, quality)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _out(args)
    write_bench_csv(results, out / "bench.csv")
    write_report_csv(rows, out / "report.csv")
    write_svg(points, out / "scatter.svg", title=f"throughput vs quality (seed {seed})")
    for r in results:
        print(f"{r.scheme:>22s} N={r.seq_len:<6d} {r.itr_per_sec:10.3f} it/s  {r.analytic_peak_floats} floats")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate

SIM_KEYS = ("checkpoint", "test_set", "n_test", "k", "predecision_ratio", "enc_mode", "max_len", "seed")


def cmd_simulate(args):
    from .model import greedy_decode, simulate_simultaneous
    from .streaming import APPEND, ENC_MODES, OFFLINE_K, WaitKSchedule, validate_trace
    from .tasks import Dataset, generate_task
    cfg = load_config(args.config, SIM_KEYS, required=("checkpoint",))
    seed = _seed(args, cfg)
    model, manifest = _load_ckpt(cfg["checkpoint"])
    if model.cfg.arch != "encdec":
        raise UsageError("simulate needs an encoder-decoder checkpoint")
    if "test_set" in cfg:
        try:
            ds = Dataset.from_jsonl(cfg["test_set"])
        except (OSError, ValueError) as exc:
            raise UsageError(f"unreadable test set: {exc}") from None
    else:
        ds = generate_task(_task_from_manifest(manifest), int(cfg.get("n_test", 20)), seed=seed + 2)
    if len(ds) == 0:
        raise UsageError("test set is empty")
    k = cfg.get("k", 3)
    enc_mode = cfg.get("enc_mode", APPEND)
    if enc_mode not in ENC_MODES:
        raise UsageError(f"enc_mode must be one of {ENC_MODES}")
    try:
        sched = WaitKSchedule(OFFLINE_K if k is None else int(k), int(cfg.get("predecision_ratio", 1)))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(args)
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    problems, hyps = [], []
    try:
        for i, (src, tgt) in enumerate(zip(ds.src, ds.tgt)):
            max_len = cfg.get("max_len")
            trace, toks = simulate_simultaneous(model, src, sched, max_len=max_len, enc_mode=enc_mode)
            (tdir / f"{i:05d}.jsonl").write_text(trace.to_jsonl(), encoding="utf-8")
            problems += [f"sample {i}: {p}" for p in validate_trace(trace, sched, len(src))]
            offline = greedy_decode(model, np.array([src]), len(toks) + 1)[0] if sched.k == OFFLINE_K else None
            hyps.append({"index": i, "src": list(map(int, src)), "ref": list(map(int, tgt)), "hyp": toks,
                         "truncated": trace.truncated, "offline_match": None if offline is None else offline == toks})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with open(out / "hypotheses.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for h in hyps:
            fh.write(json.dumps(h) + "\n")
    exact = float(np.mean([h["hyp"] == h["ref"] for h in hyps]))
    summary = {"seed": seed, "k": sched.k, "predecision_ratio": sched.predecision_ratio, "enc_mode": enc_mode,
               "samples": len(hyps), "sequence_accuracy": exact, "schedule_problems": problems}
    _write_json(out / "simulate.json", summary)
    print(json.dumps({k: v for k, v in summary.items() if k != "schedule_problems"}, sort_keys=True))
    return EXIT_FAIL if problems else EXIT_OK


# ---------------------------------------------------------------------------
# rcp / dump


def cmd_rcp(args):
    from .metrics import bundled_table_text, parse_table, table_rcp
    try:
        text = bundled_table_text() if args.inputs is None else Path(args.inputs).read_text(encoding="utf-8")
        rows = parse_table(text)
        scored, std = table_rcp(rows, baseline=args.baseline)
    except FileNotFoundError:
        raise UsageError(f"inputs file not found: {args.inputs}") from None
    except (ValueError, KeyError, csv.Error) as exc:
        raise UsageError(str(exc)) from None
    lines = ["scheme,rcp,rcp_mem"]
    for r in scored:
        mem = "" if r["rcp_mem"] is None else f"{r['rcp_mem']:.6g}"
        lines.append(f"{r['scheme']},{r['rcp']:.6g},{mem}")
    text = "\n".join(lines) + "\n"
    if args.out:
        (_out(args) / "rcp.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"# std_bench={std:.6g} seed={args.seed if args.seed is not None else DEFAULT_SEED}", file=sys.stderr)
    return EXIT_OK


def cmd_dump(args):
    from .attention import AttentionInputs, reweight_matrix_dump
    from .verify import random_leap, scheme_for
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    n = (args.seq_lens or [8])[0]
    kind = (args.scheme or ["cos_fixed"])[0]
    rng = np.random.default_rng(seed)
    d = 8
    try:
        sch = scheme_for(kind, n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    q, k, v = (rng.normal(size=(n, d)) for _ in range(3))
    leap = random_leap(d, rng) if sch.kind == "cos_leap" else None
    w = reweight_matrix_dump(AttentionInputs(q, k, v, causal=args.causal), sch, leap)
    lines = ["q_index,k_index,weight"]
    lines += [f"{i},{j},{w[i, j]:.9g}" for i in range(n) for j in range(n)]
    text = "\n".join(lines) + "\n"
    if args.out:
        (_out(args) / f"reweight_{sch.kind}.csv").write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    from .verify import SUITES
    p = argparse.ArgumentParser(prog="propattn", description="proportion re-weighted linear attention toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
        sp.add_argument("--out", default=out_default, help="output directory")
        return sp

    sp = common(sub.add_parser("verify", help="run property suites"), out_default=None)
    sp.add_argument("--suite", required=True, choices=SUITES + ("all",))
    sp.set_defaults(fn=cmd_verify)
    common(sub.add_parser("train", help="train a toy model")).set_defaults(fn=cmd_train)
    common(sub.add_parser("eval", help="evaluate a checkpoint")).set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("bench", help="throughput grid and scatter"))
    sp.add_argument("--scheme", type=_csv_list, help="schemes, comma separated")
    sp.add_argument("--seq-lens", type=lambda t: _csv_list(t, int), help="sequence lengths, comma separated")
    sp.set_defaults(fn=cmd_bench)
    common(sub.add_parser("simulate", help="wait-k simultaneous decoding")).set_defaults(fn=cmd_simulate)
    sp = common(sub.add_parser("rcp", help="composite scores from a benchmark table"), out_default=None)
    sp.add_argument("--inputs", help="CSV with scheme,acc,thrpt[,mem,baseline] (default: bundled table)")
    sp.add_argument("--baseline", help="baseline scheme name (default: row with baseline=1)")
    sp.set_defaults(fn=cmd_rcp)
    sp = common(sub.add_parser("dump", help="re-weight matrix as CSV"), out_default=None)
    sp.add_argument("--scheme", type=_csv_list)
    sp.add_argument("--seq-lens", type=lambda t: _csv_list(t, int))
    sp.add_argument("--causal", action="store_true")
    sp.set_defaults(fn=cmd_dump)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"propattn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
