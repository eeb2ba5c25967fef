"""Throughput timing, analytic memory accounting and the throughput/quality report."""
import csv
import ctypes
import ctypes.util
from dataclasses import dataclass
import statistics
import time

import numpy as np

from . import tensor as T
from .attention import LeaPModule, LeaPPair, ReweightScheme, init_attention_params, multi_head_attention
from .tensor import Tensor

BENCH_COLUMNS = ("scheme", "seq_len", "itr_per_sec", "peak_floats", "reps")
REPORT_COLUMNS = ("scheme", "throughput", "quality", "peak_floats")


@dataclass(frozen=True)
class BenchResult:
    scheme: str
    seq_len: int
    itr_per_sec: float
    analytic_peak_floats: int
    wall_seconds: float
    repetitions: int

    def row(self):
        return {"scheme": self.scheme, "seq_len": self.seq_len, "itr_per_sec": f"{self.itr_per_sec:.6g}",
                "peak_floats": self.analytic_peak_floats, "reps": self.repetitions}


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_ALLOC_KEEP = 1 << 28


def keep_freed_memory():
    """Ask glibc to recycle large freed blocks instead of unmapping them.

    Attention temporaries are megabytes each; with the default thresholds
    every iteration maps fresh pages and pays a page fault per 4 KiB, a cost
    that grows with sequence length on top of the arithmetic. Returns False
    where the C library does not provide ``mallopt``.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, _ALLOC_KEEP) and libc.mallopt(_M_TRIM_THRESHOLD, _ALLOC_KEEP))
    except (OSError, AttributeError, TypeError):
        return False


def _kind(scheme):
    return "softmax" if scheme == "softmax" else ReweightScheme.parse(scheme).kind


def analytic_memory(scheme, seq_len, d_model, heads, causal=False, leap_downsample=4, breakdown=False):
    """Live floats at the attention bottleneck of one sequence.

    Every kernel holds q, k, v and the output (4 N d_model). Quadratic
    kernels add the H N^2 score matrix. Linear kernels add their feature
    maps (2 N d_model per branch), H (d_h^2 + d_h) accumulator floats per
    branch and, for proportion schemes, N per-token proportions per side
    and head. LeaP adds its hidden activations.
    """
    if d_model % heads:
        raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
    n, dh = int(seq_len), d_model // heads
    kind = _kind(scheme)
    parts = {"qkvo": 4 * n * d_model, "scores": 0, "features": 0, "accumulators": 0, "proportions": 0,
             "leap_hidden": 0}
    dense = kind == "softmax" or (kind == "step_length" and causal)
    if dense:
        parts["scores"] = heads * n * n
    if kind != "softmax":
        branches = 2 if kind in ("cos_fixed", "cos_leap", "max_length", "stepping_max_length") or (
            kind == "step_length" and not causal) else 1
        parts["features"] = 2 * n * d_model * (branches + (1 if kind == "rope" else 0))
        if not dense:
            parts["accumulators"] = branches * heads * (dh * dh + dh)
        if branches == 2 or dense:
            parts["proportions"] = 2 * heads * n
        if kind == "cos_leap":
            parts["leap_hidden"] = 2 * heads * n * (dh // leap_downsample)
    total = sum(parts.values())
    return (total, parts) if breakdown else total


def _layer(scheme, d_model, heads, rng, leap_downsample):
    params = {k[len("a."):]: v for k, v in init_attention_params(d_model, rng, "a.").items()}
    leap = None
    if scheme != "softmax" and ReweightScheme.parse(scheme).kind == "cos_leap":
        dh = d_model // heads
        leap = LeaPPair(LeaPModule(dh, leap_downsample, rng), LeaPModule(dh, leap_downsample, rng))
    return params, leap


def measure_throughput(scheme, seq_lens, d_model=64, heads=2, reps=5, batch=1, causal=False, seed=17,
                       leap_downsample=4, clock=time.perf_counter):
    """Forward+backward iterations per second of one attention layer at each length.

    One warmup iteration is discarded; the reported rate is the reciprocal
    of the median over ``reps`` timed iterations (``wall_seconds`` is
    ``reps`` times that median).
    """
    if reps < 5:
        raise ValueError("measure_throughput needs reps >= 5")
    keep_freed_memory()
    rng = np.random.default_rng(seed)
    params, leap = _layer(scheme, d_model, heads, rng, leap_downsample)
    sch = scheme if scheme == "softmax" else ReweightScheme.parse(scheme)
    results = []
    for n in seq_lens:
        x = Tensor(rng.normal(size=(batch, int(n), d_model)), requires_grad=True)
        times = []
        for rep in range(reps + 1):
            t0 = clock()
            out = multi_head_attention(x, x, params, heads, sch, causal=causal, leap=leap)
            T.backward(T.sum(out))
            elapsed = clock() - t0
            for p in list(params.values()) + [x]:
                p.grad = None
            if leap is not None:
                for p in leap.parameters().values():
                    p.grad = None
            del out
            if rep:
                times.append(elapsed)
        med = statistics.median(times)
        label = scheme if isinstance(scheme, str) else sch.kind
        results.append(BenchResult(label, int(n), 1.0 / med, analytic_memory(sch, n, d_model, heads, causal,
                                                                               leap_downsample),
                                   reps * med, reps))
    return results


def write_bench_csv(results, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.row())


def tradeoff_report(bench, quality=None, seq_len=None):
    """Merge bench results with per-scheme quality into table rows and scatter points.

    Throughput is taken at ``seq_len`` (default: the longest measured).
    ``quality`` maps scheme to a score; its keys must equal the benched
    schemes. Without quality every point sits at y = 0.
    """
    schemes = sorted({b.scheme for b in bench})
    if quality is not None and set(quality) != set(schemes):
        raise ValueError(f"scheme sets differ: bench {schemes} vs quality {sorted(quality)}")
    rows, points = [], []
    for s in schemes:
        mine = [b for b in bench if b.scheme == s]
        n = max(b.seq_len for b in mine) if seq_len is None else seq_len
        pick = [b for b in mine if b.seq_len == n]
        if not pick:
            raise ValueError(f"scheme {s} has no result at length {n}")
        b = pick[0]
        q = None if quality is None else float(quality[s])
        rows.append({"scheme": s, "throughput": b.itr_per_sec, "quality": q, "peak_floats": b.analytic_peak_floats})
        points.append({"label": s, "x": b.itr_per_sec, "y": 0.0 if q is None else q,
                       "size": float(b.analytic_peak_floats)})
    return rows, points


def write_report_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "throughput": f"{r['throughput']:.6g}",
                        "quality": "" if r["quality"] is None else f"{r['quality']:.6g}"})
