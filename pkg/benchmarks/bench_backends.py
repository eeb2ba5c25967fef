"""Compare the numba and numpy causal prefix kernels (forward + backward).

    python3 benchmarks/bench_backends.py --seq-lens 256,1024,4096 --reps 5
"""
import argparse
import statistics
import time

import numpy as np

from propattn import kernels
from propattn._jit import HAS_NUMBA


def time_backend(use_numba, a, b, v, g, reps):
    kernels.prefix_backward(a, b, v, g, use_numba=use_numba)  # warmup / compile
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        out = kernels.prefix_forward(a, b, v, use_numba=use_numba)
        kernels.prefix_backward(a, b, v, g, use_numba=use_numba)
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seq-lens", default="256,1024,4096")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=17)
    args = p.parse_args(argv)
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(args.seed)
    print(f"{'N':>6} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'rel diff':>11}")
    for n in (int(x) for x in args.seq_lens.split(",")):
        a, b = rng.random((args.heads, n, args.d)), rng.random((args.heads, n, args.d))
        v, g = rng.normal(size=(args.heads, n, args.d)), rng.normal(size=(args.heads, n, args.d))
        t_nb, o_nb = time_backend(True, a, b, v, g, args.reps)
        t_np, o_np = time_backend(False, a, b, v, g, args.reps)
        diff = float(np.abs(o_nb - o_np).max() / np.abs(o_np).max())
        print(f"{n:>6} {1e3 * t_nb:>10.2f} {1e3 * t_np:>10.2f} {t_np / t_nb:>8.2f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
