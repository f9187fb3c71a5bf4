"""Compare the numba and pure-numpy kernels.

    python benchmarks/bench_kernels.py [--repeat N]

Times full SVDs (Jacobi sweeps) and row quantization on square matrices with
both backends, after one warm-up call each so JIT compilation is excluded.
"""
import argparse
import time

import numpy as np

from spq import kernels
from spq.quant import quantize, scale_per_channel
from spq.svd import compute_svd


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="16,32,64,128")
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba not installed; only the numpy backend is available")
    backends = {"numpy": (kernels.jacobi_sweeps_numpy, kernels.quantize_rows_numpy)}
    if kernels.HAVE_NUMBA:
        backends["numba"] = (kernels.jacobi_sweeps_numba, kernels.quantize_rows_numba)

    print(f"{'kernel':<10}{'n':>6}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    rng = np.random.default_rng(0)
    for n in (int(s) for s in args.sizes.split(",")):
        W = rng.standard_normal((n, n))
        s = scale_per_channel(W)
        rows = {
            "svd": {b: _best(lambda f=f: compute_svd(W, sweeps_fn=f), args.repeat)
                    for b, (f, _) in backends.items()},
            "quantize": {b: _best(lambda g=g: quantize(W, s, 8, quantize_fn=g), args.repeat)
                         for b, (_, g) in backends.items()},
        }
        for kernel, t in rows.items():
            speed = f"{t['numpy'] / t['numba']:>9.1f}x" if "numba" in t else ""
            print(f"{kernel:<10}{n:>6}" + "".join(f"{v * 1e3:>10.3f}ms" for v in t.values()) + speed)


if __name__ == "__main__":
    main()
