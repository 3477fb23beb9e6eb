"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from ensbench.kernels import _pure

try:
    from ensbench.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((8, 20000))
    y = rng.standard_normal(20000)
    field = rng.standard_normal((240, 400))
    state = 8.0 + rng.standard_normal((8, 40))
    return {
        "crps_values (N=8, M=2e4)": lambda m: m.crps_values(x, y, True),
        "crps_values_grad (N=8, M=2e4)": lambda m: m.crps_values_grad(x, y, True),
        "local_extrema (240x400)": lambda m: m.local_extrema(field, False, False),
        "l96_rk4 (B=8, K=40, 1000 steps)": lambda m: m.l96_rk4(state, 8.0, 0.05, 1000),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pure), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:36s} {t_py:10.2f} {'n/a':>10s} {'':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
