"""Time the compiled kernels against the NumPy fallback on cart-sized inputs.

    python3 benchmarks/bench_kernels.py [--n 20000] [--repeat 3]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from cartyield._kernels import _fallback

try:
    from cartyield._kernels import _ckernels
except ImportError:
    _ckernels = None


def inputs(n: int, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    t = np.arange(n) * 0.1
    # a cart walking a few rows: y sweeps, x steps between rows
    y = 20 * np.abs(np.sin(t / 300)) + rng.normal(0, 0.6, n)
    x = 1.22 * np.floor(t / 600) + rng.normal(0, 0.6, n)
    pts = np.column_stack([x, y, t * 0.05])
    pts = pts[np.argsort(pts[:, 0], kind="stable")]
    mass = np.cumsum(rng.uniform(0, 0.002, n)) + rng.normal(0, 0.01, n)
    return {"pts": pts, "signal": y, "mass": mass}


def cases(mod, d):
    return {
        "dbscan": lambda: mod.dbscan(d["pts"], 2.0, 10, 0),
        "running_median": lambda: mod.running_median(d["mass"], 2),
        "hampel": lambda: mod.hampel(d["signal"], 5, 3.0),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000, help="samples per input (10 Hz, so 20000 = 33 min)")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    d = inputs(args.n)
    py = cases(_fallback, d)
    cy = cases(_ckernels, d) if _ckernels is not None else {}
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<16}{'numpy s':>10}{'cython s':>10}{'speedup':>9}  same output")
    for name, fn in py.items():
        t_py = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        if name in cy:
            t_cy = min(timeit.repeat(cy[name], number=1, repeat=args.repeat))
            same = np.array_equal(fn(), cy[name]())
            print(f"{name:<16}{t_py:>10.4f}{t_cy:>10.4f}{t_py / t_cy:>8.1f}x  {same}")
        else:
            print(f"{name:<16}{t_py:>10.4f}{'n/a':>10}{'':>9}  (extension not built)")


if __name__ == "__main__":
    main()
