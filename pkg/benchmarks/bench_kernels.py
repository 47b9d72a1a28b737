"""Numba vs numpy timings for the hot kernels, plus one end-to-end solve per backend.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from bhjb import _kernels as K

END_TO_END = """
import time
from bhjb import hjb, presets
from bhjb.grid import SpatialGrid
prob, tree = presets.preset("bang-bang")
g = SpatialGrid.from_domain(prob.domain, (200,))
hjb.solve_hjb(prob, tree, g)
t0 = time.perf_counter()
hjb.solve_hjb(prob, tree, g)
print(time.perf_counter() - t0)
"""


def cases(rng):
    n = 400
    lower, upper = -rng.random(n), -rng.random(n)
    diag = 2.5 + rng.random(n)
    rhs = rng.normal(size=n)
    yield "thomas (n=400)", (lambda: K.thomas_numba(lower, diag, upper, rhs)), \
        (lambda: K.thomas_numpy(lower, diag, upper, rhs))

    P = 100_000
    x0 = rng.uniform(0.05, 0.95, (P, 1))
    x1 = x0 + 0.05 * rng.normal(size=(P, 1))
    lo, hi = np.zeros(1), np.ones(1)
    var = np.full((P, 1), 0.005)
    u = rng.random(P)
    yield "kill_step (100k paths)", (lambda: K.kill_step_numba(x0, x1, lo, hi, var, u, True)), \
        (lambda: K.kill_step_numpy(x0, x1, lo, hi, var, u, True))

    pts = rng.random((P, 2))
    shape = np.array([64, 64])
    h = 1.0 / (shape - 1)
    w = np.ones(P)
    yield "deposit (100k points, 64x64)", (lambda: K.deposit_numba(pts, np.zeros(2), h, shape, w)), \
        (lambda: K.deposit_numpy(pts, np.zeros(2), h, shape, w))


def end_to_end(disable):
    env = dict(os.environ, BHJB_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-solve", action="store_true")
    args = ap.parse_args()
    if K.thomas_numba is None:
        sys.exit("numba is not available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'ratio':>7s}")
    for name, fast, slow in cases(rng):
        fast()  # compile
        tf = min(timeit.repeat(fast, number=10, repeat=args.repeat)) / 10 * 1e3
        ts = min(timeit.repeat(slow, number=10, repeat=args.repeat)) / 10 * 1e3
        print(f"{name:32s} {tf:11.3f} {ts:11.3f} {ts / tf:7.2f}")
    if not args.skip_solve:
        a, b = end_to_end(False), end_to_end(True)
        print(f"{'solve_hjb bang-bang (200 pts)':32s} {a * 1e3:11.1f} {b * 1e3:11.1f} {b / a:7.2f}")


if __name__ == "__main__":
    main()
