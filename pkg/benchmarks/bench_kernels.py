"""Compare the compiled kernels with the numpy fallback.

Times the two hot kernels directly at several state sizes, then one short
simulation per backend (the backend is chosen at import, so each simulation
runs in a fresh interpreter with ``HETFUSE_BACKEND`` set).

    python benchmarks/bench_kernels.py --repeat 200
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hetfuse import _fallback

try:
    from hetfuse import _kernels
except ImportError:
    _kernels = None

SIM_SNIPPET = """
import time
from hetfuse.kernels import BACKEND
from hetfuse.simnet import preset, monte_carlo
cfg = preset("dynamic-4x5").with_(steps={steps})
t = time.perf_counter()
monte_carlo(cfg, {runs}, seed=0, methods=["bdf", "hscf"], window="cons1", workers=1)
print(BACKEND, time.perf_counter() - t)
"""


def random_info(n, rng):
    a = rng.standard_normal((n, n))
    lam = a @ a.T + n * np.eye(n)
    return np.ascontiguousarray(lam), rng.standard_normal(n)


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'n':>5}{'keep':>6}{'python us':>12}{'compiled us':>13}{'speedup':>9}   kernel")
    for n in sizes:
        lam, zeta = random_info(n, rng)
        keep = np.arange(n // 2, dtype=np.intp)
        drop = np.arange(n // 2, n, dtype=np.intp)
        idx = np.arange(0, n, 2, dtype=np.intp)
        src = np.ascontiguousarray(lam[np.ix_(idx, idx)])
        src_z = np.ascontiguousarray(zeta[idx])
        cases = {
            "marginalize_info": lambda m: m.marginalize_info(lam, zeta, keep, drop),
            "scatter_add": lambda m: m.scatter_add(lam.copy(), zeta.copy(), src, src_z, idx, 1.0),
        }
        for name, fn in cases.items():
            t_py = timeit.timeit(lambda: fn(_fallback), number=repeat) / repeat * 1e6
            if _kernels is None:
                print(f"{n:>5}{len(keep):>6}{t_py:>12.1f}{'n/a':>13}{'':>9}   {name}")
                continue
            t_c = timeit.timeit(lambda: fn(_kernels), number=repeat) / repeat * 1e6
            print(f"{n:>5}{len(keep):>6}{t_py:>12.1f}{t_c:>13.1f}{t_py / t_c:>9.2f}   {name}")


def bench_simulation(runs, steps):
    for backend in ("python", "compiled"):
        env = dict(os.environ, HETFUSE_BACKEND=backend)
        code = SIM_SNIPPET.format(runs=runs, steps=steps)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"dynamic-4x5, {runs} runs x {steps} steps: backend={out[0]:<9} {float(out[1]):.2f} s")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--sizes", default="8,16,28,64,128")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--no-sim", action="store_true")
    args = p.parse_args()
    if _kernels is None:
        print("compiled extension not built; only the fallback is timed")
    bench_kernels([int(s) for s in args.sizes.split(",")], args.repeat)
    if not args.no_sim:
        bench_simulation(args.runs, args.steps)


if __name__ == "__main__":
    main()
