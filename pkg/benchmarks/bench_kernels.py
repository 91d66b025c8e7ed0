"""Compiled vs numpy quasi-diagonal kernels on the 784-400-400-10 layout.

    python benchmarks/bench_kernels.py [--repeat 20]

Reports the median wall time per call of each kernel and one full QDOP
preconditioner step (factor + apply + noise), plus the maximum difference
between the two backends' outputs.
"""
import argparse
import statistics
import time

import numpy as np

from natlangevin import kernels
from natlangevin.params import BlockLayout


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--layers", default="784,400,400,10")
    args = parser.parse_args(argv)

    layout = BlockLayout.dense_layers([int(s) for s in args.layers.split(",")])
    rng = np.random.default_rng(0)
    diag = rng.uniform(0.5, 2.0, layout.dim)
    row0 = rng.uniform(-0.3, 0.3, layout.dim)
    row0[layout.offsets_array] = diag[layout.offsets_array]
    g, z, u = rng.standard_normal((3, layout.dim))
    adiag = np.empty(layout.dim)
    arow = np.empty(layout.dim)
    out = np.empty(layout.dim)

    print(f"layout {args.layers}: dim {layout.dim}, {layout.n_blocks} blocks; default backend {kernels.BACKEND}")
    results = {}
    for name in kernels.available_backends():
        be = kernels.get_backend(name)
        d, r = diag.copy(), row0.copy()

        def step():
            be.qd_factor(diag, row0, 1e-4, 1e-4, layout, adiag, arow)
            be.qd_apply(adiag, arow, g, layout, out)
            be.qd_lower(adiag, arow, z, layout, out)

        timings = {
            "factor": median_time(lambda: be.qd_factor(diag, row0, 1e-4, 1e-4, layout, adiag, arow), args.repeat),
            "apply": median_time(lambda: be.qd_apply(adiag, arow, g, layout, out), args.repeat),
            "noise": median_time(lambda: be.qd_lower(adiag, arow, z, layout, out), args.repeat),
            "rank_one": median_time(lambda: be.qd_rank_one(d, r, u, 1e-3, layout), args.repeat),
            "step": median_time(step, args.repeat),
        }
        be.qd_factor(diag, row0, 1e-4, 1e-4, layout, adiag, arow)
        results[name] = (timings, adiag.copy(), arow.copy(), be.qd_apply(adiag, arow, g, layout).copy())

    names = list(results)
    print(f"{'kernel':<10}" + "".join(f"{n + ' (ms)':>16}" for n in names) + ("   speedup" if len(names) == 2 else ""))
    for key in results[names[0]][0]:
        row = [results[n][0][key] * 1e3 for n in names]
        line = f"{key:<10}" + "".join(f"{v:>16.3f}" for v in row)
        if len(names) == 2:
            line += f"{row[0] / row[1]:>9.1f}x"
        print(line)
    if len(names) == 2:
        diff = max(np.max(np.abs(a - b)) for a, b in zip(results[names[0]][1:], results[names[1]][1:]))
        print(f"max |numpy - cython| over factor and apply outputs: {diff:.2e}")


if __name__ == "__main__":
    main()
