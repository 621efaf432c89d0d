"""Time the numba kernels against their numpy fallbacks.

Both backends live in faith.kernels side by side, so one process can
compare them regardless of FAITH_KERNELS.  Run:

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from faith import kernels
from faith.data import gen_planted_motif


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def scatter_case(rng, nodes, degree, width):
    e = nodes * degree
    src = rng.integers(0, nodes, e)
    dst = rng.integers(0, nodes, e)
    return rng.normal(size=(nodes, width)), src, dst, nodes


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        print("numba unavailable (or FAITH_KERNELS=numpy); nothing to compare")
        return

    rng = np.random.default_rng(0)
    rows = []
    for nodes in (300, 3000):
        case = scatter_case(rng, nodes, 4, 128)
        a = kernels.scatter_add_rows_numpy(*case)
        b = kernels.scatter_add_rows_numba(*case)  # also compiles
        assert np.array_equal(a, b)
        rows.append((f"scatter_add_rows n={nodes} d=128",
                     best_of(lambda: kernels.scatter_add_rows_numpy(*case), args.repeat),
                     best_of(lambda: kernels.scatter_add_rows_numba(*case), args.repeat)))

    graphs = gen_planted_motif(6, 20, seed=0).graphs
    for g in graphs:
        assert kernels.count_triangles_numpy(g.num_nodes, g.edges) == \
            kernels.count_triangles_numba(g.num_nodes, g.edges)

    def tri(fn):
        return lambda: [fn(g.num_nodes, g.edges) for g in graphs]

    rows.append((f"count_triangles x{len(graphs)} graphs",
                 best_of(tri(kernels.count_triangles_numpy), args.repeat),
                 best_of(tri(kernels.count_triangles_numba), args.repeat)))

    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, t_np, t_nb in rows:
        print(f"{name:36s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
