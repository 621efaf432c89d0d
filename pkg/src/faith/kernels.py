"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``FAITH_KERNELS``:
``numba`` (default when numba imports cleanly) or ``numpy``.  Both paths
return bit-identical results for the integer kernels and results equal up
to summation order for the float scatter.
"""

import os

import numpy as np

_requested = os.environ.get("FAITH_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"FAITH_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested != "numba":
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path

def scatter_add_rows_numpy(values, src, dst, n_out):
    """out[dst[e]] += values[src[e]] for every edge e; out has n_out rows."""
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    np.add.at(out, dst, values[src])
    return out


def count_triangles_numpy(n, edges):
    # every i<j<k triple checked at once via a strictly-upper adjacency
    u = np.zeros((n, n), dtype=np.int64)
    if len(edges):
        e = np.asarray(edges, dtype=np.int64)
        lo = np.minimum(e[:, 0], e[:, 1])
        hi = np.maximum(e[:, 0], e[:, 1])
        u[lo, hi] = 1
    return int(np.einsum("ij,jk,ik->", u, u, u))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_jit(values, src, dst, n_out):
        out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
        d = values.shape[1]
        # sequential in edge order so the sum order matches np.add.at
        for e in range(src.shape[0]):
            s = src[e]
            t = dst[e]
            for c in range(d):
                out[t, c] += values[s, c]
        return out

    @njit(cache=True)
    def _count_triangles_jit(n, lo, hi):
        adj = np.zeros((n, n), dtype=np.bool_)
        for e in range(lo.shape[0]):
            adj[lo[e], hi[e]] = True
            adj[hi[e], lo[e]] = True
        count = 0
        for i in range(n):
            for j in range(i + 1, n):
                if not adj[i, j]:
                    continue
                for k in range(j + 1, n):
                    if adj[i, k] and adj[j, k]:
                        count += 1
        return count

    def scatter_add_rows_numba(values, src, dst, n_out):
        return _scatter_add_rows_jit(
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(src, dtype=np.int64),
            np.ascontiguousarray(dst, dtype=np.int64),
            int(n_out),
        )

    def count_triangles_numba(n, edges):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        lo = np.ascontiguousarray(np.minimum(e[:, 0], e[:, 1]))
        hi = np.ascontiguousarray(np.maximum(e[:, 0], e[:, 1]))
        return int(_count_triangles_jit(int(n), lo, hi))

    scatter_add_rows = scatter_add_rows_numba
    count_triangles = count_triangles_numba
else:
    scatter_add_rows = scatter_add_rows_numpy
    count_triangles = count_triangles_numpy

