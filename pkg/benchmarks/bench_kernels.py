"""Time the numba kernels against their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py [--nodes 2000] [--dense 120] [--repeat 5]

The numba columns are blank when numba is missing or ``FMP_DISABLE_NUMBA``
is set. First calls are made before timing so JIT compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from framelet_mp import _kernels as K
from framelet_mp.graph import build_laplacian_bundle, generate_sbm


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_csr(n, width, repeat):
    g = generate_sbm(0, n=n, p_in=min(1.0, 20.0 / n), p_out=min(1.0, 2.0 / n))
    L = build_laplacian_bundle(g).norm_laplacian
    X = np.random.default_rng(0).standard_normal((n, width))
    args = (L.indptr, L.indices, L.data, X)
    out = {"numpy": best_of(lambda: K._csr_matmat_numpy(*args), repeat)}
    if K.HAVE_NUMBA:
        out["numba"] = best_of(lambda: K._csr_matmat_jit(*args), repeat)
        assert np.allclose(K._csr_matmat_jit(*args), K._csr_matmat_numpy(*args), atol=1e-12)
    return f"csr_matmat  n={n} nnz={L.nnz} d={width}", out


def bench_jacobi(n, repeat):
    A = np.random.default_rng(1).standard_normal((n, n))
    A = A + A.T
    out = {"numpy": best_of(lambda: K._jacobi_numpy(A.copy(), 1e-12, 100), max(1, repeat // 2))}
    if K.HAVE_NUMBA:
        out["numba"] = best_of(lambda: K._jacobi_jit(A.copy(), 1e-12, 100), repeat)
    return f"jacobi_eigh n={n}", out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=2000)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--dense", type=int, default=120)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"backend in use: {K.BACKEND}")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, t in (bench_csr(args.nodes, args.width, args.repeat), bench_jacobi(args.dense, args.repeat)):
        nb = t.get("numba")
        nb_ms = f"{nb * 1e3:10.2f}" if nb else " " * 10
        speed = f"{t['numpy'] / nb:7.1f}x" if nb else ""
        print(f"{label:40s} {t['numpy'] * 1e3:10.2f} {nb_ms} {speed}")


if __name__ == "__main__":
    main()
