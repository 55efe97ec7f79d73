"""Hot numeric kernels: CSR products and cyclic Jacobi rotations.

Each kernel has a numba ``@njit`` version and a pure-numpy fallback with
identical semantics. The numba path is used unless the environment
variable ``FMP_DISABLE_NUMBA`` is set to a truthy value (``1``, ``true``,
``yes``) or numba cannot be imported. The choice is made once at import.

Reductions in the CSR kernels run over each row's stored entries in index
order, so results are deterministic for a given input on either path.
"""

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("FMP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by FMP_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError as exc:  # pragma: no cover - exercised via env flag in a subprocess
    logger.debug("numba unavailable, using numpy kernels: %s", exc)
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(func):
            return func

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return wrap


BACKEND = "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# CSR matrix times dense matrix
# --------------------------------------------------------------------------


def _csr_matmat_numpy(indptr, indices, data, X):
    n = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n), np.diff(indptr))
    out = np.zeros((n, X.shape[1]), dtype=np.float64)
    np.add.at(out, rows, data[:, None] * X[indices])
    return out


@njit(cache=True)
def _csr_matmat_jit(indptr, indices, data, X):
    n = indptr.shape[0] - 1
    d = X.shape[1]
    out = np.zeros((n, d), dtype=np.float64)
    for i in range(n):
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            w = data[k]
            for c in range(d):
                out[i, c] += w * X[j, c]
    return out


def csr_matmat(indptr, indices, data, X):
    """Return ``A @ X`` for ``A`` given by CSR arrays and a 2-D float array ``X``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if HAVE_NUMBA:
        return _csr_matmat_jit(indptr, indices, data, X)
    return _csr_matmat_numpy(indptr, indices, data, X)


# --------------------------------------------------------------------------
# Cyclic Jacobi eigenvalue sweeps
# --------------------------------------------------------------------------


def _jacobi_numpy(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    thresh = tol * np.sqrt(np.sum(a * a))
    off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
    sweeps = 0
    while off > thresh and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = a[:, p].copy()
                cq = a[:, q]
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :]
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        sweeps += 1
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
    return np.diag(a).copy(), v, sweeps, off


@njit(cache=True)
def _offdiag_norm(a):
    n = a.shape[0]
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += a[i, j] * a[i, j]
    return np.sqrt(s)


@njit(cache=True)
def _jacobi_jit(a, tol, max_sweeps):
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    fro = 0.0
    for i in range(n):
        for j in range(n):
            fro += a[i, j] * a[i, j]
    thresh = tol * np.sqrt(fro)
    off = _offdiag_norm(a)
    sweeps = 0
    while off > thresh and sweeps < max_sweeps:
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                sgn = 1.0 if theta >= 0 else -1.0
                t = sgn / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
        sweeps += 1
        off = _offdiag_norm(a)
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v, sweeps, off


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi on a symmetric matrix.

    Returns ``(eigenvalues, eigenvectors, sweeps, offdiag_norm)``; eigenpairs
    are unsorted. Converged when the off-diagonal Frobenius norm drops to
    ``tol * ||a||_F``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if HAVE_NUMBA:
        return _jacobi_jit(a, float(tol), int(max_sweeps))
    return _jacobi_numpy(a, float(tol), int(max_sweeps))
