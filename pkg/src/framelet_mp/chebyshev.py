"""Chebyshev approximation of framelet filters and matrix-free operators.

Scaling functions are never fitted directly. Each framelet operator is a
product of fitted filter polynomials, following the refinement relation
``alpha(2x) = a(x) alpha(x)``, ``beta_r(2x) = b_r(x) alpha(x)``:

    alpha(lt/2**l)  ~  prod_{j=l+1}^{n0} a(lt/2**j)
    beta_r(lt/2**l) ~  b_r(lt/2**(l+1)) * prod_{j=l+2}^{n0} a(lt/2**j)

where ``n0`` is the depth at which ``alpha`` is (numerically) 1 on the
whole dilated spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from .graph import LaplacianBundle, bfs_distances, spmm
from .spectral import FilterBank, FrameletOperatorSet, dilation_scale

HAAR_TRUNCATION = 1e-6
_DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class ChebyshevFilter:
    """Chebyshev series ``sum_k c_k T_k(y)`` on ``interval`` mapped to ``y in [-1, 1]``."""

    coefficients: np.ndarray
    interval: Tuple[float, float]
    source: str
    max_error: float

    @property
    def degree(self):
        return len(self.coefficients) - 1

    @property
    def effective_degree(self):
        nz = np.flatnonzero(self.coefficients)
        return int(nz[-1]) if len(nz) else 0

    def _map(self, xi):
        lo, hi = self.interval
        return (2.0 * np.asarray(xi, dtype=np.float64) - (lo + hi)) / (hi - lo)

    def __call__(self, xi):
        return npcheb.chebval(self._map(xi), self.coefficients)


def fit_chebyshev(f: Callable, domain, m: int, source="") -> ChebyshevFilter:
    """Degree-``m`` Chebyshev interpolant of ``f`` at the m+1 Gauss nodes.

    ``domain`` is ``xi_max`` or an interval ``(lo, hi)``. The sup-norm error
    against ``f`` on a 2048-point grid is stored on the result.
    """
    if m < 1:
        raise ValueError("degree must be >= 1")
    lo, hi = (0.0, float(domain)) if np.isscalar(domain) else map(float, domain)
    if not hi > lo:
        raise ValueError("empty fit domain")
    k = np.arange(m + 1)
    theta = np.pi * (k + 0.5) / (m + 1)
    y = np.cos(theta)
    vals = np.asarray(f(0.5 * (hi - lo) * y + 0.5 * (hi + lo)), dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite filter sample")
    coef = (2.0 / (m + 1)) * np.cos(np.outer(k, theta)) @ vals
    coef[0] *= 0.5
    grid = np.linspace(lo, hi, 2048)
    yg = (2.0 * grid - (lo + hi)) / (hi - lo)
    err = float(np.max(np.abs(npcheb.chebval(yg, coef) - f(grid))))
    coef.setflags(write=False)
    return ChebyshevFilter(coef, (lo, hi), source, err)


def apply_poly(p: ChebyshevFilter, L, scale_exp: int, X, spectrum_bound=2.0):
    """Evaluate ``p(2**scale_exp * L) @ X`` by the Clenshaw recurrence.

    ``L`` is symmetric with spectrum in ``[0, spectrum_bound]``; the scaled
    spectrum must sit inside the fit interval.
    """
    lo, hi = p.interval
    top = 2.0**scale_exp * spectrum_bound
    if lo > 0.0 or top > hi * (1.0 + _DOMAIN_SLACK):
        raise ValueError(f"spectrum outside fit domain: [0, {top:.6g}] not in [{lo:.6g}, {hi:.6g}]")
    X = np.asarray(X, dtype=np.float64)
    vec = X.ndim == 1
    if vec:
        X = X[:, None]
    scale = 2.0 ** (scale_exp + 1) / (hi - lo)
    shift = (hi + lo) / (hi - lo)

    def ymul(V):
        return scale * spmm(L, V) - shift * V

    c = p.coefficients
    m = p.effective_degree
    if m == 0:
        out = c[0] * X
    else:
        b1 = c[m] * X
        b2 = np.zeros_like(X)
        for k in range(m - 1, 0, -1):
            b1, b2 = c[k] * X + 2.0 * ymul(b1) - b2, b1
        out = c[0] * X + ymul(b1) - b2
    return out[:, 0] if vec else out


@dataclass
class PolynomialOperator:
    """Ordered product of Chebyshev factors, each applied to ``2**scale_exp * L``."""

    factors: List[Tuple[ChebyshevFilter, int]]
    laplacian: object
    R: int
    spectrum_bound: float

    def apply(self, X):
        out = np.asarray(X, dtype=np.float64)
        for filt, s in self.factors:
            out = apply_poly(filt, self.laplacian, s, out, self.spectrum_bound)
        return out

    def to_dense(self):
        return self.apply(np.eye(self.laplacian.shape[0]))

    @property
    def hops(self):
        return sum(f.effective_degree for f, _ in self.factors)

    def response(self, lam):
        """Scalar response on raw Laplacian eigenvalues ``lam``."""
        out = np.ones_like(np.asarray(lam, dtype=np.float64))
        for f, s in self.factors:
            out = out * f(2.0**s * np.asarray(lam))
        return out


def chain_depth(bank: FilterBank, lt_max):
    """Depth ``n0`` beyond which ``alpha(lt/2**n0)`` is treated as exactly 1."""
    n0 = 1
    if bank.flat_radius > 0:
        while lt_max / 2.0**n0 > bank.flat_radius:
            n0 += 1
    else:
        while 1.0 - float(bank.alpha(lt_max / 2.0**n0)) ** 2 > HAAR_TRUNCATION:
            n0 += 1
    return n0


def build_approx_operators(bundle: LaplacianBundle, bank: FilterBank, J: int, m: int, lam_max=None):
    """Chebyshev framelet operators of degree ``m`` per filter factor.

    ``lam_max`` defaults to the bundle's power-iteration bound; pass the exact
    top eigenvalue to line the dilation up with an exact operator set.
    """
    if m < 1:
        raise ValueError("degree must be >= 1")
    if J < 1:
        raise ValueError("J must be >= 1")
    lam = float(bundle.lambda_max_estimate if lam_max is None else lam_max)
    D = bank.domain_ceiling
    R = dilation_scale(lam, D)
    lt_max = lam / 2.0**R
    n0 = chain_depth(bank, lt_max)
    L = bundle.norm_laplacian
    fits = {}

    def factor(name, j):
        if (name, j) not in fits:
            fits[(name, j)] = fit_chebyshev(bank.filter(name), D / 2.0**j, m, source=f"{name}@{j}")
        return fits[(name, j)], -(R + j)

    def lowchain(start):
        return [factor("a", j) for j in range(start, n0 + 1)]

    ops = {(0, J): PolynomialOperator(lowchain(2), L, R, lam)}
    for r in range(1, bank.K + 1):
        for l in range(1, J + 1):
            ops[(r, l)] = PolynomialOperator([factor(f"b{r}", l + 1)] + lowchain(l + 2), L, R, lam)
    return FrameletOperatorSet(
        J=J,
        R=R,
        bank=bank,
        mode="chebyshev",
        operators=ops,
        laplacian=L,
        lambda_max=lam,
        degree=m,
    )


def hop_reach(op_set: FrameletOperatorSet, node: int, graph=None) -> int:
    """Graph-distance radius of the influence of ``node`` under the widest operator.

    Propagates the sparsity pattern of ``L`` one hop per polynomial degree
    through every factor, so floating-point underflow cannot hide reach.
    """
    if op_set.mode != "chebyshev":
        raise ValueError("hop_reach requires Chebyshev operators")
    L = op_set.laplacian
    widest = max(op_set.operators.values(), key=lambda op: op.hops)
    support = np.zeros(op_set.n, dtype=bool)
    support[node] = True
    pattern = L.copy()
    pattern.data = np.ones_like(pattern.data)
    for _ in range(widest.hops):
        grown = support | (spmm(pattern, support.astype(np.float64)) > 0)
        if np.array_equal(grown, support):
            break
        support = grown
    dist = bfs_distances(L if graph is None else graph, node)
    return int(dist[support].max())

