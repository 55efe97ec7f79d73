"""Dense eigendecomposition, framelet filter banks and exact framelet operators.

Operator convention: with scaled eigenvalues ``lt = lam / 2**R``, the low
pass is ``U alpha(lt/2) U^T`` and the high pass ``(r, l)`` is
``U beta_r(lt/2**l) U^T`` for ``l = 1..J``. Refinement makes the squared
responses telescope to ``alpha(lt/2**(J+1))**2``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._kernels import jacobi_eigh
from .errors import ConvergenceError, DimensionError
from .graph import LaplacianBundle, quadratic_energy

logger = logging.getLogger(__name__)

CONVENTION = {"lowpass": "alpha(lam_scaled / 2)", "highpass": "beta_r(lam_scaled / 2**l), l = 1..J"}


# --------------------------------------------------------------------------
# Eigendecomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self):
        return self.eigenvalues.shape[0]

    @property
    def lambda_max(self):
        return float(self.eigenvalues[-1])

    def matrix(self, response=None):
        """``U diag(response) U^T``; the reconstructed matrix when ``response`` is None."""
        vals = self.eigenvalues if response is None else np.asarray(response, dtype=np.float64)
        U = self.eigenvectors
        return (U * vals) @ U.T


def eig_symmetric(M, tol=1e-12, max_sweeps=100) -> SpectralDecomposition:
    """Eigenpairs of a dense symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back ascending. Each eigenvector is sign-normalized so
    its largest-magnitude entry is positive.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] == 0:
        raise DimensionError("need a non-empty square matrix")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    M = 0.5 * (M + M.T)
    w, V, sweeps, off = jacobi_eigh(M, tol=tol, max_sweeps=max_sweeps)
    if off > tol * max(np.linalg.norm(M), np.finfo(float).tiny):
        resid = float(np.abs(M @ V - V * w).max())
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", residual=resid)
    order = np.argsort(w, kind="stable")
    w = w[order]
    V = V[:, order]
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    V = V * signs
    logger.debug("jacobi: n=%d sweeps=%d off=%.2e", M.shape[0], sweeps, off)
    w.setflags(write=False)
    V.setflags(write=False)
    return SpectralDecomposition(w, V)


def laplacian_decomposition(bundle: LaplacianBundle) -> SpectralDecomposition:
    return eig_symmetric(bundle.norm_laplacian.toarray())


# --------------------------------------------------------------------------
# Filter banks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterBank:
    """Scaling functions ``alpha, beta_1..beta_K`` and filters ``a, b_1..b_K``.

    ``domain_ceiling`` bounds the dilated spectrum; ``filter_domain`` is the
    half-width on which the filter partition of unity is guaranteed.
    """

    name: str
    K: int
    domain_ceiling: float
    flat_radius: float
    filter_domain: float
    alpha: Callable[[np.ndarray], np.ndarray]
    betas: Sequence[Callable[[np.ndarray], np.ndarray]]
    a: Callable[[np.ndarray], np.ndarray]
    bs: Sequence[Callable[[np.ndarray], np.ndarray]]

    def filter_names(self):
        return ["a"] + [f"b{r}" for r in range(1, self.K + 1)]

    def filter(self, name):
        if name == "a":
            return self.a
        return self.bs[int(name[1:]) - 1]


def _sinc_half(xi):
    """sin(xi/2)/(xi/2) with the removable singularity at 0 filled in."""
    xi = np.asarray(xi, dtype=np.float64)
    return np.sinc(xi / (2.0 * np.pi))


def haar_bank() -> FilterBank:
    """Haar-type bank: a = cos(xi/2), b = sin(xi/2), alpha = sinc-type.

    The high-pass scaling function is derived from refinement,
    beta(xi) = b(xi/2) alpha(xi/2) = sin(xi/4)^2 / (xi/4).
    """

    def a(xi):
        return np.cos(np.asarray(xi, dtype=np.float64) / 2.0)

    def b(xi):
        return np.sin(np.asarray(xi, dtype=np.float64) / 2.0)

    def alpha(xi):
        return _sinc_half(xi)

    def beta(xi):
        xi = np.asarray(xi, dtype=np.float64)
        return b(xi / 2.0) * alpha(xi / 2.0)

    return FilterBank(
        name="haar",
        K=1,
        domain_ceiling=math.pi,
        flat_radius=0.0,
        filter_domain=math.pi,
        alpha=alpha,
        betas=(beta,),
        a=a,
        bs=(b,),
    )


def nu_poly(t):
    t = np.asarray(t, dtype=np.float64)
    return t**4 * (35.0 - 84.0 * t + 70.0 * t**2 - 20.0 * t**3)


def _fold(xi):
    """Map to |xi| on the fundamental period [-1/2, 1/2) of a 1-periodic filter."""
    xi = np.asarray(xi, dtype=np.float64)
    return np.abs(xi - np.floor(xi + 0.5))


def nu_bank() -> FilterBank:
    """Two-high-pass bank built on the transition polynomial ``nu``."""
    h = 0.5 * np.pi

    def a(xi):
        x = _fold(xi)
        mid = np.cos(h * nu_poly(8 * x - 1))
        return np.where(x < 0.125, 1.0, np.where(x <= 0.25, mid, 0.0))

    def b1(xi):
        x = _fold(xi)
        lo = np.sin(h * nu_poly(8 * x - 1))
        hi = np.cos(h * nu_poly(4 * x - 1))
        return np.where(x < 0.125, 0.0, np.where(x <= 0.25, lo, hi))

    def b2(xi):
        x = _fold(xi)
        return np.where(x < 0.25, 0.0, np.sin(h * nu_poly(4 * x - 1)))

    def alpha(xi):
        x = np.abs(np.asarray(xi, dtype=np.float64))
        mid = np.cos(h * nu_poly(4 * x - 1))
        return np.where(x < 0.25, 1.0, np.where(x <= 0.5, mid, 0.0))

    def beta1(xi):
        x = np.abs(np.asarray(xi, dtype=np.float64))
        lo = np.sin(h * nu_poly(4 * x - 1))
        hi = np.cos(h * nu_poly(2 * x - 1)) ** 2
        return np.where(x < 0.25, 0.0, np.where(x < 0.5, lo, np.where(x <= 1.0, hi, 0.0)))

    def beta2(xi):
        x = np.abs(np.asarray(xi, dtype=np.float64))
        t = h * nu_poly(2 * x - 1)
        return np.where((x >= 0.5) & (x <= 1.0), np.cos(t) * np.sin(t), 0.0)

    return FilterBank(
        name="nu",
        K=2,
        domain_ceiling=1.0,
        flat_radius=0.25,
        filter_domain=0.5,
        alpha=alpha,
        betas=(beta1, beta2),
        a=a,
        bs=(b1, b2),
    )


BANKS = {"haar": haar_bank, "nu": nu_bank}


def get_bank(name) -> FilterBank:
    try:
        return BANKS[name]()
    except KeyError:
        raise ValueError(f"unknown filter bank {name!r}; choose from {sorted(BANKS)}") from None


def dilation_scale(lam_max, ceiling):
    """Smallest integer R with ``lam_max / 2**R <= ceiling`` (0 for a null spectrum)."""
    if lam_max <= 0:
        return 0
    R = math.ceil(math.log2(lam_max / ceiling))
    while lam_max / 2.0**R > ceiling:
        R += 1
    while lam_max / 2.0 ** (R - 1) <= ceiling:
        R -= 1
    return R


def level_responses(bank: FilterBank, lam_scaled, J):
    """Per-operator spectral responses keyed like :meth:`FrameletOperatorSet.keys`."""
    lt = np.asarray(lam_scaled, dtype=np.float64)
    out = {(0, J): bank.alpha(lt / 2.0)}
    for r in range(1, bank.K + 1):
        for l in range(1, J + 1):
            out[(r, l)] = bank.betas[r - 1](lt / 2.0**l)
    return out


# --------------------------------------------------------------------------
# Operator sets
# --------------------------------------------------------------------------


@dataclass
class FrameletOperatorSet:
    """Low pass ``(0, J)`` plus high passes ``(r, l)``, exact or Chebyshev.

    Every operator is symmetric, so adjoints are the operators themselves.
    """

    J: int
    R: int
    bank: FilterBank
    mode: str
    operators: dict
    laplacian: object
    lambda_max: float
    degree: Optional[int] = None
    decomposition: Optional[SpectralDecomposition] = None
    responses: Optional[dict] = None
    _combined: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.laplacian.shape[0]

    @property
    def K(self):
        return self.bank.K

    def keys(self):
        return [(0, self.J)] + [(r, l) for r in range(1, self.K + 1) for l in range(1, self.J + 1)]

    def _key(self, which):
        if which in ("low", "lowpass", 0):
            return (0, self.J)
        key = tuple(int(v) for v in which)
        if key not in self.operators:
            raise KeyError(f"no framelet operator {which!r}; have {self.keys()}")
        return key

    def apply(self, which, X):
        key = self._key(which)
        X = np.asarray(X, dtype=np.float64)
        if X.shape[0] != self.n:
            raise DimensionError(f"X has {X.shape[0]} rows, operators act on {self.n}")
        op = self.operators[key]
        return op @ X if self.mode == "exact" else op.apply(X)

    def dense(self, which):
        op = self.operators[self._key(which)]
        return op if self.mode == "exact" else op.to_dense()

    def channels(self, per_level=False):
        """Operator groups sharing one mixing matrix.

        Shared mode: ``[low, sum_l W_(1,l), ..., sum_l W_(K,l)]``.
        Per-level mode: every operator on its own, in :meth:`keys` order.
        """
        if per_level:
            return [[k] for k in self.keys()]
        return [[(0, self.J)]] + [[(r, l) for l in range(1, self.J + 1)] for r in range(1, self.K + 1)]

    def apply_channel(self, keys, X):
        if self.mode == "exact" and len(keys) > 1:
            tag = tuple(keys)
            if tag not in self._combined:
                self._combined[tag] = sum(self.operators[k] for k in keys)
            return self._combined[tag] @ X
        out = self.apply(keys[0], X)
        for k in keys[1:]:
            out = out + self.apply(k, X)
        return out

    def energy(self, X):
        return quadratic_energy(self.laplacian, X)


def build_exact_operators(dec: SpectralDecomposition, bank: FilterBank, J: int, laplacian=None, R=None):
    """Dense framelet operators from a Laplacian eigendecomposition."""
    if J < 1:
        raise ValueError("J must be >= 1")
    lam = np.clip(dec.eigenvalues, 0.0, None)
    if R is None:
        R = dilation_scale(float(lam[-1]), bank.domain_ceiling)
    lt = lam / 2.0**R
    resp = level_responses(bank, lt, J)
    highs = [np.max(np.abs(v)) for k, v in resp.items() if k[0] > 0]
    if len(lam) > 1 and max(highs) < 1e-14:
        warnings.warn("all high-pass responses vanish on this spectrum", RuntimeWarning, stacklevel=2)
    ops = {k: dec.matrix(v) for k, v in resp.items()}
    if laplacian is None:
        laplacian = dec.matrix()
    return FrameletOperatorSet(
        J=J,
        R=R,
        bank=bank,
        mode="exact",
        operators=ops,
        laplacian=laplacian,
        lambda_max=float(lam[-1]),
        decomposition=dec,
        responses=resp,
    )


def exact_operators_for(bundle: LaplacianBundle, bank: FilterBank, J: int):
    dec = laplacian_decomposition(bundle)
    return build_exact_operators(dec, bank, J, laplacian=bundle.norm_laplacian)


def apply(op_set: FrameletOperatorSet, which, X):
    """Apply one framelet operator (``"low"`` or ``(r, l)``) to ``X``."""
    return op_set.apply(which, X)


# --------------------------------------------------------------------------
# Tightness diagnostics
# --------------------------------------------------------------------------


@dataclass
class TightnessReport:
    bank: str
    J: int
    R: int
    frame_lower: float
    frame_upper: float
    reconstruction_error: float
    per_level_norms: list
    deficit_bound: float
    parseval_residual: float

    def to_dict(self):
        return {
            "bank": self.bank,
            "J": self.J,
            "R": self.R,
            "A": self.frame_lower,
            "B": self.frame_upper,
            "reconstructionError": self.reconstruction_error,
            "deficitBound": self.deficit_bound,
            "parsevalResidual": self.parseval_residual,
            "perLevelNorms": list(self.per_level_norms),
            "convention": dict(CONVENTION),
        }


def frame_response(op_set: FrameletOperatorSet):
    """s(lambda) = sum of squared responses of every operator, per eigenvalue."""
    return sum(v**2 for v in op_set.responses.values())


def tightness_report(op_set: FrameletOperatorSet, probes=16, seed=0) -> TightnessReport:
    if op_set.mode != "exact":
        raise ValueError("report requires exact operators")
    s = frame_response(op_set)
    n = op_set.n
    gram = sum(W.T @ W for W in op_set.operators.values())
    recon = float(np.linalg.norm(gram - np.eye(n)))
    norms = []
    for l in range(1, op_set.J + 1):
        stack = np.vstack([op_set.operators[(r, l)] for r in range(1, op_set.K + 1)])
        norms.append(float(np.linalg.norm(stack, 2)))
    lt = np.clip(op_set.decomposition.eigenvalues, 0.0, None) / 2.0**op_set.R
    deficit = float(np.max(1.0 - op_set.bank.alpha(lt / 2.0 ** (op_set.J + 1)) ** 2))
    rng = np.random.default_rng(seed)
    resid = 0.0
    for _ in range(probes):
        f = rng.standard_normal(n)
        f /= np.linalg.norm(f)
        coef = sum(float(np.sum((W @ f) ** 2)) for W in op_set.operators.values())
        resid = max(resid, abs(1.0 - coef))
    return TightnessReport(
        bank=op_set.bank.name,
        J=op_set.J,
        R=op_set.R,
        frame_lower=float(s.min()),
        frame_upper=float(s.max()),
        reconstruction_error=recon,
        per_level_norms=norms,
        deficit_bound=max(deficit, 0.0),
        parseval_residual=resid,
    )

