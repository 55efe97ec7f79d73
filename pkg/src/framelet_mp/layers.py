"""Framelet message passing: the discrete residual layer, the continuous
vector field, the reference GCN layer, and the energy-sandwich and stability probes.

A layer mixes framelet channels with square matrices ``Theta``. In shared
mode there is one matrix per filter index, ``Theta_0`` for the low pass and
``Theta_r`` for the high passes ``W_(r,1..J)``, which are summed over levels
before mixing. Per-level mode gives every operator its own matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DimensionError
from .graph import LaplacianBundle, quadratic_energy, spmm
from .spectral import FrameletOperatorSet


def relu(x):
    return np.maximum(x, 0.0)


def project_psd(theta, trace_bound=None):
    """Nearest-by-construction PSD matrix with trace at most ``trace_bound``.

    Symmetrize, clip negative eigenvalues to zero, then scale down so the
    trace is ``min(tr, trace_bound)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    sym = 0.5 * (theta + theta.T)
    w, V = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    out = (V * w) @ V.T
    out = 0.5 * (out + out.T)
    tr = float(np.trace(out))
    if trace_bound is not None and tr > trace_bound:
        out *= trace_bound / tr
    return out


@dataclass
class FmpParams:
    """Mixing matrices for one FMP layer.

    ``thetas[0]`` belongs to the low pass. In shared mode ``thetas[r]`` mixes
    the level-summed high pass ``r``; in per-level mode the list follows
    :meth:`FrameletOperatorSet.keys` order.
    """

    thetas: List[np.ndarray]
    per_level: bool = False
    trace_bound: Optional[float] = None
    psd_project: bool = False

    def __post_init__(self):
        self.thetas = [np.array(t, dtype=np.float64, ndmin=2) for t in self.thetas]
        d = self.thetas[0].shape[0]
        for t in self.thetas:
            if t.shape != (d, d):
                raise DimensionError(f"every Theta must be {d}x{d}, got {t.shape}")
        if self.psd_project:
            self.project()

    @property
    def dim(self):
        return self.thetas[0].shape[0]

    def project(self):
        self.thetas = [project_psd(t, self.trace_bound) for t in self.thetas]
        return self

    def copy(self):
        return FmpParams([t.copy() for t in self.thetas], self.per_level, self.trace_bound, self.psd_project)

    @classmethod
    def zeros(cls, op_set: FrameletOperatorSet, d, per_level=False, **kw):
        count = len(op_set.channels(per_level))
        return cls([np.zeros((d, d)) for _ in range(count)], per_level=per_level, **kw)

    @classmethod
    def random_psd(cls, op_set: FrameletOperatorSet, d, trace_bound, rng, per_level=False):
        """Random PSD matrices, each with trace drawn uniformly in (0, trace_bound]."""
        thetas = []
        for _ in op_set.channels(per_level):
            G = rng.standard_normal((d, d + 1))
            T = G @ G.T
            T *= trace_bound * (1.0 - rng.random()) / np.trace(T)
            thetas.append(T)
        return cls(thetas, per_level=per_level, trace_bound=trace_bound, psd_project=True)


def _channels_for(op_set, params):
    chans = op_set.channels(params.per_level)
    if len(chans) != len(params.thetas):
        raise DimensionError(f"operator set has {len(chans)} channels, params have {len(params.thetas)} matrices")
    return chans


def _check_x(op_set, params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != op_set.n:
        raise DimensionError(f"X has {X.shape[0]} rows, operators act on {op_set.n}")
    if X.shape[1] != params.dim:
        raise DimensionError(f"X has {X.shape[1]} columns, Theta is {params.dim}x{params.dim}")
    return X


def channel_outputs(op_set: FrameletOperatorSet, params: FmpParams, X):
    """``[S_q X]`` for every channel ``q``; ``S_q`` is one operator or a level sum."""
    return [op_set.apply_channel(keys, X) for keys in _channels_for(op_set, params)]


def fmp_ode_rhs(op_set: FrameletOperatorSet, params: FmpParams, X):
    """The FMP vector field ``sum_q S_q X Theta_q`` (linear, no activation)."""
    X = _check_x(op_set, params, X)
    out = np.zeros_like(X)
    for SX, T in zip(channel_outputs(op_set, params, X), params.thetas):
        out += SX @ T
    return out


def fmp_forward(op_set: FrameletOperatorSet, params: FmpParams, X, with_activation=True):
    """One residual FMP layer ``X + sigma(sum_q S_q X Theta_q)``, sigma = ReLU or identity."""
    Z = fmp_ode_rhs(op_set, params, X)
    X = _check_x(op_set, params, X)
    return X + (relu(Z) if with_activation else Z)


def gcn_forward(bundle: LaplacianBundle, W, X):
    """Reference GCN layer ``relu(P X W)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    W = np.array(W, dtype=np.float64, ndmin=2)
    if X.shape[0] != bundle.n:
        raise DimensionError(f"X has {X.shape[0]} rows, graph has {bundle.n} nodes")
    if X.shape[1] != W.shape[0]:
        raise DimensionError(f"X has {X.shape[1]} columns, W has {W.shape[0]} rows")
    return relu(spmm(bundle.propagator, X) @ W)


def gcn_contraction(bundle: LaplacianBundle, eigenvalues=None):
    """Largest ``|eigenvalue|`` of ``P`` off the kernel of the Laplacian."""
    lam = np.asarray(eigenvalues if eigenvalues is not None else np.linalg.eigvalsh(bundle.norm_laplacian.toarray()))
    nonkernel = lam[lam > 1e-10]
    return float(np.max(np.abs(1.0 - nonkernel))) if len(nonkernel) else 0.0


# --------------------------------------------------------------------------
# Energy sandwich
# --------------------------------------------------------------------------


class BoundViolation(AssertionError):
    """A theorem inequality failed numerically."""


@dataclass
class SandwichResult:
    lower: float
    observed: float
    upper: float
    factor: float
    holds: bool

    def to_dict(self):
        return {
            "lower": self.lower,
            "observed": self.observed,
            "upper": self.upper,
            "factor": self.factor,
            "holds": self.holds,
        }


def sandwich_factor(trace_bound, K, J):
    return (trace_bound * math.sqrt(K * J + 1) + 1.0) ** 2


def energy_sandwich_check(op_set: FrameletOperatorSet, params: FmpParams, X, rel_tol=1e-9, strict=True):
    """One linear FMP step and its energy bounds ``E(X) <= E(X') <= factor * E(X)``.

    Requires exact operators and PSD-projected ``Theta`` with a trace bound.
    Raises :class:`BoundViolation` on failure when ``strict``.
    """
    if not params.psd_project or params.trace_bound is None:
        raise ValueError("theorem preconditions unmet")
    if op_set.mode != "exact":
        raise ValueError("theorem preconditions unmet: exact operators required")
    X = _check_x(op_set, params, X)
    Xn = fmp_forward(op_set, params, X, with_activation=False)
    e0 = op_set.energy(X)
    e1 = op_set.energy(Xn)
    factor = sandwich_factor(params.trace_bound, op_set.K, op_set.J)
    upper = factor * e0
    slack = rel_tol * max(e0, e1, 1e-300)
    holds = bool(e0 - slack <= e1 <= upper + slack * factor)
    res = SandwichResult(lower=e0, observed=e1, upper=upper, factor=factor, holds=holds)
    if strict and not holds:
        raise BoundViolation(f"energy sandwich violated: {res.to_dict()}")
    return res


def ode_energy_bound(trace_bound, K, J, t):
    """Growth envelope ``exp(2 M sqrt(KJ+1) t)`` for the continuous scheme."""
    return math.exp(2.0 * trace_bound * math.sqrt(K * J + 1) * t)


# --------------------------------------------------------------------------
# Stability probe
# --------------------------------------------------------------------------


@dataclass
class StabilityReport:
    c_constant: float
    c1: float
    c_r: list
    lambda_max: float
    per_layer_ratios: list
    bounds: list
    level_norms: list = field(default_factory=list)
    norm: str = "spectral"

    @property
    def holds(self):
        return all(r <= b * (1.0 + 1e-9) + 1e-12 for r, b in zip(self.per_layer_ratios, self.bounds))

    def to_dict(self):
        return {
            "cConstant": self.c_constant,
            "c1": self.c1,
            "cR": list(self.c_r),
            "lambdaMax": self.lambda_max,
            "levelNorms": list(self.level_norms),
            "perLayerRatios": list(self.per_layer_ratios),
            "bound": list(self.bounds),
            "thetaNorm": self.norm,
            "holds": self.holds,
        }


def level_operator_norms(op_set: FrameletOperatorSet):
    """Spectral norms of ``W_(0,J)`` and of each level's stacked high passes."""
    norms = [float(np.linalg.norm(op_set.dense("low"), 2))]
    for l in range(1, op_set.J + 1):
        stack = np.vstack([op_set.dense((r, l)) for r in range(1, op_set.K + 1)])
        norms.append(float(np.linalg.norm(stack, 2)))
    return norms


def stability_probe(op_set, params, X0, perturb_scale, layers, seed=0, with_activation=True):
    """Propagate ``X0`` and a perturbed copy through ``layers`` FMP layers.

    ``params`` is one :class:`FmpParams` reused at every layer or a list with
    one entry per layer. ``C_r`` is the largest spectral norm of ``Theta_r``
    over layers and ``C_1`` the largest entry of :func:`level_operator_norms`.
    """
    plist = list(params) if isinstance(params, (list, tuple)) else [params] * layers
    if len(plist) != layers:
        raise DimensionError(f"need {layers} parameter sets, got {len(plist)}")
    X0 = _check_x(op_set, plist[0], X0)
    rng = np.random.default_rng(seed)
    Y0 = X0 + perturb_scale * rng.standard_normal(X0.shape)

    nchan = len(plist[0].thetas)
    c_r = [max(float(np.linalg.norm(p.thetas[q], 2)) for p in plist) for q in range(nchan)]
    norms = level_operator_norms(op_set)
    c1 = max(norms)
    lam = float(op_set.lambda_max)
    C = 1.0 + 4.0 * c1 * math.sqrt(lam) * max(c_r)

    base = float(np.linalg.norm(X0 - Y0))
    X, Y = X0, Y0
    ratios, bounds = [], []
    for t, p in enumerate(plist, start=1):
        X = fmp_forward(op_set, p, X, with_activation)
        Y = fmp_forward(op_set, p, Y, with_activation)
        diff = float(np.linalg.norm(X - Y))
        ratios.append(diff / base if base > 0 else 0.0)
        bounds.append(C**t)
    return StabilityReport(
        c_constant=C,
        c1=c1,
        c_r=c_r,
        lambda_max=lam,
        per_layer_ratios=ratios,
        bounds=bounds,
        level_norms=norms,
    )


def dirichlet_energy_of(op_set: FrameletOperatorSet, X):
    return quadratic_energy(op_set.laplacian, X)
