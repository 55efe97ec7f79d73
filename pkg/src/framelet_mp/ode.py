"""Explicit Runge-Kutta integration: adaptive Dormand-Prince 5(4) and fixed-step RK4.

States are arrays of any shape; the error norm is the RMS over all entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import MaxStepsError, StepSizeError

# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
# 5th-order weights minus embedded 4th-order weights
_E = (
    71 / 57600,
    0.0,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

SAFETY = 0.9
FAC_MIN = 0.2
FAC_MAX = 5.0
PI_BETA = 0.04
PI_ALPHA = 0.2 - 0.75 * PI_BETA


@dataclass
class OdeConfig:
    t0: float = 0.0
    t1: float = 1.0
    rtol: float = 1e-5
    atol: float = 1e-7
    h_init: Optional[float] = None
    h_min: float = 1e-6
    max_steps: int = 10000
    method: str = "dopri5"
    h: Optional[float] = None
    steps: Optional[int] = None
    store_states: bool = False

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.method not in ("dopri5", "rk4"):
            raise ValueError(f"unknown method {self.method!r}; choose dopri5 or rk4")
        if self.method == "rk4" and self.h is None and self.steps is None:
            raise ValueError("rk4 needs a step size h or a step count")

    def rk4_steps(self):
        if self.steps is not None:
            return int(self.steps)
        return int(math.ceil((self.t1 - self.t0) / self.h - 1e-12))


@dataclass
class Trajectory:
    times: np.ndarray
    final_state: np.ndarray
    states: Optional[List[np.ndarray]] = None
    stats: dict = field(default_factory=dict)


def rk4_step(rhs, t, y, h):
    k1 = rhs(t, y)
    k2 = rhs(t + h / 2, y + (h / 2) * k1)
    k3 = rhs(t + h / 2, y + (h / 2) * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x)))) if x.size else 0.0


def _partial(times, states, y, stats):
    return Trajectory(np.array(times), y, states, dict(stats))


def integrate(rhs: Callable, X0, cfg: OdeConfig = None) -> Trajectory:
    """Integrate ``dy/dt = rhs(t, y)`` from ``cfg.t0`` to ``cfg.t1``.

    Adaptive mode uses first-same-as-last, so a run with ``a`` accepted and
    ``r`` rejected steps makes exactly ``1 + 6 (a + r)`` right-hand-side calls.
    """
    cfg = cfg or OdeConfig()
    y = np.array(X0, dtype=np.float64)
    if cfg.method == "rk4":
        return _integrate_rk4(rhs, y, cfg)
    return _integrate_dopri5(rhs, y, cfg)


def _integrate_rk4(rhs, y, cfg):
    n = cfg.rk4_steps()
    h = (cfg.t1 - cfg.t0) / n
    times = [cfg.t0]
    states = [y.copy()] if cfg.store_states else None
    for i in range(n):
        y = rk4_step(rhs, cfg.t0 + i * h, y, h)
        times.append(cfg.t1 if i == n - 1 else cfg.t0 + (i + 1) * h)
        if states is not None:
            states.append(y.copy())
    stats = {"accepted": n, "rejected": 0, "evals": 4 * n}
    return Trajectory(np.array(times), y, states, stats)


def _initial_step(cfg, y, f0):
    span = cfg.t1 - cfg.t0
    if cfg.h_init is not None:
        return min(cfg.h_init, span)
    if not np.any(f0):
        return span
    sc = cfg.atol + cfg.rtol * np.abs(y)
    d0 = _rms(y / sc)
    d1 = _rms(f0 / sc)
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return min(max(h, cfg.h_min), span)


def _integrate_dopri5(rhs, y, cfg):
    t = cfg.t0
    f = rhs(t, y)
    stats = {"accepted": 0, "rejected": 0, "evals": 1}
    h = _initial_step(cfg, y, f)
    times = [t]
    states = [y.copy()] if cfg.store_states else None
    err_prev = 1e-4
    last_rejected = False
    k = [None] * 7

    while t < cfg.t1:
        if stats["accepted"] + stats["rejected"] >= cfg.max_steps:
            raise MaxStepsError(f"exceeded {cfg.max_steps} steps at t={t:.6g}", _partial(times, states, y, stats))
        remaining = cfg.t1 - t
        final = h >= remaining * (1.0 - 1e-12)
        if final:
            h = remaining

        k[0] = f
        for s in range(1, 7):
            ys = y.copy()
            for j, a in enumerate(_A[s]):
                if a:
                    ys += (h * a) * k[j]
            k[s] = rhs(t + _C[s] * h, ys)
        # the stage-7 argument is the 5th-order solution
        y_new = ys
        stats["evals"] += 6

        errvec = np.zeros_like(y)
        for e, ks in zip(_E, k):
            if e:
                errvec += e * ks
        errvec *= h
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _rms(errvec / sc)

        if err <= 1.0:
            t = cfg.t1 if final else t + h
            y = y_new
            f = k[6]
            stats["accepted"] += 1
            times.append(t)
            if states is not None:
                states.append(y.copy())
            if err == 0.0:
                fac = FAC_MAX
            else:
                fac = SAFETY * err**-PI_ALPHA * err_prev**PI_BETA
                fac = min(FAC_MAX, max(FAC_MIN, fac))
            if last_rejected:
                fac = min(fac, 1.0)
            err_prev = max(err, 1e-4)
            last_rejected = False
            h *= fac
        else:
            stats["rejected"] += 1
            fac = max(FAC_MIN, SAFETY * err**-0.2)
            h *= fac
            last_rejected = True
            if h < cfg.h_min:
                raise StepSizeError(
                    f"step size {h:.3e} below floor {cfg.h_min:.3e} at t={t:.6g}",
                    _partial(times, states, y, stats),
                )

    return Trajectory(np.array(times), y, states, stats)


def convergence_order(rhs, X0, horizon=1.0, hs=(1 / 8, 1 / 16, 1 / 32), exact=None):
    """Fixed-step RK4 global errors at the given step sizes and the fitted order.

    ``exact`` is the true final state; by default an RK4 run at a step 64
    times finer than the smallest ``h`` stands in for it.
    """
    y0 = np.asarray(X0, dtype=np.float64)

    def run(h):
        return integrate(rhs, y0, OdeConfig(t1=horizon, method="rk4", h=h * horizon)).final_state

    ref = np.asarray(exact, dtype=np.float64) if exact is not None else run(min(hs) / 64)
    errors = [float(np.max(np.abs(run(h) - ref))) for h in hs]
    ratios = [a / b if b > 0 else float("nan") for a, b in zip(errors[:-1], errors[1:])]
    if all(e > 0 for e in errors):
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        order = float(slope)
    else:
        order = float("nan")
    return {"h": list(hs), "errors": errors, "ratios": ratios, "order": order}
