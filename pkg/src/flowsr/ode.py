"""ODE integrators on flat float64 state vectors.

``dopri5`` is an embedded Dormand-Prince 5(4) pair with PI step-size
control; it supports backward integration (t0 > t1). ``rk4`` is the
classical fixed-step method used for cross-validation and as the unroll
target for direct backpropagation.
"""

from dataclasses import dataclass

import numpy as np


class StepSizeUnderflowError(RuntimeError):
    """Adaptive step fell below 1e-12 of the integration interval."""


@dataclass
class SolveStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0


# Dormand-Prince 5(4) Butcher tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                -92097 / 339200, 187 / 2100, 1 / 40])


def dopri5(f, t0, t1, y0, atol=1e-4, rtol=1e-4, h0=None, max_steps=100_000):
    """Integrate y' = f(t, y) from t0 to t1 (either direction).

    Per-step error is controlled to atol + rtol * |y| in RMS norm.
    Returns (y_final, SolveStats).
    """
    if t0 == t1:
        return np.asarray(y0, dtype=np.float64).copy(), SolveStats()
    y = np.asarray(y0, dtype=np.float64).copy()
    span = t1 - t0
    direction = 1.0 if span > 0 else -1.0
    h = abs(span) / 100.0 if h0 is None else abs(h0)
    h_min = 1e-12 * abs(span)
    stats = SolveStats()
    t = t0
    k = [None] * 7
    k[0] = np.asarray(f(t, y), dtype=np.float64)
    stats.nfe += 1
    err_prev = 1.0
    for _ in range(max_steps):
        h = min(h, abs(t1 - t))
        if h < h_min:
            raise StepSizeUnderflowError(
                f"step size {h:.3e} underflowed at t={t:.6g} "
                f"(interval {abs(span):.3g}, accepted={stats.accepted}, "
                f"rejected={stats.rejected})"
            )
        hs = direction * h
        for i in range(1, 7):
            yi = y + hs * sum(a * k[j] for j, a in enumerate(_A[i]) if a != 0.0)
            k[i] = np.asarray(f(t + _C[i] * hs, yi), dtype=np.float64)
        stats.nfe += 6
        y5 = y + hs * sum(b * k[i] for i, b in enumerate(_B5) if b != 0.0)
        y4 = y + hs * sum(b * k[i] for i, b in enumerate(_B4) if b != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
        if err <= 1.0:
            t = t + hs
            y = y5
            k[0] = k[6]  # FSAL
            stats.accepted += 1
            if abs(t - t1) <= 1e-14 * max(abs(t0), abs(t1), 1.0):
                return y, stats
            # PI controller (orders 0.7/5 and 0.4/5)
            factor = 0.9 * (err + 1e-16) ** (-0.7 / 5) * (err_prev + 1e-16) ** (0.4 / 5)
            err_prev = err
        else:
            stats.rejected += 1
            factor = max(0.2, 0.9 * (err + 1e-16) ** (-1.0 / 5))
        h *= min(5.0, max(0.2, factor))
    raise StepSizeUnderflowError(f"dopri5 exceeded {max_steps} steps")


def rk4(f, t0, t1, y0, steps):
    """Classical fixed-step RK4 from t0 to t1 (either direction)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    y = np.asarray(y0, dtype=np.float64).copy()
    h = (t1 - t0) / steps
    stats = SolveStats(accepted=steps)
    for i in range(steps):
        t = t0 + i * h
        k1 = np.asarray(f(t, y))
        k2 = np.asarray(f(t + h / 2, y + (h / 2) * k1))
        k3 = np.asarray(f(t + h / 2, y + (h / 2) * k2))
        k4 = np.asarray(f(t + h, y + h * k3))
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        stats.nfe += 4
    return y, stats
