"""Integrator tests against analytic solutions."""

import numpy as np
import pytest

from flowsr import ode


def test_exponential_decay():
    y, stats = ode.dopri5(lambda t, y: -y, 0.0, 1.0, np.array([1.0]),
                          atol=1e-8, rtol=1e-8)
    assert abs(y[0] - np.exp(-1.0)) < 1e-6
    assert stats.nfe == 1 + 6 * (stats.accepted + stats.rejected)


def test_zero_dynamics():
    y0 = np.array([1.5, -2.0])
    y, _ = ode.dopri5(lambda t, y: np.zeros_like(y), 0.0, 3.0, y0)
    assert np.array_equal(y, y0)


def test_harmonic_oscillator_period():
    def f(t, y):
        return np.array([y[1], -y[0]])

    y0 = np.array([1.0, 0.0])
    y, _ = ode.dopri5(f, 0.0, 2 * np.pi, y0, atol=1e-8, rtol=1e-8)
    assert np.abs(y - y0).max() < 1e-4


def test_backward_integration():
    # y' = y solved from t=1 back to 0 starting at e gives 1
    y, _ = ode.dopri5(lambda t, y: y, 1.0, 0.0, np.array([np.e]),
                      atol=1e-9, rtol=1e-9)
    assert abs(y[0] - 1.0) < 1e-6


def test_zero_length_interval():
    y0 = np.array([2.0])
    y, stats = ode.dopri5(lambda t, y: y, 1.0, 1.0, y0)
    assert np.array_equal(y, y0)
    assert stats.nfe == 0


def test_step_size_underflow():
    # dynamics blow up at t=0.5; the controller must give up, not hang
    def f(t, y):
        return y / (0.5 - t)

    with pytest.raises(ode.StepSizeUnderflowError):
        ode.dopri5(f, 0.0, 1.0, np.array([1.0]), atol=1e-10, rtol=1e-10,
                   max_steps=100_000)


def test_tolerance_tightening_improves_accuracy():
    exact = np.exp(-1.0)
    errs = []
    for tol in (1e-4, 1e-6, 1e-8):
        y, _ = ode.dopri5(lambda t, y: -y, 0.0, 1.0, np.array([1.0]),
                          atol=tol, rtol=tol)
        errs.append(abs(y[0] - exact))
    assert errs[0] >= errs[1] >= errs[2]


def test_rk4_exponential():
    y, stats = ode.rk4(lambda t, y: -y, 0.0, 1.0, np.array([1.0]), 100)
    assert abs(y[0] - np.exp(-1.0)) < 1e-8
    assert stats.nfe == 400


def test_rk4_convergence_order_analytic():
    # nonlinear scalar ODE y' = -y^2 + sin(t), reference at 8000 steps
    def f(t, y):
        return -y * y + np.sin(t)

    ref, _ = ode.rk4(f, 0.0, 2.0, np.array([0.5]), 8000)
    errs = []
    grid = [25, 50, 100]
    for s in grid:
        y, _ = ode.rk4(f, 0.0, 2.0, np.array([0.5]), s)
        errs.append(abs(y[0] - ref[0]))
    slopes = [np.log(errs[i] / errs[i + 1]) / np.log(2) for i in range(2)]
    assert abs(np.mean(slopes) - 4.0) < 0.3


def test_rk4_rejects_bad_steps():
    with pytest.raises(ValueError):
        ode.rk4(lambda t, y: y, 0.0, 1.0, np.array([1.0]), 0)
