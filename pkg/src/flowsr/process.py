"""Closed-form machinery of the conditional forward diffusion.

The forward SDE relaxes an HR image x toward the conditional mean mu(y)
(bicubic upscale of the LR image) while injecting noise scaled by the
pooled residual variance sigma2:

    dx = -1/2 beta(t) (x - mu(y)) dt + sqrt(beta(t) sigma2) dw

Its transition law is Gaussian and available in closed form, which this
module exposes together with an Euler-Maruyama simulator used as a
Monte-Carlo oracle.
"""

from dataclasses import dataclass

import numpy as np

ALPHA_FLOOR = 1e-12
SIGMA_HAT2_FLOOR = 1e-12
T_MIN = 1e-3


@dataclass(frozen=True)
class BetaSchedule:
    """Linear noise rate beta(t) = beta0 + (beta_t - beta0) * t / horizon."""

    beta0: float = 0.1
    beta_t: float = 20.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.beta0 <= self.beta_t):
            raise ValueError(f"need 0 < beta0 <= beta_t, got {self.beta0}, {self.beta_t}")
        if self.horizon <= 0.0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        return t

    def beta(self, t):
        t = self._check_t(t)
        return self.beta0 + (self.beta_t - self.beta0) * t / self.horizon

    def alpha(self, t):
        """exp of minus the integrated rate; clamped away from zero."""
        t = self._check_t(t)
        integral = self.beta0 * t + (self.beta_t - self.beta0) * t**2 / (2.0 * self.horizon)
        return np.maximum(np.exp(-integral), ALPHA_FLOOR)


class ConditionalForwardProcess:
    """Schedule plus conditional mean/variance; owns all transition math."""

    def __init__(self, schedule, mu_of_y, sigma2):
        if sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        self.schedule = schedule
        self.mu_of_y = mu_of_y
        self.sigma2 = float(sigma2)

    @property
    def horizon(self):
        return self.schedule.horizon

    def mu(self, y):
        return np.asarray(self.mu_of_y(y), dtype=np.float64)

    def sigma_hat2(self, t):
        """(1 - alpha(t)) * sigma2, floored to avoid the t->0 singularity."""
        return np.maximum((1.0 - self.schedule.alpha(t)) * self.sigma2, SIGMA_HAT2_FLOOR)

    def transition_stats(self, x0, y=None, t=0.0, mu=None):
        """Mean and variance of x(t) given x(0); mu may be precomputed."""
        if mu is None:
            mu = self.mu(y)
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape[-mu.ndim:] != mu.shape:
            raise ValueError(
                f"transition_stats: x0 shape {x0.shape} incompatible with "
                f"mu shape {mu.shape}"
            )
        a = self.schedule.alpha(t)
        mu_hat = np.sqrt(a) * (x0 - mu) + mu
        sigma_hat2 = (1.0 - a) * self.sigma2
        return mu_hat, sigma_hat2

    def sample_transition(self, x0, y, t, noise, mu=None):
        mu_hat, sigma_hat2 = self.transition_stats(x0, y, t, mu=mu)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != mu_hat.shape:
            raise ValueError(
                f"sample_transition: noise shape {noise.shape} != {mu_hat.shape}"
            )
        return mu_hat + np.sqrt(sigma_hat2) * noise

    def euler_maruyama_forward(self, x0, y, steps, seed, record_times=None,
                               drift_sign=1.0):
        """Simulate the forward SDE with Euler-Maruyama.

        x0 may carry leading path dimensions broadcasting against mu(y).
        Returns (times, states): the trajectory at the requested times
        (defaults to every step). drift_sign=-1 deliberately corrupts the
        drift; only the selfcheck harness uses it.
        """
        mu = self.mu(y)
        x = np.broadcast_to(np.asarray(x0, dtype=np.float64),
                            np.broadcast_shapes(np.shape(x0), mu.shape)).copy()
        rng = np.random.default_rng(seed)
        dt = self.horizon / steps
        times = [0.0]
        states = [x.copy()]
        record = None if record_times is None else sorted(record_times)
        t = 0.0
        for k in range(steps):
            b = self.schedule.beta(t)
            x = (
                x
                - drift_sign * 0.5 * b * (x - mu) * dt
                + np.sqrt(b * self.sigma2 * dt) * rng.standard_normal(x.shape)
            )
            t = (k + 1) * dt
            if record is None:
                times.append(t)
                states.append(x.copy())
            elif any(abs(t - rt) < dt / 2 for rt in record):
                times.append(t)
                states.append(x.copy())
        return np.asarray(times), states

    def analytic_gaussian_score(self, x, y, t=None, mu=None):
        """Exact score -(x - mu(y)) / sigma2, valid at all t when the data
        law is exactly N(mu(y), sigma2 I) (the process fixed point)."""
        if mu is None:
            mu = self.mu(y)
        return -(np.asarray(x, dtype=np.float64) - mu) / self.sigma2
