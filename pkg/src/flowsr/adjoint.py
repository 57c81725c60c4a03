"""O(1)-memory gradients of ODE solutions via the adjoint sensitivity
method, plus an unrolled-backprop reference with O(steps) memory.

Dynamics objects must expose ``__call__(t, x: Tensor) -> Tensor`` (building
an autodiff graph) and ``parameters() -> list[Tensor]``. The adjoint
integrates the augmented system (x, a_x, a_theta) backward, where

    a_x'     = -a_x^T (df/dx)
    a_theta' = -a_x^T (df/dtheta)

both obtained from a single vector-Jacobian pullback per evaluation. The
state x is reconstructed backward alongside the adjoints (pure adjoint,
no checkpointing).
"""

import numpy as np

from . import autodiff as ad
from . import ode
from .autodiff import Tensor


class NonFiniteAdjointError(RuntimeError):
    pass


def _param_sizes(params):
    return [p.data.size for p in params]


def flatten_grads(grads, params):
    return np.concatenate([np.asarray(g).ravel() for g in grads]) if params else np.zeros(0)


def unflatten(vec, params):
    out = []
    off = 0
    for p in params:
        n = p.data.size
        out.append(vec[off:off + n].reshape(p.data.shape))
        off += n
    return out


def adjoint_gradients(dynamics, x_final, t_from, t_to, dL_dx_final,
                      atol=1e-8, rtol=1e-8, method="adaptive", steps=50):
    """Gradients of L(x(t_to)) w.r.t. parameters and x(t_from).

    x_final must be the solver output at t_to for these dynamics. The
    augmented ODE is solved from t_to back to t_from with the adaptive
    solver (or fixed-step RK4 when method='rk4', used to cheapen
    training-time quality-loss gradients). Memory does not grow with the
    number of solver steps.

    Returns (dL_dparams flat array, dL_dx_init array).
    """
    params = dynamics.parameters()
    n = x_final.size
    p = sum(_param_sizes(params))
    shape = x_final.shape
    dL_dx_final = np.asarray(dL_dx_final, dtype=np.float64)
    if dL_dx_final.shape != shape:
        raise ValueError(
            f"dL_dx_final shape {dL_dx_final.shape} != state shape {shape}"
        )
    if t_from == t_to:
        return np.zeros(p), dL_dx_final.copy()

    def aug_f(t, z):
        x = z[:n].reshape(shape)
        a_x = z[n:2 * n].reshape(shape)
        xt = Tensor(x, requires_grad=True)
        out = dynamics(t, xt)
        pulled = ad.vjp(out, a_x, [xt] + params)
        dx = out.data.ravel()
        da_x = -pulled[0].ravel()
        da_p = -flatten_grads(pulled[1:], params)
        return np.concatenate([dx, da_x, da_p])

    z0 = np.concatenate([
        np.asarray(x_final, dtype=np.float64).ravel(),
        dL_dx_final.ravel(),
        np.zeros(p),
    ])
    if method == "adaptive":
        zf, _ = ode.dopri5(aug_f, t_to, t_from, z0, atol=atol, rtol=rtol)
    elif method == "rk4":
        zf, _ = ode.rk4(aug_f, t_to, t_from, z0, steps)
    else:
        raise ValueError(f"unknown adjoint method {method!r}")
    if not np.all(np.isfinite(zf)):
        raise NonFiniteAdjointError("non-finite adjoint state after backward solve")
    dL_dx_init = zf[n:2 * n].reshape(shape)
    dL_dparams = zf[2 * n:]
    return dL_dparams, dL_dx_init


def unrolled_solve(dynamics, x_init, t_from, t_to, steps):
    """Fixed-step RK4 recorded on the tape; returns the final state Tensor.

    Reference oracle (O(steps) memory) for adjoint_gradients.
    """
    x = x_init if isinstance(x_init, Tensor) else Tensor(x_init)
    h = (t_to - t_from) / steps
    for i in range(steps):
        t = t_from + i * h
        k1 = dynamics(t, x)
        k2 = dynamics(t + h / 2, x + ad.scalar_mul(k1, h / 2))
        k3 = dynamics(t + h / 2, x + ad.scalar_mul(k2, h / 2))
        k4 = dynamics(t + h, x + ad.scalar_mul(k3, h))
        incr = k1 + ad.scalar_mul(k2, 2.0) + ad.scalar_mul(k3, 2.0) + k4
        x = x + ad.scalar_mul(incr, h / 6)
    return x


def unrolled_gradients(dynamics, x_init, t_from, t_to, steps, dL_dx_final):
    """Backpropagate through the unrolled RK4 solve.

    Returns (dL_dparams flat, dL_dx_init, x_final array).
    """
    params = dynamics.parameters()
    x0 = Tensor(x_init, requires_grad=True)
    x_final = unrolled_solve(dynamics, x0, t_from, t_to, steps)
    pulled = ad.vjp(x_final, dL_dx_final, params + [x0])
    dL_dparams = flatten_grads(pulled[:-1], params)
    return dL_dparams, pulled[-1], x_final.data
