"""Losses, optimization, and the two-stage training schedule.

Training minimizes the reweighted denoising loss (noise-head MSE plus
clean-head MSE) and, after a configurable fraction of the run, adds an
image quality term: the feature-space distance between a probability-flow
sample and the ground truth, differentiated through the ODE solve with
the adjoint method.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import adjoint as adj
from . import autodiff as ad
from . import network as net_mod
from . import ode
from .autodiff import Tensor
from .process import T_MIN


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    batch_size: int = 8
    total_steps: int = 500
    quality_loss_start_fraction: float = 0.7
    quality_loss_weight: float = 0.1
    t_min: float = T_MIN
    c: float = 1.0
    seed: int = 0
    parametrization: str = "hybrid"  # which loss terms are trained
    val_fraction: float = 0.2
    # quality-loss economy knobs (toy scale): apply every k-th step on a
    # small sub-batch, sampled/backpropagated with fixed-step RK4
    quality_every: int = 1
    quality_batch_size: int = 1
    quality_solver_steps: int = 8
    quality_adjoint_steps: int = 8

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0.0 <= self.quality_loss_start_fraction <= 1.0:
            raise ValueError("quality_loss_start_fraction must be in [0, 1]")


class Adam:
    """Adam with externally supplied per-step learning rate."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def estimate_sigma2(samples, mu_of_y):
    """Pooled per-pixel variance of x - mu(y) over all samples and pixels."""
    if not samples:
        raise ValueError("estimate_sigma2: empty dataset")
    total = 0.0
    total_sq = 0.0
    count = 0
    for s in samples:
        r = s.hr - np.asarray(mu_of_y(s.lr), dtype=np.float64)
        total += r.sum()
        total_sq += (r * r).sum()
        count += r.size
    mean = total / count
    return total_sq / count - mean * mean


SIGMA2_USE_FLOOR = 1e-6


class FeatureExtractor:
    """Fixed (non-trained) image-to-feature map for the quality loss.

    kind 'identity' passes images through; kind 'random-conv' is a seeded
    3-layer convolutional net, a desk-scale stand-in for pretrained
    perceptual features.
    """

    def __init__(self, kind="random-conv", img_channels=1, seed=1234):
        self.kind = kind
        if kind == "identity":
            self.descriptor = "identity"
            self._convs = []
        elif kind == "random-conv":
            rng = np.random.default_rng(seed)
            widths = [img_channels, 8, 16, 16]
            self._convs = []
            for cin, cout in zip(widths[:-1], widths[1:]):
                w = rng.standard_normal((cout, cin, 3, 3)) / np.sqrt(cin * 9)
                self._convs.append(Tensor(w))
            self.descriptor = f"random-conv-3x{seed}"
        else:
            raise ValueError(f"unknown feature extractor kind {kind!r}")

    def __call__(self, x):
        """x: (B,C,H,W) Tensor or array -> feature Tensor."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, w in enumerate(self._convs):
            h = ad.conv2d(h, w)
            if i + 1 < len(self._convs):
                h = ad.silu(h)
        return h


def feature_distance(F, a, b):
    """L2 norm of F(a) - F(b) for single images (C,H,W), no gradients."""
    with ad.no_grad():
        d = ad.sub(F(np.asarray(a)[None]), F(np.asarray(b)[None]))
        return float(np.sqrt((d.data**2).sum()))


# ------------------------------------------------------------------- losses

def make_noisy_batch(process, x_b, mu_b, t_draws, noise_b):
    """Closed-form transition draw x_t for a batch with per-sample t."""
    a = process.schedule.alpha(t_draws).reshape(-1, 1, 1, 1)
    sig2 = np.maximum((1.0 - a) * process.sigma2, 1e-12)
    mu_hat = np.sqrt(a) * (x_b - mu_b) + mu_b
    return mu_hat + np.sqrt(sig2) * noise_b


def score_matching_loss(net, process, x_b, y_b, t_draws, noise_b,
                        mu_b=None, mode="hybrid"):
    """Mean over the batch of the summed-square head errors.

    mode selects the trained terms: 'eps' and 'x0' train a single head,
    'hybrid' trains both. Returns a scalar Tensor.
    """
    x_b = np.asarray(x_b, dtype=np.float64)
    if mu_b is None:
        mu_b = net_mod.batched_mu(process, y_b)
    xt = make_noisy_batch(process, x_b, mu_b, t_draws, noise_b)
    eps_pred, x0_pred = net.forward(xt, y_b, t_draws)
    B = x_b.shape[0]
    terms = []
    if mode in ("eps", "hybrid"):
        terms.append(ad.reduce_sum(ad.square(ad.sub(eps_pred, Tensor(noise_b)))))
    if mode in ("x0", "hybrid"):
        terms.append(ad.reduce_sum(ad.square(ad.sub(x0_pred, Tensor(x_b)))))
    if not terms:
        raise ValueError(f"unknown parametrization mode {mode!r}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scalar_mul(total, 1.0 / B)


def validation_score_loss(net, process, samples, mode="hybrid", c=1.0,
                          seed=0, t_values=(0.25, 0.5, 0.75), t_min=T_MIN):
    """Implied-noise residual of the assembled score on held-out samples.

    The score estimate s is converted to a noise prediction
    -sqrt(sigma_hat2) * s and compared against the true transition noise;
    reported as per-pixel MSE. Comparable across parametrizations.
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    with ad.no_grad():
        for s in samples:
            mu = process.mu(s.lr)
            for t in t_values:
                t = max(t, t_min)
                eps = rng.standard_normal(s.hr.shape)
                xt = process.sample_transition(s.hr, s.lr, t, eps, mu=mu)
                sc = net_mod.score(net, process, xt[None], s.lr[None], t,
                                   mode=mode, c=c, mu=mu[None])
                implied_eps = -np.sqrt(process.sigma_hat2(t)) * sc.data[0]
                total += ((implied_eps - eps) ** 2).sum()
                count += eps.size
    return total / count


class FlowDrift:
    """Probability-flow dynamics of a batch state, differentiable in the
    network parameters; plugs into the adjoint/unrolled gradient paths."""

    def __init__(self, net, process, y_b, mode="hybrid", c=1.0):
        self.net = net
        self.process = process
        self.y_b = np.asarray(y_b, dtype=np.float64)
        self.mode = mode
        self.c = c
        self.mu_b = net_mod.batched_mu(process, self.y_b)
        self.mu_tensor = Tensor(self.mu_b)

    def parameters(self):
        return self.net.parameters()

    def __call__(self, t, x):
        s = net_mod.score(self.net, self.process, x, self.y_b, t,
                          mode=self.mode, c=self.c, mu=self.mu_b)
        b = float(self.process.schedule.beta(t))
        relax = ad.scalar_mul(ad.sub(x, self.mu_tensor), -0.5 * b)
        return relax + ad.scalar_mul(s, -0.5 * b * self.process.sigma2)


def quality_loss(net, process, batch, F, cfg, seed):
    """Feature-space distance of probability-flow samples to ground truth.

    Returns (mean loss value, flat parameter gradient). Sampling uses
    fixed-step RK4 (cfg.quality_solver_steps) and the gradient flows
    through the adjoint method, so memory does not scale with step count.
    """
    params = net.parameters()
    n_params = sum(p.data.size for p in params)
    grad = np.zeros(n_params)
    total = 0.0
    t_hi = process.horizon
    t_lo = cfg.t_min
    for i, s in enumerate(batch):
        rng_seed = int(np.random.default_rng([seed, i]).integers(2**63))
        x_init, _ = _prior_draw(process, s.lr, rng_seed)
        drift = FlowDrift(net, process, s.lr[None], mode=cfg.parametrization, c=cfg.c)

        def f(t, flat):
            with ad.no_grad():
                out = drift(t, Tensor(flat.reshape((1,) + s.hr.shape)))
            return out.data.ravel()

        sr_flat, _ = ode.rk4(f, t_hi, t_lo, x_init.ravel(), cfg.quality_solver_steps)
        sr = sr_flat.reshape((1,) + s.hr.shape)

        sr_t = Tensor(sr, requires_grad=True)
        diff = ad.sub(F(sr_t), F(s.hr[None]))
        dist = ad.sqrt(ad.reduce_sum(ad.square(diff)) + Tensor(1e-12))
        total += float(dist.data)
        (dL_dsr,) = ad.vjp(dist, np.ones(()), [sr_t])

        dparams, _ = adj.adjoint_gradients(
            drift, sr, t_hi, t_lo, dL_dsr,
            method="rk4", steps=cfg.quality_adjoint_steps,
        )
        grad += dparams
    n = len(batch)
    return total / n, grad / n


def _prior_draw(process, y, seed):
    mu = process.mu(y)
    rng = np.random.default_rng(seed)
    return (mu + np.sqrt(process.sigma2) * rng.standard_normal(mu.shape))[None], mu


def select_hybrid_exponent(net, process, val_samples, grid=(0.5, 1.0, 1.5), seed=0):
    """Pick the hybrid exponent minimizing the validation score loss."""
    losses = {
        c: validation_score_loss(net, process, val_samples, mode="hybrid",
                                 c=c, seed=seed)
        for c in grid
    }
    return min(losses, key=losses.get), losses


def split_dataset(samples, val_fraction):
    n_val = max(1, int(round(len(samples) * val_fraction))) if val_fraction > 0 else 0
    if n_val >= len(samples):
        raise ValueError("validation split would consume the whole dataset")
    return samples[:len(samples) - n_val], samples[len(samples) - n_val:]


def train(net, process, dataset, cfg, feature_extractor=None, log_path=None,
          log_every=10, on_step=None):
    """Run Adam over the score-matching loss, adding the quality loss after
    cfg.quality_loss_start_fraction of the run. Deterministic per seed.

    Returns a list of metric rows (dicts). When log_path is given, rows
    are also appended as 'step, score_loss, quality_loss, lr, wall_time'.
    """
    train_set, _ = split_dataset(dataset, cfg.val_fraction)
    mu_all = np.stack([process.mu(s.lr) for s in train_set])
    x_all = np.stack([s.hr for s in train_set])
    y_all = np.stack([s.lr for s in train_set])

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters())
    F = feature_extractor or FeatureExtractor(
        img_channels=train_set[0].hr.shape[0])
    rows = []
    start = time.perf_counter()
    q_start_step = int(np.ceil(cfg.quality_loss_start_fraction * cfg.total_steps))
    log_file = open(log_path, "a") if log_path else None
    try:
        for step in range(cfg.total_steps):
            frac = step / max(cfg.total_steps - 1, 1)
            lr = cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac

            idx = rng.integers(0, len(train_set), size=cfg.batch_size)
            t_draws = rng.uniform(cfg.t_min, process.horizon, size=cfg.batch_size)
            noise = rng.standard_normal((cfg.batch_size,) + train_set[0].hr.shape)

            opt.zero_grad()
            loss = score_matching_loss(
                net, process, x_all[idx], y_all[idx], t_draws, noise,
                mu_b=mu_all[idx], mode=cfg.parametrization,
            )
            score_val = float(loss.data)
            if not np.isfinite(score_val):
                raise NonFiniteLossError(step, score_val)
            ad.backward(loss)

            q_val = 0.0
            use_quality = (
                cfg.quality_loss_weight > 0.0
                and step >= q_start_step
                and (step - q_start_step) % cfg.quality_every == 0
            )
            if use_quality:
                q_idx = rng.integers(0, len(train_set), size=cfg.quality_batch_size)
                q_seed = int(rng.integers(2**62))
                q_val, q_grad = quality_loss(
                    net, process, [train_set[i] for i in q_idx], F, cfg, q_seed)
                if not np.isfinite(q_val):
                    raise NonFiniteLossError(step, q_val)
                for p, g in zip(net.parameters(),
                                adj.unflatten(q_grad, net.parameters())):
                    contrib = cfg.quality_loss_weight * g
                    p.grad = contrib if p.grad is None else p.grad + contrib

            opt.step(lr)

            if step % log_every == 0 or step == cfg.total_steps - 1 or use_quality:
                row = {
                    "step": step,
                    "score_loss": score_val,
                    "quality_loss": q_val,
                    "lr": lr,
                    "wall_time": time.perf_counter() - start,
                }
                rows.append(row)
                if log_file:
                    log_file.write(
                        f"{row['step']}, {row['score_loss']:.8g}, "
                        f"{row['quality_loss']:.8g}, {row['lr']:.8g}, "
                        f"{row['wall_time']:.4f}\n"
                    )
                    log_file.flush()
            if on_step:
                on_step(step, score_val)
    finally:
        if log_file:
            log_file.close()
    return rows
