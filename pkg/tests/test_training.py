"""Training tests: loss values against oracles, sigma2 estimation,
optimizer behavior, reproducibility, and the quality loss."""

import numpy as np
import pytest

import flowsr.autodiff as ad
from flowsr import training
from flowsr.autodiff import Tensor
from flowsr.imaging import SrSample, bicubic_resize, make_synthetic_dataset
from flowsr.network import NetworkConfig, ScoreNetwork
from flowsr.process import BetaSchedule, ConditionalForwardProcess
from flowsr.training import (Adam, FeatureExtractor, TrainConfig,
                             estimate_sigma2, feature_distance,
                             score_matching_loss, train)

TINY = NetworkConfig(img_channels=1, channels=(4, 4), blocks_per_stage=1,
                     lr_channels=4, lr_blocks=1, time_dim=4)


def toy_process(sigma2=1.0, hr=8, scale=2):
    return ConditionalForwardProcess(
        BetaSchedule(),
        lambda y: bicubic_resize(y, y.shape[-2] * scale, y.shape[-1] * scale),
        sigma2)


def toy_dataset(n=8, hr=8, scale=2, seed=0, sigma=0.2):
    return make_synthetic_dataset("gaussian-toy", n, hr, scale, seed,
                                  sigma=sigma)


class _OracleNet:
    """Returns the true (eps, x0) used to build the noisy batch."""

    def __init__(self, eps, x0):
        self.eps, self.x0 = eps, x0

    def forward(self, xt, y, t, lr_feats=None):
        return Tensor(self.eps), Tensor(self.x0)


class _ZeroNet:
    def forward(self, xt, y, t, lr_feats=None):
        shape = xt.shape if not isinstance(xt, Tensor) else xt.data.shape
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def test_oracle_heads_give_zero_loss():
    proc = toy_process()
    ds = toy_dataset(4)
    x_b = np.stack([s.hr for s in ds[:4]])
    y_b = np.stack([s.lr for s in ds[:4]])
    rng = np.random.default_rng(1)
    t_draws = rng.uniform(0.1, 1.0, 4)
    noise = rng.standard_normal(x_b.shape)
    net = _OracleNet(noise, x_b)
    loss = score_matching_loss(net, proc, x_b, y_b, t_draws, noise)
    assert float(loss.data) < 1e-20


def test_zero_heads_loss_expectation():
    # E loss = E||eps||^2 + E||x||^2 ~ d + sum||x||^2 per sample
    proc = toy_process()
    ds = toy_dataset(16, sigma=0.1)
    x_b = np.stack([s.hr for s in ds])
    y_b = np.stack([s.lr for s in ds])
    rng = np.random.default_rng(2)
    vals = []
    for rep in range(200):
        t_draws = rng.uniform(0.1, 1.0, len(ds))
        noise = rng.standard_normal(x_b.shape)
        loss = score_matching_loss(_ZeroNet(), proc, x_b, y_b, t_draws, noise)
        vals.append(float(loss.data))
    d = x_b[0].size
    expect = d + (x_b ** 2).sum(axis=(1, 2, 3)).mean()
    assert abs(np.mean(vals) / expect - 1.0) < 0.05


def test_loss_gradient_matches_directional_fd():
    proc = toy_process()
    ds = toy_dataset(4)
    x_b = np.stack([s.hr for s in ds[:2]])
    y_b = np.stack([s.lr for s in ds[:2]])
    rng = np.random.default_rng(3)
    t_draws = rng.uniform(0.1, 1.0, 2)
    noise = rng.standard_normal(x_b.shape)
    net = ScoreNetwork(TINY, seed=0)
    params = net.parameters()

    loss = score_matching_loss(net, proc, x_b, y_b, t_draws, noise)
    ad.backward(loss)
    grad = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        for p in params
    ])

    theta0 = net.param_vector()
    v = rng.standard_normal(theta0.size)
    v /= np.linalg.norm(v)

    def loss_at(vec):
        net.set_param_vector(vec)
        with ad.no_grad():
            l = score_matching_loss(net, proc, x_b, y_b, t_draws, noise)
        return float(l.data)

    h = 1e-5
    fd = (loss_at(theta0 + h * v) - loss_at(theta0 - h * v)) / (2 * h)
    net.set_param_vector(theta0)
    assert abs(grad @ v - fd) / max(abs(fd), 1e-8) < 1e-4


def test_loss_gradient_matches_fd_per_parameter_subset():
    proc = toy_process()
    ds = toy_dataset(2)
    x_b = np.stack([s.hr for s in ds])
    y_b = np.stack([s.lr for s in ds])
    rng = np.random.default_rng(4)
    t_draws = rng.uniform(0.1, 1.0, 2)
    noise = rng.standard_normal(x_b.shape)
    net = ScoreNetwork(TINY, seed=5)

    loss = score_matching_loss(net, proc, x_b, y_b, t_draws, noise)
    ad.backward(loss)
    theta0 = net.param_vector()
    grads = np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        for p in net.parameters()
    ])

    def loss_at(vec):
        net.set_param_vector(vec)
        with ad.no_grad():
            l = score_matching_loss(net, proc, x_b, y_b, t_draws, noise)
        return float(l.data)

    h = 1e-5
    idxs = rng.choice(theta0.size, size=25, replace=False)
    for i in idxs:
        tp = theta0.copy(); tp[i] += h
        tm = theta0.copy(); tm[i] -= h
        fd = (loss_at(tp) - loss_at(tm)) / (2 * h)
        assert abs(grads[i] - fd) <= 1e-4 * max(abs(fd), 1e-2)
    net.set_param_vector(theta0)


def test_estimate_sigma2_cases():
    # exact-mean residuals
    hr = np.full((1, 4, 4), 0.5)
    samples = [SrSample(hr=hr, lr=hr[:, ::2, ::2], scale=2)]
    assert estimate_sigma2(samples, lambda y: hr) == 0.0

    # two-point residuals {+a, -a} -> variance a^2
    a = 0.3
    s_plus = SrSample(hr=hr + a, lr=hr[:, ::2, ::2], scale=2)
    s_minus = SrSample(hr=hr - a, lr=hr[:, ::2, ::2], scale=2)
    est = estimate_sigma2([s_plus, s_minus], lambda y: hr)
    assert np.isclose(est, a * a, rtol=1e-12)

    # iid N(0, 0.04) residuals at >= 1e5 pixels
    rng = np.random.default_rng(6)
    hr_big = np.full((1, 256, 256), 0.5)
    big = [
        SrSample(hr=hr_big + 0.2 * rng.standard_normal((1, 256, 256)),
                 lr=hr_big[:, ::2, ::2], scale=2)
        for _ in range(2)
    ]
    est = estimate_sigma2(big, lambda y: hr_big)
    assert abs(est / 0.04 - 1.0) < 0.05

    with pytest.raises(ValueError):
        estimate_sigma2([], lambda y: y)


def test_feature_extractor_identity_and_distance():
    F = FeatureExtractor("identity")
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, (1, 6, 6))
    assert feature_distance(F, x, x) == 0.0
    delta = 0.25
    # constant offset under identity features: ||delta|| * sqrt(pixels)
    d = feature_distance(F, x + delta, x)
    assert np.isclose(d, delta * np.sqrt(x.size), rtol=1e-12)


def test_feature_extractor_random_conv_deterministic():
    F1 = FeatureExtractor("random-conv", seed=11)
    F2 = FeatureExtractor("random-conv", seed=11)
    x = np.random.default_rng(8).uniform(0, 1, (1, 1, 8, 8))
    assert np.array_equal(F1(x).data, F2(x).data)
    with pytest.raises(ValueError):
        FeatureExtractor("vgg")


def test_quality_loss_value_and_gradient_shape():
    proc = toy_process()
    ds = toy_dataset(2)
    net = ScoreNetwork(TINY, seed=1)
    cfg = TrainConfig(total_steps=1, quality_solver_steps=4,
                      quality_adjoint_steps=4)
    F = FeatureExtractor("identity")
    val, grad = training.quality_loss(net, proc, ds[:1], F, cfg, seed=9)
    assert np.isfinite(val) and val >= 0.0
    assert grad.shape == (net.num_parameters(),)
    assert np.all(np.isfinite(grad))


def test_quality_loss_gradient_matches_directional_fd():
    proc = toy_process()
    ds = toy_dataset(1)
    net = ScoreNetwork(TINY, seed=2)
    # enough steps that RK4 discretization error does not leak into the
    # adjoint-vs-finite-difference comparison on the stiff time interval
    cfg = TrainConfig(total_steps=1, quality_solver_steps=16,
                      quality_adjoint_steps=16)
    F = FeatureExtractor("identity")
    seed = 13

    _, grad = training.quality_loss(net, proc, ds, F, cfg, seed)
    theta0 = net.param_vector()
    rng = np.random.default_rng(14)
    v = rng.standard_normal(theta0.size)
    v /= np.linalg.norm(v)

    def loss_at(vec):
        net.set_param_vector(vec)
        val, _ = training.quality_loss(net, proc, ds, F, cfg, seed)
        return val

    h = 1e-4
    fd = (loss_at(theta0 + h * v) - loss_at(theta0 - h * v)) / (2 * h)
    net.set_param_vector(theta0)
    assert abs(grad @ v - fd) / max(abs(fd), 1e-6) < 1e-3


def test_train_zero_steps_is_identity():
    proc = toy_process()
    ds = toy_dataset(6)
    net = ScoreNetwork(TINY, seed=3)
    before = net.param_vector()
    rows = train(net, proc, ds, TrainConfig(total_steps=0))
    assert rows == []
    assert np.array_equal(net.param_vector(), before)


def test_train_decreases_loss_and_is_reproducible():
    proc = toy_process(sigma2=0.04)
    ds = toy_dataset(8, sigma=0.2)
    cfg = TrainConfig(lr_start=1e-3, lr_end=1e-3, batch_size=4,
                      total_steps=60, quality_loss_weight=0.0, seed=5)

    def run():
        net = ScoreNetwork(TINY, seed=5)
        rows = train(net, proc, ds, cfg, log_every=1)
        return net.param_vector(), rows

    p1, rows1 = run()
    p2, rows2 = run()
    assert np.array_equal(p1, p2)  # bit-for-bit reproducible
    first = np.mean([r["score_loss"] for r in rows1[:10]])
    last = np.mean([r["score_loss"] for r in rows1[-10:]])
    assert last < first


def test_train_gradient_totality():
    """Every parameter moves at least once over a short run (no dead heads)."""
    proc = toy_process(sigma2=0.04)
    ds = toy_dataset(8, sigma=0.2)
    net = ScoreNetwork(TINY, seed=6)
    before = net.param_vector()
    cfg = TrainConfig(lr_start=1e-3, lr_end=1e-3, batch_size=4,
                      total_steps=100, quality_loss_weight=0.0, seed=6)
    train(net, proc, ds, cfg)
    moved = net.param_vector() != before
    assert moved.all()


def test_train_metrics_log_format(tmp_path):
    proc = toy_process(sigma2=0.04)
    ds = toy_dataset(6, sigma=0.2)
    net = ScoreNetwork(TINY, seed=7)
    log = tmp_path / "metrics.log"
    train(net, proc, ds,
          TrainConfig(total_steps=5, quality_loss_weight=0.0, seed=7),
          log_path=str(log), log_every=1)
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 5
    for line in lines:
        parts = [p.strip() for p in line.split(",")]
        assert len(parts) == 5
        int(parts[0])
        [float(p) for p in parts[1:]]


def test_non_finite_loss_aborts_with_step():
    proc = toy_process()
    ds = toy_dataset(4)
    net = ScoreNetwork(TINY, seed=8)
    # poison one parameter so the first forward pass produces NaN
    net.parameters()[0].data[:] = np.nan
    with pytest.raises(training.NonFiniteLossError) as exc:
        train(net, proc, ds, TrainConfig(total_steps=3, seed=8))
    assert exc.value.step == 0


def test_split_dataset():
    ds = toy_dataset(10)
    tr, val = training.split_dataset(ds, 0.2)
    assert len(tr) == 8 and len(val) == 2
    tr, val = training.split_dataset(ds, 0.0)
    assert len(tr) == 10 and len(val) == 0
    with pytest.raises(ValueError):
        training.split_dataset(ds[:1], 0.9)


def test_validation_score_loss_prefers_oracle_like_net():
    # the analytic-score situation: a network trained a bit should beat a
    # random one on the implied-noise residual
    proc = toy_process(sigma2=0.04)
    ds = toy_dataset(8, sigma=0.2)
    net = ScoreNetwork(TINY, seed=9)
    before = training.validation_score_loss(net, proc, ds[-2:])
    cfg = TrainConfig(lr_start=1e-3, lr_end=1e-3, batch_size=4,
                      total_steps=150, quality_loss_weight=0.0, seed=9)
    train(net, proc, ds, cfg)
    after = training.validation_score_loss(net, proc, ds[-2:])
    assert after < before


def test_select_hybrid_exponent_returns_grid_member():
    proc = toy_process(sigma2=0.04)
    ds = toy_dataset(4, sigma=0.2)
    net = ScoreNetwork(TINY, seed=10)
    c, losses = training.select_hybrid_exponent(net, proc, ds[:2])
    assert c in (0.5, 1.0, 1.5)
    assert set(losses) == {0.5, 1.0, 1.5}


def test_adam_skips_missing_grads():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([p])
    opt.step(1e-2)  # no grad set: parameter unchanged
    assert np.array_equal(p.data, np.ones(3))
    p.grad = np.ones(3)
    opt.step(1e-2)
    assert not np.array_equal(p.data, np.ones(3))
