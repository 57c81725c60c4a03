"""Conditional denoiser with shared backbone and two output heads.

The backbone is a small two-stage encoder/decoder over the noisy HR
image, conditioned by (a) a sinusoidal embedding of t injected into every
residual block and (b) features of the LR image extracted at LR
resolution, upsampled and added at each stage. The eps head predicts the
normalized noise component, the x0 head predicts the clean image; the
score is assembled from either head or a time-weighted blend of both.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NetworkConfig:
    img_channels: int = 1
    channels: tuple = (32, 64)
    blocks_per_stage: int = 2
    lr_channels: int = 32
    lr_blocks: int = 4
    time_dim: int = 32

    def to_descriptor(self, **extra):
        fields = {
            "img_channels": self.img_channels,
            "channels": ",".join(str(c) for c in self.channels),
            "blocks_per_stage": self.blocks_per_stage,
            "lr_channels": self.lr_channels,
            "lr_blocks": self.lr_blocks,
            "time_dim": self.time_dim,
        }
        fields.update(extra)
        return ";".join(f"{k}={v}" for k, v in fields.items())


def parse_descriptor(descriptor):
    """Return (NetworkConfig, dict of extra fields)."""
    kv = {}
    for item in descriptor.split(";"):
        if not item:
            continue
        k, _, v = item.partition("=")
        kv[k] = v
    cfg = NetworkConfig(
        img_channels=int(kv.pop("img_channels")),
        channels=tuple(int(c) for c in kv.pop("channels").split(",")),
        blocks_per_stage=int(kv.pop("blocks_per_stage")),
        lr_channels=int(kv.pop("lr_channels")),
        lr_blocks=int(kv.pop("lr_blocks")),
        time_dim=int(kv.pop("time_dim")),
    )
    return cfg, kv


def reshape(x, shape):
    """Reshape preserving element order (plumbing for dense->conv bridges)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = Tensor(x.data.reshape(shape))
    old = x.data.shape
    return ad._record(out, "reshape", (x,), (lambda g: g.reshape(old),))


def sinusoidal_embedding(t_norm, dim):
    """(B, dim) embedding of normalized times in [0, 1].

    Frequencies span a geometric range capped at 16 cycles per unit time;
    the drift must stay smooth enough in t for high-order ODE solvers.
    """
    t_norm = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    half = dim // 2
    freqs = 2 * np.pi * np.exp(
        np.log(0.5) + (np.log(16.0) - np.log(0.5)) * np.arange(half) / max(half - 1, 1)
    )
    args = t_norm[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Conv:
    def __init__(self, cin, cout, k, rng, weight_scale=1.0):
        fan_in = cin * k * k
        self.w = Tensor(
            rng.standard_normal((cout, cin, k, k)) * weight_scale / np.sqrt(fan_in),
            requires_grad=True,
        )
        self.b = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.w) + self.b

    def parameters(self):
        return [self.w, self.b]


class Dense:
    def __init__(self, cin, cout, rng):
        self.w = Tensor(rng.standard_normal((cin, cout)) / np.sqrt(cin),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def parameters(self):
        return [self.w, self.b]


class ResBlock:
    """conv-silu-conv residual block with an additive per-channel time bias."""

    def __init__(self, ch, time_dim, rng):
        self.conv1 = Conv(ch, ch, 3, rng)
        self.conv2 = Conv(ch, ch, 3, rng)
        self.time_proj = Dense(time_dim, ch, rng) if time_dim else None
        self.ch = ch

    def __call__(self, x, temb=None):
        h = self.conv1(ad.silu(x))
        if self.time_proj is not None:
            tb = self.time_proj(temb)
            h = h + reshape(tb, (tb.shape[0], self.ch, 1, 1))
        h = self.conv2(ad.silu(h))
        return x + h

    def parameters(self):
        ps = self.conv1.parameters() + self.conv2.parameters()
        if self.time_proj is not None:
            ps += self.time_proj.parameters()
        return ps


class ScoreNetwork:
    """Two-headed conditional denoiser; all learnable state lives here."""

    def __init__(self, config=None, seed=0):
        self.config = config or NetworkConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        td = cfg.time_dim
        c0, c1 = cfg.channels

        self.time_mlp1 = Dense(td, td, rng)
        self.time_mlp2 = Dense(td, td, rng)

        self.lr_in = Conv(cfg.img_channels, cfg.lr_channels, 3, rng)
        self.lr_blocks = [
            ResBlock(cfg.lr_channels, 0, rng) for _ in range(cfg.lr_blocks)
        ]
        # one 1x1 projection of LR features per backbone stage
        self.lr_proj = [
            Conv(cfg.lr_channels, c, 1, rng) for c in (c0, c1, c0)
        ]

        self.in_conv = Conv(cfg.img_channels, c0, 3, rng)
        self.enc0 = [ResBlock(c0, td, rng) for _ in range(cfg.blocks_per_stage)]
        self.down = Conv(c0, c1, 3, rng)
        self.enc1 = [ResBlock(c1, td, rng) for _ in range(cfg.blocks_per_stage)]
        self.up = Conv(c1, c0, 3, rng)
        self.skip = Conv(2 * c0, c0, 1, rng)
        self.dec0 = [ResBlock(c0, td, rng) for _ in range(cfg.blocks_per_stage)]
        self.eps_head = Conv(c0, cfg.img_channels, 3, rng, weight_scale=0.01)
        self.x0_head = Conv(c0, cfg.img_channels, 3, rng, weight_scale=0.01)

        self._params = self._collect_parameters()

    def _collect_parameters(self):
        ps = self.time_mlp1.parameters() + self.time_mlp2.parameters()
        ps += self.lr_in.parameters()
        for blk in self.lr_blocks:
            ps += blk.parameters()
        for proj in self.lr_proj:
            ps += proj.parameters()
        ps += self.in_conv.parameters()
        for blk in self.enc0 + self.enc1 + self.dec0:
            ps += blk.parameters()
        ps += self.down.parameters() + self.up.parameters() + self.skip.parameters()
        ps += self.eps_head.parameters() + self.x0_head.parameters()
        return ps

    def parameters(self):
        return self._params

    def num_parameters(self):
        return sum(p.data.size for p in self._params)

    def param_vector(self):
        return np.concatenate([p.data.ravel() for p in self._params])

    def set_param_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_parameters():
            raise ValueError(
                f"parameter vector has {vec.size} entries, network needs "
                f"{self.num_parameters()}"
            )
        off = 0
        for p in self._params:
            n = p.data.size
            p.data = vec[off:off + n].reshape(p.data.shape).copy()
            off += n

    def lr_features(self, y):
        """Encode an LR batch (B,C,h,w) once; reusable across time steps."""
        y = y if isinstance(y, Tensor) else Tensor(y)
        h = self.lr_in(y)
        for blk in self.lr_blocks:
            h = blk(h)
        return h

    def forward(self, x, y, t, lr_feats=None):
        """Return (eps_pred, x0_pred), both HR-shaped Tensors.

        x: (B,C,H,W), y: (B,C,h,w), t: scalar or (B,) in [0, horizon].
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if lr_feats is None:
            lr_feats = self.lr_features(y)
        B, _, H, W = x.shape
        t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (B,))
        temb = Tensor(sinusoidal_embedding(t_arr, self.config.time_dim))
        temb = self.time_mlp2(ad.silu(self.time_mlp1(temb)))

        lr_h = lr_feats.shape[-2]
        f0 = H // lr_h
        if f0 * lr_h != H or (H // 2) % lr_h:
            raise ad.ShapeMismatchError(
                f"HR size {H} is not an even multiple of LR size {lr_h}"
            )

        def cond(feats, proj, res):
            c = proj(feats)
            factor = res // lr_h
            return ad.nearest_upsample(c, factor) if factor > 1 else c

        h = self.in_conv(x) + cond(lr_feats, self.lr_proj[0], H)
        for blk in self.enc0:
            h = blk(h, temb)
        skip0 = h
        h = self.down(ad.nearest_downsample(h, 2)) + cond(lr_feats, self.lr_proj[1], H // 2)
        for blk in self.enc1:
            h = blk(h, temb)
        h = self.up(ad.nearest_upsample(h, 2))
        h = self.skip(ad.concat_channels([skip0, h])) + cond(lr_feats, self.lr_proj[2], H)
        for blk in self.dec0:
            h = blk(h, temb)
        h = ad.silu(h)
        # the x0 head predicts a correction to the noisy input: near t=0 the
        # input already is the clean image, so the residual form keeps the
        # small-t score (which the sampler endpoint depends on) accurate
        return self.eps_head(h), self.x0_head(h) + x


# ----------------------------------------------------------- score assembly

def hybrid_lambda(process, t, c):
    """Interpolation weight alpha(t)^c between the two parametrizations."""
    if not 0.5 <= c <= 1.5:
        raise ValueError(f"hybrid exponent c must be in [0.5, 1.5], got {c}")
    return process.schedule.alpha(t) ** c


def _per_sample(arr, batch):
    """Broadcast a scalar-or-(B,) constant to (B,1,1,1)."""
    a = np.broadcast_to(np.atleast_1d(np.asarray(arr, dtype=np.float64)), (batch,))
    return a.reshape(batch, 1, 1, 1)


def batched_mu(process, y):
    """Stack process.mu over a batch of LR images."""
    y = np.asarray(y, dtype=np.float64)
    return np.stack([process.mu(yi) for yi in y])


def score_from_heads(process, x, t, eps_pred, x0_pred, mu, mode, c=1.0):
    """Assemble the score estimate from head outputs.

    mode 'eps':    -eps_pred / sqrt(sigma_hat2)
    mode 'x0':     -(x - mu_hat(x0_pred)) / sigma_hat2
    mode 'hybrid': lambda(t)-weighted blend, collapsing exactly to the
                   pure parametrizations when lambda is 0 or 1.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    B = x.shape[0]
    sig2 = process.sigma_hat2(t)
    sig2_b = _per_sample(sig2, B)

    def s_eps():
        return ad.mul(eps_pred, Tensor(-1.0 / np.sqrt(sig2_b)))

    def s_x0():
        a = _per_sample(process.schedule.alpha(t), B)
        mu_hat = ad.mul(ad.sub(x0_pred, mu), Tensor(np.sqrt(a))) + Tensor(mu)
        return ad.mul(ad.sub(x, mu_hat), Tensor(-1.0 / sig2_b))

    if mode == "eps":
        return s_eps()
    if mode == "x0":
        return s_x0()
    if mode == "hybrid":
        lam = np.broadcast_to(
            np.atleast_1d(hybrid_lambda(process, t, c)), (B,)
        ).reshape(B, 1, 1, 1)
        if np.all(lam == 1.0):
            return s_eps()
        if np.all(lam == 0.0):
            return s_x0()
        return ad.mul(s_eps(), Tensor(lam)) + ad.mul(s_x0(), Tensor(1.0 - lam))
    raise ValueError(f"unknown parametrization mode {mode!r}")


def score(net, process, x, y, t, mode="hybrid", c=1.0, lr_feats=None, mu=None):
    """Full score evaluation: network forward plus head assembly."""
    if mu is None:
        mu = batched_mu(process, y)
    eps_pred, x0_pred = net.forward(x, y, t, lr_feats=lr_feats)
    return score_from_heads(process, x, t, eps_pred, x0_pred, mu, mode, c)
