"""Image plumbing: bicubic resampling, synthetic SR datasets, PSNR/SSIM,
PPM/PGM image files, binary checkpoints, and dataset manifests.

Images are float64 arrays of shape (C, H, W) with values nominally in
[0, 1]. Bicubic resampling uses the Catmull-Rom kernel (a = -0.5) with
edge-clamped sampling and the align-corners=false pixel-center convention.
"""

import struct
from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 99.0


class ImageFormatError(ValueError):
    """Malformed PPM/PGM data."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


class CheckpointError(ValueError):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCountError(CheckpointError):
    pass


def splitmix64(seed, index=0):
    """Derive a decorrelated 64-bit stream seed from (seed, index)."""
    z = (int(seed) + (index + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


# ------------------------------------------------------------------ bicubic

def _catmull_rom(d):
    """Cubic convolution kernel with a = -0.5."""
    a = -0.5
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    if d < 2.0:
        return a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
    return 0.0


def _cubic_matrix(n_in, n_out):
    """Dense (n_out, n_in) interpolation matrix for one axis."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        s = (i + 0.5) * scale - 0.5
        base = int(np.floor(s))
        for k in range(base - 1, base + 3):
            w = _catmull_rom(s - k)
            m[i, min(max(k, 0), n_in - 1)] += w
    return m


def bicubic_resize(img, out_h, out_w):
    """Separable Catmull-Rom resize of a (C, H, W) or (H, W) image."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bicubic_resize: invalid target size {(out_h, out_w)}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    mh = _cubic_matrix(img.shape[1], out_h)
    mw = _cubic_matrix(img.shape[2], out_w)
    out = np.einsum("oh,chw,pw->cop", mh, img, mw, optimize=True)
    return out[0] if squeeze else out


# ------------------------------------------------------------------ metrics

def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Single-scale SSIM over valid windows; multichannel input is
    converted to grayscale by channel mean. Dynamic range is 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=0)
        b = b.mean(axis=0)
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise ValueError(
            f"ssim: image {a.shape} smaller than {window_size}x{window_size} window"
        )
    w = _gaussian_window(window_size, sigma)

    def filt(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (window_size, window_size))
        return np.tensordot(win, w, axes=([2, 3], [0, 1]))

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    c1 = k1**2
    c2 = k2**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------- image files

def write_image(path, img):
    """Write a (1,H,W) image as binary PGM (P5) or (3,H,W) as PPM (P6)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"write_image: expected (1|3, H, W), got {img.shape}")
    magic = b"P5" if img.shape[0] == 1 else b"P6"
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    raw = q.transpose(1, 2, 0).tobytes() if img.shape[0] == 3 else q[0].tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.shape[2], img.shape[1]))
        f.write(raw)


def read_image(path):
    """Read a binary PGM/PPM file to a (C, H, W) float64 image in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()

    def next_token(off):
        while off < len(data) and data[off:off + 1].isspace():
            off += 1
        start = off
        while off < len(data) and not data[off:off + 1].isspace():
            off += 1
        if start == off:
            raise ImageFormatError(f"{path}: malformed header")
        return data[start:off], off

    magic, off = next_token(0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    tokens = []
    for _ in range(3):
        tok, off = next_token(off)
        tokens.append(tok)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    # pixel payload starts one whitespace byte after the maxval token
    raw = data[off + 1:off + 1 + w * h * channels]
    if len(raw) < w * h * channels:
        raise ImageFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(1, h, w)
    return arr.reshape(h, w, 3).transpose(2, 0, 1)


# --------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"ECDPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Serialized model state.

    Binary layout (little endian): 8-byte magic, u32 version, u32
    descriptor byte length, UTF-8 descriptor, f64 constants
    (beta0, beta_t, sigma2, c), u64 training step, u64 parameter count,
    f64 parameters.
    """

    descriptor: str
    params: np.ndarray
    beta0: float
    beta_t: float
    sigma2: float
    c: float
    step: int = 0
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt):
    desc = ckpt.descriptor.encode("utf-8")
    params = np.ascontiguousarray(ckpt.params, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", ckpt.version, len(desc)))
        f.write(desc)
        f.write(struct.pack("<4d", ckpt.beta0, ckpt.beta_t, ckpt.sigma2, ckpt.c))
        f.write(struct.pack("<QQ", ckpt.step, params.size))
        f.write(params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise CheckpointTruncatedError(f"{path}: file shorter than magic")
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {data[:8]!r}")
    off = 8

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointTruncatedError(f"{path}: truncated in {what}")
        chunk = data[off:off + n]
        off += n
        return chunk

    version, desc_len = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    desc = take(desc_len, "descriptor").decode("utf-8")
    beta0, beta_t, sigma2, c = struct.unpack("<4d", take(32, "constants"))
    step, count = struct.unpack("<QQ", take(16, "counts"))
    remaining = len(data) - off
    if remaining != 8 * count:
        raise CheckpointCountError(
            f"{path}: parameter count {count} does not match payload of "
            f"{remaining} bytes"
        )
    params = np.frombuffer(data[off:], dtype="<f8").copy()
    return Checkpoint(desc, params, beta0, beta_t, sigma2, c, step, version)


# ----------------------------------------------------------------- datasets

@dataclass
class SrSample:
    """Paired HR/LR images; hr is (C,H,W), lr is (C,H/s,W/s)."""

    hr: np.ndarray
    lr: np.ndarray
    scale: int


def _smooth_field(rng, channels, size, coarse=4):
    """Random smooth [0,1]-ish field via bicubic upscale of coarse noise."""
    coarse_img = rng.uniform(0.25, 0.75, size=(channels, coarse, coarse))
    return bicubic_resize(coarse_img, size, size)


def _texture_image(rng, channels, size):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((channels, size, size))
    n_waves = rng.integers(3, 6)
    for _ in range(n_waves):
        # mid-band frequencies: below the 4x-LR Nyquist (0.125 cycles per HR
        # pixel) so the information survives downscaling, but high enough
        # that a plain bicubic upscale attenuates it — the band a
        # super-resolver can actually recover
        freq = rng.uniform(0.04, 0.12)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.2, 0.6)
        wave = amp * np.sin(
            2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
        )
        palette = rng.uniform(0.2, 1.0, size=channels)
        img += palette[:, None, None] * wave[None]
    n_poly = rng.integers(1, 3)
    for _ in range(n_poly):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 8, size / 3)
        mask = ((xx - cx) ** 2 + (yy - cy) ** 2) < r**2
        color = rng.uniform(-0.3, 0.3, size=channels)
        img += color[:, None, None] * mask[None]
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-9:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def make_synthetic_dataset(kind, n, hr_size, scale, seed, channels=1, sigma=0.2):
    """Generate paired SR samples.

    gaussian-toy: y is a random smooth LR image and x = bicubic_up(y) +
    sigma * xi, so the conditional law of x given y is exactly Gaussian
    (x is not clipped to [0,1] to keep the law exact).

    texture-sr: procedural HR images, LR by bicubic downscale.
    """
    if hr_size % scale:
        raise ValueError(f"hr_size {hr_size} not divisible by scale {scale}")
    lr_size = hr_size // scale
    samples = []
    for i in range(n):
        rng = np.random.default_rng(splitmix64(seed, i))
        if kind == "gaussian-toy":
            lr = _smooth_field(rng, channels, lr_size)
            hr = bicubic_resize(lr, hr_size, hr_size)
            if sigma > 0:
                hr = hr + sigma * rng.standard_normal(hr.shape)
        elif kind == "texture-sr":
            hr = _texture_image(rng, channels, hr_size)
            lr = np.clip(bicubic_resize(hr, lr_size, lr_size), 0.0, 1.0)
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        samples.append(SrSample(hr=hr, lr=lr, scale=scale))
    return samples


# ----------------------------------------------------------------- manifests

def write_manifest(path, rows):
    """rows: iterable of (hr_path, lr_path, scale)."""
    with open(path, "w") as f:
        for hr_path, lr_path, scale in rows:
            f.write(f"{hr_path}, {lr_path}, {scale}\n")


def read_manifest(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 'hr, lr, scale'")
            try:
                scale = int(parts[2])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad scale {parts[2]!r}") from None
            rows.append((parts[0], parts[1], scale))
    return rows


def load_manifest_samples(path):
    return [
        SrSample(hr=read_image(hr), lr=read_image(lr), scale=scale)
        for hr, lr, scale in read_manifest(path)
    ]
