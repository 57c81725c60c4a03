"""Hot numeric kernels: 2-D convolution forward/backward.

Two interchangeable backends:

* ``numba``: jit-compiled explicit loops (default when numba imports).
* ``numpy``: im2col / tensordot fallback, always available.

Selection is controlled by the ``FLOWSR_BACKEND`` environment variable
(``numba`` or ``numpy``), read once at import time. When unset, numba is
used only if it can parallelize across more than one thread; on a single
core the BLAS-backed numpy path is faster (see benchmarks/bench_kernels.py).
Both backends are deterministic; results agree to float64 rounding.

Convolutions are stride 1 with symmetric zero padding (odd kernels,
"same" output size). Layout is (B, C, H, W) for images and
(Cout, Cin, kh, kw) for weights.
"""

import os

import numpy as np

_requested = os.environ.get("FLOWSR_BACKEND", "").strip().lower()
if _requested not in ("", "numpy", "numba"):
    raise RuntimeError(f"FLOWSR_BACKEND must be 'numpy' or 'numba', got {_requested!r}")

if _requested == "numpy":
    _numba_ok = False
else:
    try:
        import numba

        _numba_ok = True
    except ImportError:
        if _requested == "numba":
            raise
        _numba_ok = False

if _requested:
    BACKEND = _requested
elif _numba_ok and numba.config.NUMBA_NUM_THREADS > 1:
    BACKEND = "numba"
else:
    BACKEND = "numpy"


def _check_conv_shapes(x, w):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weight expects {w.shape[1]}"
        )
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError(f"conv2d requires odd kernel sizes, got {w.shape[2:]}")


# ---------------------------------------------------------------- numpy path

def _np_conv2d_forward(x, w):
    _check_conv_shapes(x, w)
    kh, kw = w.shape[2], w.shape[3]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (B, Cin, H, W, kh, kw); contract Cin, kh, kw against w
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _np_conv2d_backward_w(gout, x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # gout: (B, Cout, H, W); win: (B, Cin, H, W, kh, kw)
    gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw)


def _np_conv2d_backward_x(gout, w):
    # Gradient w.r.t. x is a convolution of gout with the transposed,
    # spatially flipped weights.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _np_conv2d_forward(gout, wt)


# ---------------------------------------------------------------- numba path

if _numba_ok:

    @numba.njit(cache=True, parallel=True)
    def _nb_conv2d_forward(x, w):  # pragma: no cover - exercised via dispatch
        # Inner loop runs contiguously over output columns so it vectorizes;
        # boundary handling is hoisted into the j-range per (u, v) tap.
        B, Cin, H, W = x.shape
        Cout, _, kh, kw = w.shape
        ph, pw = kh // 2, kw // 2
        out = np.zeros((B, Cout, H, W))
        for bo in numba.prange(B * Cout):
            b = bo // Cout
            co = bo % Cout
            for ci in range(Cin):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[co, ci, u, v]
                        off = v - pw
                        jlo = max(0, -off)
                        jhi = min(W, W - off)
                        for i in range(H):
                            ii = i + u - ph
                            if ii < 0 or ii >= H:
                                continue
                            for j in range(jlo, jhi):
                                out[b, co, i, j] += wv * x[b, ci, ii, j + off]
        return out

    @numba.njit(cache=True, parallel=True)
    def _nb_conv2d_backward_x(gout, w):  # pragma: no cover
        B, Cout, H, W = gout.shape
        _, Cin, kh, kw = w.shape
        ph, pw = kh // 2, kw // 2
        gx = np.zeros((B, Cin, H, W))
        for bc in numba.prange(B * Cin):
            b = bc // Cin
            ci = bc % Cin
            for co in range(Cout):
                for u in range(kh):
                    for v in range(kw):
                        wv = w[co, ci, u, v]
                        off = pw - v
                        jlo = max(0, -off)
                        jhi = min(W, W - off)
                        for i in range(H):
                            ii = i - u + ph
                            if ii < 0 or ii >= H:
                                continue
                            for j in range(jlo, jhi):
                                gx[b, ci, i, j] += wv * gout[b, co, ii, j + off]
        return gx

    @numba.njit(cache=True, parallel=True)
    def _nb_conv2d_backward_w(gout, x, kh, kw):  # pragma: no cover
        B, Cout, H, W = gout.shape
        Cin = x.shape[1]
        ph, pw = kh // 2, kw // 2
        gw = np.zeros((Cout, Cin, kh, kw))
        for co in numba.prange(Cout):
            for ci in range(Cin):
                for u in range(kh):
                    for v in range(kw):
                        off = v - pw
                        jlo = max(0, -off)
                        jhi = min(W, W - off)
                        acc = 0.0
                        for b in range(B):
                            for i in range(H):
                                ii = i + u - ph
                                if ii < 0 or ii >= H:
                                    continue
                                for j in range(jlo, jhi):
                                    acc += gout[b, co, i, j] * x[b, ci, ii, j + off]
                        gw[co, ci, u, v] = acc
        return gw


def conv2d_forward(x, w):
    """Stride-1 same-padded convolution: (B,Cin,H,W) x (Cout,Cin,kh,kw)."""
    if BACKEND == "numba":
        _check_conv_shapes(x, w)
        return _nb_conv2d_forward(
            np.ascontiguousarray(x), np.ascontiguousarray(w)
        )
    return _np_conv2d_forward(x, w)


def conv2d_backward_x(gout, w):
    """Gradient of conv2d output w.r.t. its input."""
    if BACKEND == "numba":
        return _nb_conv2d_backward_x(
            np.ascontiguousarray(gout), np.ascontiguousarray(w)
        )
    return _np_conv2d_backward_x(gout, w)


def conv2d_backward_w(gout, x, kh, kw):
    """Gradient of conv2d output w.r.t. the weights."""
    if BACKEND == "numba":
        return _nb_conv2d_backward_w(
            np.ascontiguousarray(gout), np.ascontiguousarray(x), kh, kw
        )
    return _np_conv2d_backward_w(gout, x, kh, kw)
