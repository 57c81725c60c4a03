"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every primitive records its inputs and a vector-Jacobian
closure on the output node when gradients are enabled and any input
requires them. ``backward`` walks the recorded graph in reverse
topological order; ``vjp`` does the same without touching accumulated
``grad`` fields.
"""

import contextlib

import numpy as np

from . import kernels


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are invalid for a primitive op."""


_grad_enabled = True

# Live-node accounting used by the adjoint memory-contract tests.
_live_nodes = 0
_peak_live_nodes = 0


def live_node_count():
    return _live_nodes


def peak_node_count():
    return _peak_live_nodes


def reset_peak_node_count():
    global _peak_live_nodes
    _peak_live_nodes = _live_nodes


@contextlib.contextmanager
def no_grad():
    """Disable graph recording within the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float64 array with optional participation in the grad tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        global _live_nodes, _peak_live_nodes
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjps = ()
        self._op = None
        _live_nodes += 1
        if _live_nodes > _peak_live_nodes:
            _peak_live_nodes = _live_nodes

    def __del__(self):
        global _live_nodes
        _live_nodes -= 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; use mul")
        return scalar_mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        return reduce_sum(self, axis=axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis=axis)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, op, parents, vjps):
    """Attach parents/vjp closures if recording is active."""
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
        out._op = op
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcastable"
        ) from None


# -------------------------------------------------------------- primitives

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a.data, b.data)
    out = Tensor(a.data + b.data)
    return _record(out, "add", (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(g, b.data.shape),
    ))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a.data, b.data)
    out = Tensor(a.data - b.data)
    return _record(out, "sub", (a, b), (
        lambda g: _unbroadcast(g, a.data.shape),
        lambda g: _unbroadcast(-g, b.data.shape),
    ))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a.data, b.data)
    out = Tensor(a.data * b.data)
    return _record(out, "mul", (a, b), (
        lambda g: _unbroadcast(g * b.data, a.data.shape),
        lambda g: _unbroadcast(g * a.data, b.data.shape),
    ))


def scalar_mul(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return _record(out, "scalar_mul", (a,), (lambda g: g * s,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, "matmul", (a, b), (
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    ))


def conv2d(x, w):
    """Stride-1, symmetric zero-padded convolution on (B,C,H,W)."""
    x, w = _as_tensor(x), _as_tensor(w)
    try:
        out_data = kernels.conv2d_forward(x.data, w.data)
    except ValueError as e:
        raise ShapeMismatchError(f"conv2d: {e}") from None
    out = Tensor(out_data)
    kh, kw = w.shape[2], w.shape[3]
    return _record(out, "conv2d", (x, w), (
        lambda g: kernels.conv2d_backward_x(g, w.data),
        lambda g: kernels.conv2d_backward_w(g, x.data, kh, kw),
    ))


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0
    return _record(out, "relu", (x,), (lambda g: g * mask,))


def silu(x):
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * sig)
    deriv = sig * (1.0 + x.data * (1.0 - sig))
    return _record(out, "silu", (x,), (lambda g: g * deriv,))


def square(x):
    x = _as_tensor(x)
    out = Tensor(x.data * x.data)
    return _record(out, "square", (x,), (lambda g: g * (2.0 * x.data),))


def sqrt(x):
    x = _as_tensor(x)
    root = np.sqrt(x.data)
    out = Tensor(root)
    return _record(out, "sqrt", (x,), (lambda g: g * (0.5 / root),))


def reduce_sum(x, axis=None):
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def back(g):
        if axis is None:
            return np.broadcast_to(g, x.data.shape).copy()
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape).copy()

    return _record(out, "reduce_sum", (x,), (back,))


def reduce_mean(x, axis=None):
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis))
    n = x.data.size if axis is None else x.data.shape[axis]

    def back(g):
        if axis is None:
            return np.broadcast_to(g / n, x.data.shape).copy()
        g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, x.data.shape).copy()

    return _record(out, "reduce_mean", (x,), (back,))


def concat_channels(parts):
    """Concatenate (B,C,H,W) tensors along the channel axis."""
    parts = [_as_tensor(p) for p in parts]
    if any(p.ndim != 4 for p in parts):
        raise ShapeMismatchError("concat_channels: all inputs must be 4-d (B,C,H,W)")
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeMismatchError(
                f"concat_channels: incompatible shapes {base} and {p.shape}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def make_back(lo, hi):
        return lambda g: g[:, lo:hi]

    vjps = tuple(make_back(offsets[i], offsets[i + 1]) for i in range(len(parts)))
    return _record(out, "concat_channels", tuple(parts), vjps)


def nearest_upsample(x, factor):
    """Integer-factor nearest-neighbour upsampling of the two trailing axes."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeMismatchError("nearest_upsample: input must have >= 3 dims")
    f = int(factor)
    data = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)
    out = Tensor(data)
    h, w = x.shape[-2], x.shape[-1]

    def back(g):
        g = g.reshape(g.shape[:-2] + (h, f, w, f))
        return g.sum(axis=(-3, -1))

    return _record(out, "nearest_upsample", (x,), (back,))


def nearest_downsample(x, factor):
    """Integer-factor downsampling by strided point sampling."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeMismatchError("nearest_downsample: input must have >= 3 dims")
    f = int(factor)
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeMismatchError(
            f"nearest_downsample: spatial dims {x.shape[-2:]} not divisible by {f}"
        )
    out = Tensor(np.ascontiguousarray(x.data[..., ::f, ::f]))

    def back(g):
        gx = np.zeros(x.data.shape)
        gx[..., ::f, ::f] = g
        return gx

    return _record(out, "nearest_downsample", (x,), (back,))


# ------------------------------------------------------------ reverse pass

def _toposort(roots):
    order = []
    visited = set()
    stack = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents before children


def _pullback(root, seed):
    """Return {id(node): cotangent} for every node reachable from root."""
    order = _toposort([root])
    grads = {id(root): np.asarray(seed, dtype=np.float64)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, fn in zip(node._parents, node._vjps):
            contrib = fn(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = np.asarray(contrib, dtype=np.float64)
    return grads, order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The recorded graph is released afterwards (tape consumed).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeMismatchError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads, order = _pullback(loss, np.ones_like(loss.data))
    for node in order:
        if node.requires_grad and not node._parents:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
    for node in order:
        node._parents = ()
        node._vjps = ()


def vjp(output, cotangent, wrt):
    """cotangent^T (d output / d wrt_i) for each wrt_i.

    Leaves accumulated .grad fields untouched and keeps the graph intact,
    so repeated pullbacks from the same graph are allowed.
    """
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != output.data.shape:
        raise ShapeMismatchError(
            f"vjp: cotangent shape {cot.shape} != output shape {output.data.shape}"
        )
    grads, _ = _pullback(output, cot)
    return tuple(
        grads.get(id(t), np.zeros_like(t.data)) for t in wrt
    )
