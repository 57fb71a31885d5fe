"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous float32/float64 numpy arrays. Differentiable ops
append records to a thread-local tape; ``backward(loss)`` walks the tape in
reverse, accumulates gradients at fan-out points, writes ``.grad`` on leaves
and clears the tape. Any op that produces NaN/Inf from finite inputs raises
immediately instead of propagating garbage.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes
or a python scalar; anything else must go through an explicit
``broadcast_to``. Reduction order inside every op is fixed, so repeated
forward passes on identical inputs are bit-identical.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

_SUPPORTED_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Operand shapes violate an op's precondition."""


class NumericsError(ArithmeticError):
    """An op produced NaN/Inf from finite inputs."""


class TapeError(RuntimeError):
    """Backward called on a non-scalar, or on an already-consumed tape."""


class Tensor:
    """Immutable dense array value, optionally tracked for gradients.

    ``data`` is only reassigned across tape boundaries (optimizer updates,
    finite-difference probes); within a forward/backward cycle tensors are
    treated as values.
    """

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, dtype=None, requires_grad=False, op=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; scalars are already contiguous
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op  # name of the op that produced this tensor; None for leaves

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.op is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def abs(self):
        return tabs(self)


# -- tape ---------------------------------------------------------------


class _Record:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs  # tuple of Tensors (non-tensor operands captured in the closure)
        self.out = out
        self.backward = backward  # grad_out -> tuple of grads aligned with inputs (None allowed)


class Tape:
    """Ordered record of executed differentiable ops (execution order is
    topological by construction)."""

    def __init__(self):
        self.records = []
        self.out_ids = set()

    def append(self, record):
        self.records.append(record)
        self.out_ids.add(id(record.out))

    def clear(self):
        self.records = []
        self.out_ids = set()

    def __len__(self):
        return len(self.records)


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = Tape()
        _state.grad_enabled = True
    return _state


def active_tape():
    return _tls().tape


def reset_tape():
    _tls().tape.clear()


@contextmanager
def no_grad():
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def grad_enabled():
    return _tls().grad_enabled


# -- op plumbing ----------------------------------------------------------


def _finite_or_raise(op, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op}: produced non-finite values")


def _make(op, out_data, inputs, backward):
    """Wrap an op result, enforce the NaN policy and record on the tape."""
    _finite_or_raise(op, out_data)
    st = _tls()
    track = st.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track, op=op if track else None)
    if track:
        st.tape.append(_Record(op, tuple(inputs), out, backward))
    return out


def _check_dtypes(op, *tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{op}: mixed dtypes {dt} vs {t.dtype}")
    return dt


def _as_scalar(x):
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


# -- elementwise ----------------------------------------------------------


def _ewise(op, a, b, fwd, bwd_a, bwd_b):
    sb = _as_scalar(b)
    sa = _as_scalar(a)
    if sa is not None and sb is not None:
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    if sb is not None:
        out = fwd(a.data, sb)
        return _make(op, out, (a,), lambda g: (bwd_a(g, a.data, sb),))
    if sa is not None:
        out = fwd(sa, b.data)
        return _make(op, out, (b,), lambda g: (bwd_b(g, sa, b.data),))
    _check_dtypes(op, a, b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(no implicit broadcasting; use broadcast_to)")
    out = fwd(a.data, b.data)
    return _make(op, out, (a, b),
                 lambda g: (bwd_a(g, a.data, b.data), bwd_b(g, a.data, b.data)))


def add(a, b):
    return _ewise("add", a, b, lambda x, y: x + y,
                  lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _ewise("sub", a, b, lambda x, y: x - y,
                  lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _ewise("mul", a, b, lambda x, y: x * y,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(x):
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def tabs(x):
    # subgradient 0 at exactly 0 (np.sign(0) == 0)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def tlog(x):
    out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def clamp(x, lo, hi):
    out = np.clip(x.data, lo, hi)
    mask = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)
    return _make("clamp", out, (x,), lambda g: (g * mask,))


def activation(x, kind):
    """Elementwise nonlinearity: 'relu', 'gelu' (exact erf form) or 'sigmoid'."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"activation: unknown kind {kind!r}")


def relu(x):
    out = np.maximum(x.data, 0)
    return _make("relu", out, (x,),
                 lambda g: (g * (x.data > 0).astype(x.dtype),))


def gelu(x):
    # exact Gaussian-CDF form x * Phi(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _make("gelu", out, (x,), bwd)


def sigmoid(x):
    out = expit(x.data).astype(x.dtype)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (x,), bwd)


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _make("sum", np.asarray(out), (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    out = np.sum(x.data, axis=axes, keepdims=keepdims) / n

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return ((np.broadcast_to(g, x.shape) / n).astype(x.dtype, copy=False),)

    return _make("mean", np.asarray(out), (x,), bwd)


# -- shape ops ------------------------------------------------------------


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x, order):
    order = tuple(order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"permute: order {order} invalid for rank {x.ndim}")
    inv = np.argsort(order)
    out = np.ascontiguousarray(np.transpose(x.data, order))
    return _make("permute", out, (x,),
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(xs, axis):
    xs = list(xs)
    _check_dtypes("concat", *xs)
    axis = axis % xs[0].ndim
    ref = list(xs[0].shape)
    for t in xs[1:]:
        got = list(t.shape)
        if len(got) != len(ref) or any(g != r for i, (g, r) in enumerate(zip(got, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make("concat", out, tuple(xs),
                 lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis)))


def split(x, parts, axis):
    axis = axis % x.ndim
    parts = [int(p) for p in parts]
    if sum(parts) != x.shape[axis]:
        raise ShapeError(f"split: parts {parts} do not sum to extent {x.shape[axis]}")
    outs = []
    start = 0
    for p in parts:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + p)
        sl = tuple(sl)
        piece = np.ascontiguousarray(x.data[sl])

        def bwd(g, sl=sl):
            full = np.zeros(x.shape, dtype=x.dtype)
            full[sl] = g
            return (full,)

        outs.append(_make("split", piece, (x,), bwd))
        start += p
    return outs


def broadcast_to(x, shape):
    """Explicit broadcast; backward sums over the expanded axes."""
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}: {e}") from None
    pad = len(shape) - x.ndim
    summed = tuple(range(pad)) + tuple(
        pad + i for i, s in enumerate(x.shape) if s == 1 and shape[pad + i] != 1
    )

    def bwd(g):
        red = np.sum(g, axis=summed, keepdims=False) if summed else g
        return (red.reshape(x.shape),)

    return _make("broadcast_to", np.ascontiguousarray(out), (x,), bwd)


# -- matmul ---------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of batch-dim broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a, b):
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape).astype(a.dtype, copy=False),
                _unbroadcast(gb, b.shape).astype(b.dtype, copy=False))

    return _make("matmul", out, (a, b), bwd)


# -- gather ---------------------------------------------------------------


def index_select(x, indices, axis=0):
    """Gather rows along `axis` by an integer index array; backward scatter-adds."""
    idx = np.asarray(indices)
    axis = axis % x.ndim
    out = np.take(x.data, idx, axis=axis)

    def bwd(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("index_select", out, (x,), bwd)


# -- conv / pool ----------------------------------------------------------


def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    """2-D cross-correlation with zero padding.

    x: [N, Cin, H, W], w: [Cout, Cin/groups, kh, kw], b: [Cout] or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    _check_dtypes("conv2d", x, w, *( [b] if b is not None else [] ))
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride/pad ({stride}, {pad})")
    if cin != cg * groups or cout % groups:
        raise ShapeError(
            f"conv2d: channel mismatch x has Cin={cin}, w expects {cg}x{groups} groups, Cout={cout}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * pad},{wd + 2 * pad})")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")

    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # windows: [N, Cin, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]

    if groups == 1:
        out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, Cout]
        out = np.ascontiguousarray(np.moveaxis(out, 3, 1))
    else:
        win_g = win.reshape(n, groups, cg, ho, wo, kh, kw)
        w_g = w.data.reshape(groups, cout // groups, cg, kh, kw)
        # einsum over each group; path is a plain GEMM per group
        out = np.einsum("ngchwuv,gocuv->ngohw", win_g, w_g, optimize=True)
        out = np.ascontiguousarray(out.reshape(n, cout, ho, wo))
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bwd(g):
        # g: [N, Cout, Ho, Wo]
        if groups == 1:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout, Cin, kh, kw]
        else:
            g_g = g.reshape(n, groups, cout // groups, ho, wo)
            win_g = win.reshape(n, groups, cg, ho, wo, kh, kw)
            dw = np.einsum("ngohw,ngchwuv->gocuv", g_g, win_g, optimize=True)
            dw = dw.reshape(cout, cg, kh, kw)
        dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                if groups == 1:
                    patch = np.tensordot(g, w.data[:, :, u, v], axes=([1], [0]))  # [N, Ho, Wo, Cin]
                    patch = np.moveaxis(patch, 3, 1)
                else:
                    g_g = g.reshape(n, groups, cout // groups, ho, wo)
                    patch = np.einsum("ngohw,goc->ngchw", g_g, w.data.reshape(
                        groups, cout // groups, cg, kh, kw)[:, :, :, u, v], optimize=True)
                    patch = patch.reshape(n, cin, ho, wo)
                dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += patch
        dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = [np.ascontiguousarray(dx).astype(x.dtype, copy=False),
                 dw.astype(w.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)).astype(b.dtype, copy=False))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, inputs, bwd)


def maxpool2d(x, k, stride):
    """Max pooling; gradient routes to the first maximum in scan order."""
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: k and stride must be >= 1, got ({k}, {stride})")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} exceeds input ({h},{w})")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)  # first max in scan order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dx = np.zeros_like(x.data)
        onehot = (np.arange(k * k) == arg[..., None])
        gwin = g[..., None] * onehot  # [N, C, Ho, Wo, k*k]
        for u in range(k):
            for v in range(k):
                dx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gwin[..., u * k + v]
        return (dx,)

    return _make("maxpool2d", np.ascontiguousarray(out), (x,), bwd)


# -- normalization --------------------------------------------------------


def batchnorm2d(x, gamma, beta, state, training, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over (N, H, W).

    `state` is a dict with 'running_mean' and 'running_var' numpy arrays;
    train mode updates them in place by `momentum`. Eval mode requires the
    state to be present.
    """
    if eps <= 0:
        raise ShapeError("batchnorm2d: eps must be > 0")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if state is not None:
            state["running_mean"] *= (1.0 - momentum)
            state["running_mean"] += momentum * mean
            state["running_var"] *= (1.0 - momentum)
            state["running_var"] += momentum * var
    else:
        if state is None:
            raise ValueError("batchnorm2d: eval mode requires initialized running statistics")
        mean = state["running_mean"].astype(x.dtype)
        var = state["running_var"].astype(x.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = np.sum(g * xhat, axis=(0, 2, 3))
        dbeta = np.sum(g, axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            s1 = np.sum(dxhat, axis=(0, 2, 3), keepdims=True)
            s2 = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - s1 / m - xhat * s2 / m) * inv[None, :, None, None]
        else:
            dx = dxhat * inv[None, :, None, None]
        return (dx.astype(x.dtype, copy=False),
                dgamma.astype(gamma.dtype, copy=False),
                dbeta.astype(beta.dtype, copy=False))

    return _make("batchnorm2d", out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the trailing feature dim, then affine."""
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layernorm: trailing dim must be >= 1")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = np.sum(g * xhat, axis=tuple(range(x.ndim - 1)))
        dbeta = np.sum(g, axis=tuple(range(x.ndim - 1)))
        dxhat = g * gamma.data
        s1 = np.mean(dxhat, axis=-1, keepdims=True)
        s2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = (dxhat - s1 - xhat * s2) * inv
        return (dx.astype(x.dtype, copy=False),
                dgamma.astype(gamma.dtype, copy=False),
                dbeta.astype(beta.dtype, copy=False))

    return _make("layernorm", out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)


# -- bilinear upsampling ----------------------------------------------------


def _bilinear_matrix(n_in, scale, dtype):
    """[n_out, n_in] interpolation weights, half-pixel centers, no corner align."""
    n_out = n_in * scale
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    coords = np.clip(coords, 0.0, n_in - 1.0)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def bilinear_upsample(x, scale):
    """Upsample [N, C, H, W] spatially by an integer factor."""
    scale = int(scale)
    if scale < 1:
        raise ShapeError(f"bilinear_upsample: scale must be >= 1, got {scale}")
    if scale == 1:
        return reshape(x, x.shape)  # differentiable identity
    n, c, h, w = x.shape
    wr = _bilinear_matrix(h, scale, x.dtype)  # [H*s, H]
    wc = _bilinear_matrix(w, scale, x.dtype)  # [W*s, W]
    # rows: [N,C,H,W] -> [N,C,Hs,W]; cols: -> [N,C,Hs,Ws]
    tmp = np.matmul(wr, x.data.reshape(n * c, h, w)).reshape(n, c, h * scale, w)
    out = np.matmul(tmp, wc.T)

    def bwd(g):
        t = np.matmul(g, wc)  # [N,C,Hs,W]
        dx = np.matmul(wr.T, t.reshape(n * c, h * scale, w)).reshape(n, c, h, w)
        return (dx.astype(x.dtype, copy=False),)

    return _make("bilinear_upsample", np.ascontiguousarray(out), (x,), bwd)


# -- backward -------------------------------------------------------------


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    The active tape is consumed: a second backward without a fresh forward
    raises TapeError.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _tls().tape
    if not loss.is_leaf and id(loss) not in tape.out_ids:
        raise TapeError("backward: tape already consumed (or loss built under no_grad); "
                        "re-run the forward pass")

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss

    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t

    for key, t in leaves.items():
        acc = grads.get(key)
        if acc is None and key == id(loss):
            acc = np.ones(loss.shape, dtype=loss.dtype)
        t.grad = Tensor(np.ascontiguousarray(acc))
    tape.clear()
    return None


# -- gradient verification --------------------------------------------------


def default_fd_eps(dtype):
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-3


def finite_diff_multi(fn, leaves, eps=None):
    """Max relative error between analytic grads of fn() and central differences.

    `fn` takes no arguments and returns a scalar Tensor computed from the
    given leaf tensors. Every coordinate of every leaf is probed. fn must be
    deterministic; a repeated-evaluation mismatch raises ValueError.
    """
    leaves = list(leaves)
    for t in leaves:
        if not t.requires_grad:
            raise ValueError("finite_diff: all probed leaves must require grad")

    reset_tape()
    ref = fn()
    with no_grad():
        again = fn()
    if not np.array_equal(ref.data, again.data):
        raise ValueError("finite_diff: fn is not deterministic "
                         "(repeated evaluation mismatch)")
    backward(ref)
    analytic = []
    for t in leaves:
        if t.grad is None:
            analytic.append(np.zeros(t.shape, dtype=t.dtype))
        else:
            analytic.append(t.grad.data.copy())
        t.grad = None

    max_err = 0.0
    for t, an in zip(leaves, analytic):
        if eps is None:
            base = default_fd_eps(t.dtype)
        else:
            base = eps
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = base * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            with no_grad():
                fp = float(fn().data)
            flat[i] = orig - h
            with no_grad():
                fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(an_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > max_err:
                max_err = err
    reset_tape()
    return max_err


def finite_diff_check(f, x, eps=None):
    """Gradient check of a scalar-valued function of one tensor."""
    return finite_diff_multi(lambda: f(x), [x], eps)
