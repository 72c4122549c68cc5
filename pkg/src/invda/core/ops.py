"""Differentiable primitives.

Every function accepts a mix of ``Var`` (tape-tracked), ``Tensor`` and plain
arrays.  With no ``Var`` argument the computation runs untracked on raw
ndarrays, which is the forward-only evaluation path.

The convolution and Lorenz96 kernels live in :mod:`invda.kernels`; solver
steps register custom vector-Jacobian rules via :func:`custom`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from .tape import GradientTape, TapeError, Var
from .tensor import Tensor


class ShapeError(ValueError):
    """Operand shapes incompatible with the operation."""


def value_of(x):
    """Raw ndarray behind a Var / Tensor / array-like."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> GradientTape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise TapeError("operands belong to different tapes")
    return tape


def _emit(tape, value, parents, vjp):
    if tape is None:
        return value
    tracked = [p for p in parents if isinstance(p, Var)]
    if len(tracked) != len(parents):
        # adapter that forwards cotangents only to tracked parents
        mask = [isinstance(p, Var) for p in parents]

        def vjp_masked(g, _vjp=vjp, _mask=mask):
            contribs = _vjp(g)
            return tuple(c for c, m in zip(contribs, _mask) if m)

        return tape.record(value, tracked, vjp_masked)
    return tape.record(value, parents, vjp)


def _unbroadcast(g, shape):
    """Sum a cotangent down to a broadcast operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def custom(value, parents, vjp):
    """Record an operation with a hand-derived vector-Jacobian rule."""
    tape = _tape_of(*parents)
    return _emit(tape, value, parents, vjp)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _emit(_tape_of(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _emit(_tape_of(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _emit(_tape_of(a, b), out, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a):
    return _emit(_tape_of(a), -value_of(a), (a,), lambda g: (-g,))


def scale(a, c: float):
    c = float(c)
    return _emit(_tape_of(a), c * value_of(a), (a,), lambda g: (c * g,))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise ShapeError("matmul supports vectors and matrices only")
    out = av @ bv

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:  # inner product
            return g * bv, g * av
        if av.ndim == 2 and bv.ndim == 1:  # matrix @ vector
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:  # vector @ matrix
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _emit(_tape_of(a, b), out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def total(a):
    av = value_of(a)
    return _emit(_tape_of(a), np.asarray(av.sum()), (a,),
                 lambda g: (np.broadcast_to(g, av.shape).astype(np.float64),))


def mean(a):
    av = value_of(a)
    n = av.size
    return _emit(_tape_of(a), np.asarray(av.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, av.shape).astype(np.float64),))


def sum_sq(a):
    av = value_of(a)
    return _emit(_tape_of(a), np.asarray(np.sum(av * av)), (a,),
                 lambda g: (2.0 * g * av,))


def mse(a, b):
    """Mean of squared differences over all elements."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"mse shapes differ: {av.shape} vs {bv.shape}")
    return scale(sum_sq(sub(a, b)), 1.0 / av.size)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    av = value_of(a)
    shape = tuple(shape)
    return _emit(_tape_of(a), av.reshape(shape), (a,),
                 lambda g: (g.reshape(av.shape),))


def transpose(a, axes):
    av = value_of(a)
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _emit(_tape_of(a), np.ascontiguousarray(av.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def roll(a, shift: int, axis: int):
    av = value_of(a)
    return _emit(_tape_of(a), np.roll(av, shift, axis=axis), (a,),
                 lambda g: (np.roll(g, -shift, axis=axis),))


def take(a, index: int):
    """Single slice along the leading axis."""
    av = value_of(a)
    out = np.ascontiguousarray(av[index])

    def vjp(g):
        gx = np.zeros(av.shape, dtype=np.float64)
        gx[index] = g
        return (gx,)

    return _emit(_tape_of(a), out, (a,), vjp)


def slice_leading(a, n: int):
    """First ``n`` entries along the leading axis."""
    av = value_of(a)
    out = np.ascontiguousarray(av[:n])

    def vjp(g):
        gx = np.zeros(av.shape, dtype=np.float64)
        gx[:n] = g
        return (gx,)

    return _emit(_tape_of(a), out, (a,), vjp)


def subsample(a, strides, axes):
    """Every stride-th entry (phase 0) along each given axis."""
    av = value_of(a)
    idx = [slice(None)] * av.ndim
    for s, ax in zip(strides, axes):
        if av.shape[ax] % s != 0:
            raise ShapeError(f"stride {s} does not divide extent {av.shape[ax]}")
        idx[ax] = slice(None, None, s)
    idx = tuple(idx)
    out = np.ascontiguousarray(av[idx])

    def vjp(g):
        gx = np.zeros(av.shape, dtype=np.float64)
        gx[idx] = g
        return (gx,)

    return _emit(_tape_of(a), out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a):
    """Sigmoid-weighted linear unit, x / (1 + exp(-x))."""
    av = value_of(a)
    sig = _sigmoid(av)
    out = av * sig

    def vjp(g):
        return (g * (sig * (1.0 + av * (1.0 - sig))),)

    return _emit(_tape_of(a), out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution and upsampling
# ---------------------------------------------------------------------------

def conv_periodic(x, w, bias):
    """Same-size convolution: zero-padded in time, periodic in space.

    ``x`` is ``(B, T, S..., Cin)`` with one or two space axes; the kernel is
    ``(3,)*(1 + ndim_space) + (Cin, Cout)``.
    """
    xv, wv, bv = value_of(x), value_of(w), value_of(bias)
    if xv.ndim == 4:
        if wv.shape[:2] != (3, 3) or wv.ndim != 4:
            raise ShapeError(f"2d kernel must be (3,3,Cin,Cout), got {wv.shape}")
        fwd, vjp_in, vjp_w = (kernels.conv2d_forward, kernels.conv2d_vjp_input,
                              kernels.conv2d_vjp_kernel)
    elif xv.ndim == 5:
        if wv.shape[:3] != (3, 3, 3) or wv.ndim != 5:
            raise ShapeError(f"3d kernel must be (3,3,3,Cin,Cout), got {wv.shape}")
        fwd, vjp_in, vjp_w = (kernels.conv3d_forward, kernels.conv3d_vjp_input,
                              kernels.conv3d_vjp_kernel)
    else:
        raise ShapeError(f"conv input must have rank 4 or 5, got {xv.ndim}")
    if wv.shape[-2] != xv.shape[-1]:
        raise ShapeError(f"kernel expects {wv.shape[-2]} input channels, got {xv.shape[-1]}")
    if bv.shape != (wv.shape[-1],):
        raise ShapeError(f"bias must be (Cout,)={wv.shape[-1]}, got {bv.shape}")

    out = fwd(xv, wv, bv)

    def vjp(g):
        g = np.ascontiguousarray(g)
        return (vjp_in(g, wv), vjp_w(xv, g),
                g.sum(axis=tuple(range(g.ndim - 1))))

    return _emit(_tape_of(x, w, bias), out, (x, w, bias), vjp)


_CR = (-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0)  # Catmull-Rom at midpoints


def upsample2(a, axis: int):
    """Double one periodic axis with cubic interpolation.

    Even output indices reproduce the input exactly; odd indices carry the
    Catmull-Rom midpoint value.
    """
    av = value_of(a)
    x = np.moveaxis(av, axis, -1)
    odd = (_CR[0] * np.roll(x, 1, axis=-1) + _CR[1] * x
           + _CR[2] * np.roll(x, -1, axis=-1) + _CR[3] * np.roll(x, -2, axis=-1))
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=np.float64)
    out[..., 0::2] = x
    out[..., 1::2] = odd
    out = np.ascontiguousarray(np.moveaxis(out, -1, axis))

    def vjp(g):
        gm = np.moveaxis(g, axis, -1)
        ge = gm[..., 0::2]
        go = gm[..., 1::2]
        gx = (ge + _CR[0] * np.roll(go, -1, axis=-1) + _CR[1] * go
              + _CR[2] * np.roll(go, 1, axis=-1) + _CR[3] * np.roll(go, 2, axis=-1))
        return (np.ascontiguousarray(np.moveaxis(gx, -1, axis)),)

    return _emit(_tape_of(a), out, (a,), vjp)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean/variance for inference-mode normalization."""

    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)
    initialized: bool = False

    def update(self, batch_mean, batch_var, momentum):
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            self.mean = momentum * self.mean + (1.0 - momentum) * batch_mean
            self.var = momentum * self.var + (1.0 - momentum) * batch_var


class BatchNormError(RuntimeError):
    """Inference requested before any training update."""


def batch_norm(x, scale_p, shift_p, running: RunningStats, mode: str,
               eps: float = 1e-5, momentum: float = 0.9, update: bool = True):
    """Normalize per channel (last axis) over all other axes.

    ``train`` mode uses batch statistics (and updates ``running`` unless
    ``update=False``); ``infer`` mode uses the running statistics.
    """
    xv, gv, bv = value_of(x), value_of(scale_p), value_of(shift_p)
    c = xv.shape[-1]
    if gv.shape != (c,) or bv.shape != (c,):
        raise ShapeError("scale/shift must be per-channel vectors")
    red = tuple(range(xv.ndim - 1))
    n = xv.size // c

    if mode == "train":
        mu = xv.mean(axis=red)
        var = xv.var(axis=red)
        if update:
            running.update(mu, var, momentum)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
        out = gv * xhat + bv

        def vjp(g):
            dshift = g.sum(axis=red)
            dscale = (g * xhat).sum(axis=red)
            dx = (gv * inv) * (g - dshift / n - xhat * (dscale / n))
            return dx, dscale, dshift

        return _emit(_tape_of(x, scale_p, shift_p), out, (x, scale_p, shift_p), vjp)

    if mode == "infer":
        if not running.initialized:
            raise BatchNormError("running statistics unavailable: train first")
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (xv - running.mean) * inv
        out = gv * xhat + bv

        def vjp(g):
            return g * (gv * inv), (g * xhat).sum(axis=red), g.sum(axis=red)

        return _emit(_tape_of(x, scale_p, shift_p), out, (x, scale_p, shift_p), vjp)

    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


# ---------------------------------------------------------------------------
# operator sugar on Var
# ---------------------------------------------------------------------------

Var.__add__ = lambda self, other: add(self, other)
Var.__radd__ = lambda self, other: add(other, self)
Var.__sub__ = lambda self, other: sub(self, other)
Var.__rsub__ = lambda self, other: sub(other, self)
Var.__mul__ = lambda self, other: mul(self, other)
Var.__rmul__ = lambda self, other: mul(other, self)
Var.__neg__ = lambda self: neg(self)
