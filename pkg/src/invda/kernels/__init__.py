"""Hot-kernel backend selection.

The compiled extension is preferred when present; ``INVDA_KERNELS=python``
forces the pure-numpy implementations, ``INVDA_KERNELS=cython`` demands the
extension.  Both backends implement identical semantics (see
``tests/test_kernels.py`` for the parity checks and ``benchmarks/`` for the
speed comparison).
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import pyimpl

_ckern = None
_mode = os.environ.get("INVDA_KERNELS", "auto").lower()
if _mode not in ("auto", "cython", "python"):
    raise ValueError(f"INVDA_KERNELS must be auto|cython|python, got {_mode!r}")
if _mode in ("auto", "cython"):
    try:
        _ckern = importlib.import_module("._ckern", __name__)
    except ImportError:
        _ckern = None
        if _mode == "cython":
            raise ImportError("INVDA_KERNELS=cython but the compiled extension is missing")

BACKEND = "cython" if _ckern is not None else "python"


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


if _ckern is not None:

    def conv2d_forward(x, w, bias):
        b, t, s, ci = x.shape
        co = w.shape[-1]
        cols = _ckern.im2col2d(_c(x))
        out = cols @ w.reshape(9 * ci, co)
        out += bias
        return out.reshape(b, t, s, co)

    def conv2d_vjp_input(g, w):
        b, t, s, co = g.shape
        ci = w.shape[-2]
        gcols = _c(g).reshape(-1, co) @ w.reshape(9 * ci, co).T
        return _ckern.col2im2d(_c(gcols), b, t, s, ci)

    def conv2d_vjp_kernel(x, g):
        b, t, s, ci = x.shape
        co = g.shape[-1]
        cols = _ckern.im2col2d(_c(x))
        return (cols.T @ _c(g).reshape(-1, co)).reshape(3, 3, ci, co)

    def conv3d_forward(x, w, bias):
        b, t, h, w_, ci = x.shape
        co = w.shape[-1]
        cols = _ckern.im2col3d(_c(x))
        out = cols @ w.reshape(27 * ci, co)
        out += bias
        return out.reshape(b, t, h, w_, co)

    def conv3d_vjp_input(g, w):
        b, t, h, w_, co = g.shape
        ci = w.shape[-2]
        gcols = _c(g).reshape(-1, co) @ w.reshape(27 * ci, co).T
        return _ckern.col2im3d(_c(gcols), b, t, h, w_, ci)

    def conv3d_vjp_kernel(x, g):
        b, t, h, w_, ci = x.shape
        co = g.shape[-1]
        cols = _ckern.im2col3d(_c(x))
        return (cols.T @ _c(g).reshape(-1, co)).reshape(3, 3, 3, ci, co)

    def l96_rollout(x0, n_steps, dt, forcing):
        if x0.ndim == 1:
            return _ckern.l96_rollout(_c(x0), n_steps, dt, forcing)
        return pyimpl.l96_rollout(x0, n_steps, dt, forcing)

    def l96_rollout_vjp(traj, g_traj, dt, forcing):
        if traj.ndim == 2:
            return _ckern.l96_rollout_vjp(_c(traj), _c(g_traj), dt, forcing)
        return pyimpl.l96_rollout_vjp(traj, g_traj, dt, forcing)

else:
    conv2d_forward = pyimpl.conv2d_forward
    conv2d_vjp_input = pyimpl.conv2d_vjp_input
    conv2d_vjp_kernel = pyimpl.conv2d_vjp_kernel
    conv3d_forward = pyimpl.conv3d_forward
    conv3d_vjp_input = pyimpl.conv3d_vjp_input
    conv3d_vjp_kernel = pyimpl.conv3d_vjp_kernel
    l96_rollout = pyimpl.l96_rollout
    l96_rollout_vjp = pyimpl.l96_rollout_vjp

l96_tendency = pyimpl.l96_tendency
l96_rk4_step = pyimpl.l96_rk4_step
