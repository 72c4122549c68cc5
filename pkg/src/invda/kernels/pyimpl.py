"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; the Cython extension (``_ckern``) provides
drop-in twins selected at import time by :mod:`invda.kernels`.

Conventions:
  * conv inputs are channels-last, ``(B, T, S..., C)`` with a leading batch
    axis, kernel extent 3 per axis, zero padding on the time axis and
    periodic wrap on every space axis.  Output extents equal input extents.
  * the Lorenz96 rollout returns the full trajectory ``(n+1, ..., K)``; its
    VJP consumes a cotangent for the whole trajectory.
"""

from __future__ import annotations

import numpy as np

# Keep im2col scratch below ~64 MB by chunking over the batch axis.
_MAX_COLS_BYTES = 64 * 2**20


def _batch_chunks(b, per_sample_bytes):
    step = max(1, int(_MAX_COLS_BYTES // max(per_sample_bytes, 1)))
    for lo in range(0, b, step):
        yield lo, min(b, lo + step)


# ---------------------------------------------------------------------------
# periodic/zero-padded convolution, 2d (time x space)
# ---------------------------------------------------------------------------

def _cols2d(x):
    """im2col patches (B,T,S,3,3,Ci) with zero-padded time, periodic space."""
    b, t, s, ci = x.shape
    xp = np.zeros((b, t + 2, s, ci), dtype=x.dtype)
    xp[:, 1:t + 1] = x
    cols = np.empty((b, t, s, 3, 3, ci), dtype=x.dtype)
    for dt in range(3):
        for ds in range(3):
            cols[:, :, :, dt, ds, :] = np.roll(xp[:, dt:dt + t], 1 - ds, axis=2)
    return cols

def conv2d_forward(x, w, bias):
    b, t, s, ci = x.shape
    co = w.shape[-1]
    wm = w.reshape(9 * ci, co)
    out = np.empty((b, t, s, co), dtype=x.dtype)
    per_sample = t * s * 9 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        cols = _cols2d(x[lo:hi])
        out[lo:hi] = (cols.reshape(-1, 9 * ci) @ wm).reshape(hi - lo, t, s, co)
    out += bias
    return out

def conv2d_vjp_input(g, w):
    b, t, s, co = g.shape
    ci = w.shape[-2]
    wm = w.reshape(9 * ci, co)
    gx = np.empty((b, t, s, ci), dtype=g.dtype)
    per_sample = t * s * 9 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        gcols = (g[lo:hi].reshape(-1, co) @ wm.T).reshape(hi - lo, t, s, 3, 3, ci)
        gxp = np.zeros((hi - lo, t + 2, s, ci), dtype=g.dtype)
        for dt in range(3):
            for ds in range(3):
                gxp[:, dt:dt + t] += np.roll(gcols[:, :, :, dt, ds, :], ds - 1, axis=2)
        gx[lo:hi] = gxp[:, 1:t + 1]
    return gx

def conv2d_vjp_kernel(x, g):
    b, t, s, ci = x.shape
    co = g.shape[-1]
    gw = np.zeros((9 * ci, co), dtype=x.dtype)
    per_sample = t * s * 9 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        cols = _cols2d(x[lo:hi])
        gw += cols.reshape(-1, 9 * ci).T @ g[lo:hi].reshape(-1, co)
    return gw.reshape(3, 3, ci, co)


# ---------------------------------------------------------------------------
# periodic/zero-padded convolution, 3d (time x space x space)
# ---------------------------------------------------------------------------

def _cols3d(x):
    b, t, h, w_, ci = x.shape
    xp = np.zeros((b, t + 2, h, w_, ci), dtype=x.dtype)
    xp[:, 1:t + 1] = x
    cols = np.empty((b, t, h, w_, 3, 3, 3, ci), dtype=x.dtype)
    for dt in range(3):
        for dh in range(3):
            rolled_h = np.roll(xp[:, dt:dt + t], 1 - dh, axis=2)
            for dw in range(3):
                cols[:, :, :, :, dt, dh, dw, :] = np.roll(rolled_h, 1 - dw, axis=3)
    return cols

def conv3d_forward(x, w, bias):
    b, t, h, w_, ci = x.shape
    co = w.shape[-1]
    wm = w.reshape(27 * ci, co)
    out = np.empty((b, t, h, w_, co), dtype=x.dtype)
    per_sample = t * h * w_ * 27 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        cols = _cols3d(x[lo:hi])
        out[lo:hi] = (cols.reshape(-1, 27 * ci) @ wm).reshape(hi - lo, t, h, w_, co)
    out += bias
    return out

def conv3d_vjp_input(g, w):
    b, t, h, w_, co = g.shape
    ci = w.shape[-2]
    wm = w.reshape(27 * ci, co)
    gx = np.empty((b, t, h, w_, ci), dtype=g.dtype)
    per_sample = t * h * w_ * 27 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        gcols = (g[lo:hi].reshape(-1, co) @ wm.T).reshape(hi - lo, t, h, w_, 3, 3, 3, ci)
        gxp = np.zeros((hi - lo, t + 2, h, w_, ci), dtype=g.dtype)
        for dt in range(3):
            for dh in range(3):
                for dw in range(3):
                    gxp[:, dt:dt + t] += np.roll(
                        np.roll(gcols[:, :, :, :, dt, dh, dw, :], dh - 1, axis=2),
                        dw - 1, axis=3)
        gx[lo:hi] = gxp[:, 1:t + 1]
    return gx

def conv3d_vjp_kernel(x, g):
    b, t, h, w_, ci = x.shape
    co = g.shape[-1]
    gw = np.zeros((27 * ci, co), dtype=x.dtype)
    per_sample = t * h * w_ * 27 * ci * 8
    for lo, hi in _batch_chunks(b, per_sample):
        cols = _cols3d(x[lo:hi])
        gw += cols.reshape(-1, 27 * ci).T @ g[lo:hi].reshape(-1, co)
    return gw.reshape(3, 3, 3, ci, co)


# ---------------------------------------------------------------------------
# Lorenz96 RK4 rollout and its adjoint
# ---------------------------------------------------------------------------

def l96_tendency(x, forcing):
    """dX_k/dt = -X_{k-1} (X_{k-2} - X_{k+1}) - X_k + F, periodic in k."""
    return (-np.roll(x, 1, axis=-1) * (np.roll(x, 2, axis=-1) - np.roll(x, -1, axis=-1))
            - x + forcing)

def _l96_jtv(x, v):
    """Transposed-Jacobian product of the tendency at state ``x``."""
    return (-np.roll(v, -1, axis=-1) * (np.roll(x, 1, axis=-1) - np.roll(x, -2, axis=-1))
            - np.roll(v, -2, axis=-1) * np.roll(x, -1, axis=-1)
            + np.roll(v, 1, axis=-1) * np.roll(x, 2, axis=-1)
            - v)

def l96_rk4_step(x, dt, forcing):
    k1 = l96_tendency(x, forcing)
    k2 = l96_tendency(x + 0.5 * dt * k1, forcing)
    k3 = l96_tendency(x + 0.5 * dt * k2, forcing)
    k4 = l96_tendency(x + dt * k3, forcing)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

def l96_rollout(x0, n_steps, dt, forcing):
    """Trajectory ``(n_steps+1, ..., K)``; leading batch axes allowed."""
    traj = np.empty((n_steps + 1,) + x0.shape, dtype=np.float64)
    traj[0] = x0
    for t in range(n_steps):
        traj[t + 1] = l96_rk4_step(traj[t], dt, forcing)
    return traj

def _l96_step_vjp(x, lam, dt, forcing):
    """Pull a cotangent back through one RK4 step evaluated at ``x``."""
    k1 = l96_tendency(x, forcing)
    x2 = x + 0.5 * dt * k1
    k2 = l96_tendency(x2, forcing)
    x3 = x + 0.5 * dt * k2
    k3 = l96_tendency(x3, forcing)
    x4 = x + dt * k3

    g1 = (dt / 6.0) * lam
    g2 = (dt / 3.0) * lam
    g3 = (dt / 3.0) * lam
    g4 = (dt / 6.0) * lam
    gx = lam.copy()

    j4 = _l96_jtv(x4, g4)
    gx += j4
    g3 = g3 + dt * j4
    j3 = _l96_jtv(x3, g3)
    gx += j3
    g2 = g2 + 0.5 * dt * j3
    j2 = _l96_jtv(x2, g2)
    gx += j2
    g1 = g1 + 0.5 * dt * j2
    gx += _l96_jtv(x, g1)
    return gx

def l96_rollout_vjp(traj, g_traj, dt, forcing):
    """Cotangent of the initial state given cotangents for every snapshot."""
    n = traj.shape[0] - 1
    lam = np.asarray(g_traj[n], dtype=np.float64).copy()
    for t in range(n - 1, -1, -1):
        lam = _l96_step_vjp(traj[t], lam, dt, forcing)
        lam += g_traj[t]
    return lam
