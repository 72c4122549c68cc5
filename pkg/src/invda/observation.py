"""Observation operators, baseline initializations, and whitening.

The observation operator subsamples every stride-th grid point (phase 0).
Observations are channels-last:

  * Lorenz96 state ``(K,)``          -> observation ``(K/s, 1)``
  * Kolmogorov state ``(2, N, N)``   -> observation ``(N/s, N/s, 2)``

Baseline initializations fill in the unobserved points either with the
climatological mean (Lorenz96) or by periodic bicubic interpolation
(Kolmogorov).  The whitening transform maps states to approximately
uncorrelated variables using the empirical covariance of stationary
samples, with the spectrum floored for positive definiteness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.container import (atomic_write, read_metadata, read_named_tensors,
                             write_metadata, write_named_tensors)
from .core.tape import Var

VALUES = "values"          # trailing state axis, e.g. Lorenz96 (K,)
PLANAR = "planar"          # channels-first planes, e.g. Kolmogorov (2, N, N)


@dataclass(frozen=True)
class ObservationOp:
    """Strided subsampling observation operator."""

    strides: tuple
    layout: str

    @staticmethod
    def lorenz96(stride: int = 4) -> "ObservationOp":
        return ObservationOp((int(stride),), VALUES)

    @staticmethod
    def kolmogorov(stride: int = 16) -> "ObservationOp":
        return ObservationOp((int(stride), int(stride)), PLANAR)


def observe(x, op: ObservationOp):
    """Subsample one physics state into its channels-last observation."""
    if op.layout == VALUES:
        y = ops.subsample(x, op.strides, (0,))
        k_obs = np.shape(y)[0]
        return ops.reshape(y, (k_obs, 1))
    y = ops.subsample(x, op.strides, (1, 2))
    return ops.transpose(y, (1, 2, 0))


def observe_window(traj, op: ObservationOp) -> np.ndarray:
    """Observe every state of a trajectory array -> (T+1, obs...)."""
    return np.stack([np.asarray(ops.value_of(observe(s, op))) for s in traj])


def averaging_init(obs, climatological_mean: np.ndarray, op: ObservationOp) -> np.ndarray:
    """Observed grid points copied exactly; the rest set to the
    climatological mean (the least-squares constant estimate)."""
    obs = np.asarray(ops.value_of(obs), dtype=np.float64)
    state = np.array(climatological_mean, dtype=np.float64)
    if op.layout == VALUES:
        (s,) = op.strides
        if state[::s].shape + (1,) != obs.shape:
            raise ValueError(f"observation shape {obs.shape} incompatible with state")
        state[::s] = obs[:, 0]
        return state
    s0, s1 = op.strides
    if state[0, ::s0, ::s1].shape != obs.shape[:2] or obs.shape[2] != 2:
        raise ValueError(f"observation shape {obs.shape} incompatible with state")
    state[0, ::s0, ::s1] = obs[:, :, 0]
    state[1, ::s0, ::s1] = obs[:, :, 1]
    return state


def _spline_upsample(x, factor: int, axis: int) -> np.ndarray:
    """Periodic cubic-spline interpolation by an integer factor along one axis."""
    from scipy.interpolate import CubicSpline

    n = x.shape[axis]
    wrap = np.concatenate([x, np.take(x, [0], axis=axis)], axis=axis)
    spline = CubicSpline(np.arange(n + 1), wrap, axis=axis, bc_type="periodic")
    return spline(np.arange(n * factor) / factor)


def interpolation_init(obs, op: ObservationOp) -> np.ndarray:
    """Periodic bicubic-spline upsampling of a 2d observation to the grid."""
    if op.layout != PLANAR:
        raise ValueError("interpolation initialization requires 2d observations")
    x = np.asarray(ops.value_of(obs), dtype=np.float64)  # (n0, n1, 2)
    s0, s1 = op.strides
    if s0 > 1:
        x = _spline_upsample(x, s0, 0)
    if s1 > 1:
        x = _spline_upsample(x, s1, 1)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# whitening
# ---------------------------------------------------------------------------

class WhiteningError(ValueError):
    """Invalid fit input or mismatched application."""


@dataclass(frozen=True)
class WhiteningTransform:
    """Forward map C^{-1/2} and inverse map C^{1/2} over flattened states."""

    kind: str                 # "full" | "diagonal"
    forward: np.ndarray       # (D, D) or (D,)
    inverse: np.ndarray
    floor: float
    n_samples: int
    model: str = ""

    @property
    def dim(self) -> int:
        return self.forward.shape[0]

    def apply_forward(self, x):
        """xi = C^{-1/2} x (taped-compatible)."""
        if self.kind == "diagonal":
            return ops.mul(x, self.forward)
        return ops.matmul(self.forward, x)

    def apply_inverse(self, xi):
        """x = C^{1/2} xi (taped-compatible)."""
        if self.kind == "diagonal":
            return ops.mul(xi, self.inverse)
        return ops.matmul(self.inverse, xi)


def fit_whitening(samples, floor: float = 1e-6, kind: str = "full",
                  model: str = "") -> WhiteningTransform:
    """Empirical-covariance whitening with an eigenvalue floor.

    ``samples`` is ``(n, D)`` (or anything reshapeable to it); requires
    ``n >= 2``.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n, d = x.shape
    if n < 2:
        raise WhiteningError("need at least 2 samples to fit a covariance")
    if kind == "diagonal":
        var = np.maximum(x.var(axis=0, ddof=1), floor)
        fwd = 1.0 / np.sqrt(var)
        inv = np.sqrt(var)
        return WhiteningTransform("diagonal", fwd, inv, floor, n, model)
    if kind != "full":
        raise WhiteningError(f"unknown whitening kind {kind!r}")
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, floor)
    fwd = (eigvecs * (1.0 / np.sqrt(eigvals))) @ eigvecs.T
    inv = (eigvecs * np.sqrt(eigvals)) @ eigvecs.T
    return WhiteningTransform("full", fwd, inv, floor, n, model)


def whiten(x, w: WhiteningTransform):
    """xi = C^{-1/2} x over the flattened state."""
    xv = x.value if isinstance(x, Var) else ops.value_of(x)
    if np.size(xv) != w.dim:
        raise WhiteningError(f"dimension mismatch: {np.size(xv)} != {w.dim}")
    flat = x if np.ndim(xv) == 1 else ops.reshape(x, (w.dim,))
    return w.apply_forward(flat)


def unwhiten(xi, w: WhiteningTransform):
    """x = C^{1/2} xi over the flattened state."""
    xv = xi.value if isinstance(xi, Var) else ops.value_of(xi)
    if np.size(xv) != w.dim:
        raise WhiteningError(f"dimension mismatch: {np.size(xv)} != {w.dim}")
    return w.apply_inverse(xi)


def whitening_identity_error(w: WhiteningTransform) -> float:
    """Max-entry error of forward . inverse against the identity."""
    if w.kind == "diagonal":
        return float(np.max(np.abs(w.forward * w.inverse - 1.0)))
    prod = w.forward @ w.inverse
    return float(np.max(np.abs(prod - np.eye(w.dim))))


def save_whitening(path, w: WhiteningTransform) -> None:
    def writer(f):
        write_metadata(f, {"kind": w.kind, "floor": w.floor,
                           "n_samples": w.n_samples, "model": w.model})
        write_named_tensors(f, {"forward": w.forward, "inverse": w.inverse})

    atomic_write(path, writer)


def load_whitening(path) -> WhiteningTransform:
    with open(path, "rb") as f:
        meta = read_metadata(f)
        tensors = read_named_tensors(f)
    return WhiteningTransform(meta["kind"], tensors["forward"].numpy(),
                              tensors["inverse"].numpy(), float(meta["floor"]),
                              int(meta["n_samples"]), meta.get("model", ""))


def climatological_mean(samples) -> np.ndarray:
    """Mean state over stationary samples (leading axis)."""
    return np.asarray(samples, dtype=np.float64).mean(axis=0)
