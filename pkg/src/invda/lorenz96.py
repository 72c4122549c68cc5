"""Single-level Lorenz96 model.

Tendency, RK4 stepping, differentiable window integration and
stationary-regime sampling.  States are shaped ``(..., K)``; leading axes
are independent ensemble members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import ops
from .core.tape import Var

DIVERGENCE_LIMIT = 1e3


class DivergenceError(RuntimeError):
    """State left the physically plausible range during integration."""


@dataclass(frozen=True)
class L96Params:
    """Grid size, forcing and snapshot increment."""

    k: int = 40
    forcing: float = 8.0
    dt: float = 0.1

    def __post_init__(self):
        if self.k < 4:
            raise ValueError(f"grid size must be >= 4, got {self.k}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


def _check_state(x, params: L96Params):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.k:
        raise ValueError(f"state length {x.shape[-1]} != K={params.k}")
    return x


def _guard(x):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
        raise DivergenceError("Lorenz96 state diverged")
    return x


def tendency(x, params: L96Params) -> np.ndarray:
    """dX_k/dt = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F, periodic in k."""
    return kernels.l96_tendency(_check_state(x, params), params.forcing)


def step(x, params: L96Params) -> np.ndarray:
    """One classical RK4 step of size ``params.dt``."""
    y = kernels.l96_rk4_step(_check_state(x, params), params.dt, params.forcing)
    return _guard(y)


def integrate(x0, params: L96Params, n_steps: int):
    """Trajectory of ``n_steps + 1`` states; differentiable end to end.

    Accepts a tape Var or a plain state; the Var path records one custom
    node whose reverse rule is the hand-derived RK4 adjoint, recomputing
    stage values from the stored snapshots.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if isinstance(x0, Var):
        x0v = _check_state(x0.value, params)
        traj = kernels.l96_rollout(x0v, n_steps, params.dt, params.forcing)
        _guard(traj)

        def vjp(g_traj):
            return (kernels.l96_rollout_vjp(traj, g_traj, params.dt, params.forcing),)

        return ops.custom(traj, (x0,), vjp)
    x0v = _check_state(x0, params)
    if x0v.ndim == 1:
        traj = kernels.l96_rollout(x0v, n_steps, params.dt, params.forcing)
    else:
        traj = kernels.pyimpl.l96_rollout(x0v, n_steps, params.dt, params.forcing)
    return _guard(traj)


def spinup(x, params: L96Params, n_steps: int) -> np.ndarray:
    """Final state after ``n_steps`` RK4 steps (no trajectory storage)."""
    x = _check_state(x, params).copy()
    for _ in range(n_steps):
        x = kernels.l96_rk4_step(x, params.dt, params.forcing)
        _guard(x)
    return x


def sample_stationary(params: L96Params, seed, n_samples: int | None = None,
                      spinup_steps: int = 1000) -> np.ndarray:
    """States from the statistically stationary regime.

    Members start from independent uniform draws in ``[F-1, F+1]^K`` and
    discard ``spinup_steps`` snapshots; deterministic given the seed.
    """
    if spinup_steps < 500:
        raise ValueError("spinup_steps must be >= 500 to reach stationarity")
    rng = np.random.default_rng(seed)
    n = 1 if n_samples is None else int(n_samples)
    x0 = rng.uniform(params.forcing - 1.0, params.forcing + 1.0, size=(n, params.k))
    x = spinup(x0, params, spinup_steps)
    return x[0] if n_samples is None else x
