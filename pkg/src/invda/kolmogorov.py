"""Differentiable 2d incompressible Navier-Stokes with Kolmogorov forcing.

Pseudo-spectral vorticity formulation on the periodic [0, 2pi]^2 grid:
the solenoidal part of the velocity is carried as packed vorticity
coefficients, the (unrepresented) mean flow as a 2-vector evolved exactly
under the linear damping.  Advection is evaluated pseudo-spectrally with
2/3-rule dealiasing; viscosity and damping enter through an integrating
factor around classical RK4.

The snapshot step is differentiable through a hand-derived adjoint that
checkpoints the entry state of every inner step and recomputes stage
values during the reverse sweep.

Velocity fields are ``(..., 2, N, N)`` with components ``u_x, u_y`` on the
grid ``field[i, j] = f(x_i, y_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.spectral import (dealias_mask, hermitian_weights, irfft2, irfft2_vjp,
                            rfft2, rfft2_vjp, wavenumbers)
from .core.tape import Var

CFL_LIMIT = 0.5


class StabilityError(RuntimeError):
    """CFL violation or non-finite state during integration."""


@dataclass(frozen=True)
class KolmogorovParams:
    """Grid, physics and stepping configuration."""

    n: int = 64
    viscosity: float = 1e-2
    forcing_wavenumber: int = 4
    damping: float = 0.1
    substeps: int = 25
    dt_inner: float = 0.18 / 25
    forcing_amplitude: float = 1.0  # 0 disables the body force (test configs)

    def __post_init__(self):
        if self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"grid size must be a power of two >= 8, got {self.n}")
        # zero viscosity/damping permitted for analytic test configurations
        if self.viscosity < 0 or self.damping < 0:
            raise ValueError("viscosity and damping must be non-negative")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.dt_inner <= 0:
            raise ValueError("dt_inner must be positive")

    @property
    def dt_snapshot(self) -> float:
        return self.substeps * self.dt_inner


class _SolverConstants:
    """Precomputed spectral symbols for one parameter set."""

    def __init__(self, p: KolmogorovParams):
        n = p.n
        kx, ky = wavenumbers(n)
        k2 = kx * kx + ky * ky
        inv_k2 = np.zeros_like(k2)
        nz = k2 > 0
        inv_k2[nz] = 1.0 / k2[nz]
        self.n = n
        self.dt = p.dt_inner
        self.mask = dealias_mask(n)
        self.sym_ux = 1j * ky * inv_k2        # velocity_x from vorticity
        self.sym_uy = -1j * kx * inv_k2       # velocity_y from vorticity
        self.sym_wx = 1j * kx                 # d/dx
        self.sym_wy = 1j * ky                 # d/dy
        lin = -p.viscosity * k2 - p.damping
        self.e_half = np.exp(lin * (0.5 * p.dt_inner))
        self.e_full = self.e_half * self.e_half
        self.m_half = float(np.exp(-p.damping * 0.5 * p.dt_inner))
        self.m_full = self.m_half * self.m_half
        # curl of the body force A sin(k y) x-hat
        y = 2.0 * np.pi * np.arange(n) / n
        kf = p.forcing_wavenumber
        f_curl = np.broadcast_to(-p.forcing_amplitude * kf * np.cos(kf * y), (n, n))
        self.f_hat = rfft2(f_curl) * self.mask
        self.weights = hermitian_weights(n)


_CONST_CACHE: dict = {}


def _consts(p: KolmogorovParams) -> _SolverConstants:
    key = (p.n, p.viscosity, p.forcing_wavenumber, p.damping, p.substeps,
           p.dt_inner, p.forcing_amplitude)
    if key not in _CONST_CACHE:
        _CONST_CACHE[key] = _SolverConstants(p)
    return _CONST_CACHE[key]


# ---------------------------------------------------------------------------
# velocity-field utilities
# ---------------------------------------------------------------------------

def grid_coordinates(n: int):
    x = 2.0 * np.pi * np.arange(n) / n
    return np.meshgrid(x, x, indexing="ij")


def make_forcing(p: KolmogorovParams) -> np.ndarray:
    """Static Kolmogorov body force sin(k y) x-hat as a (2, N, N) field."""
    _, yy = grid_coordinates(p.n)
    out = np.zeros((2, p.n, p.n))
    out[0] = p.forcing_amplitude * np.sin(p.forcing_wavenumber * yy)
    return out


def _check_field(u, n):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-3:] != (2, n, n):
        raise ValueError(f"velocity field must be (..., 2, {n}, {n}), got {u.shape}")
    return u


def divergence_max(u, p: KolmogorovParams) -> float:
    """Largest packed-spectrum divergence magnitude, normalized per mode."""
    u = _check_field(u, p.n)
    c = _consts(p)
    div = c.sym_wx * rfft2(u[..., 0, :, :]) + c.sym_wy * rfft2(u[..., 1, :, :])
    return float(np.max(np.abs(div))) / (p.n * p.n)


def project_div_free(u, p: KolmogorovParams) -> np.ndarray:
    """Spectral Leray projection onto solenoidal fields (mean preserved)."""
    u = _check_field(u, p.n)
    c = _consts(p)
    ux_h = rfft2(u[..., 0, :, :])
    uy_h = rfft2(u[..., 1, :, :])
    kx, ky = wavenumbers(p.n)
    k2 = kx * kx + ky * ky
    inv_k2 = np.zeros_like(k2)
    inv_k2[k2 > 0] = 1.0 / k2[k2 > 0]
    dot = (kx * ux_h + ky * uy_h) * inv_k2
    out = np.empty_like(u)
    out[..., 0, :, :] = irfft2(ux_h - kx * dot, p.n)
    out[..., 1, :, :] = irfft2(uy_h - ky * dot, p.n)
    return out


def vorticity(u, p: KolmogorovParams) -> np.ndarray:
    """Curl du_y/dx - du_x/dy via spectral differentiation."""
    u = _check_field(u, p.n)
    c = _consts(p)
    w_hat = (c.sym_wx * rfft2(u[..., 1, :, :]) - c.sym_wy * rfft2(u[..., 0, :, :]))
    return irfft2(w_hat, p.n)


def _to_spectral(u, c: _SolverConstants):
    """Velocity -> (dealiased packed vorticity, mean-flow vector)."""
    ux_h = rfft2(u[..., 0, :, :])
    uy_h = rfft2(u[..., 1, :, :])
    w_hat = (c.sym_wx * uy_h - c.sym_wy * ux_h) * c.mask
    mean_uv = u.mean(axis=(-2, -1))  # (..., 2)
    return w_hat, mean_uv


def _to_spectral_vjp(g_what, g_mean, c: _SolverConstants):
    g_what = g_what * c.mask
    gx = rfft2_vjp(-np.conj(c.sym_wy) * g_what, c.n)
    gy = rfft2_vjp(np.conj(c.sym_wx) * g_what, c.n)
    gu = np.stack([gx, gy], axis=-3)
    gu += g_mean[..., :, None, None] / (c.n * c.n)
    return gu


def _from_spectral(w_hat, mean_uv, c: _SolverConstants):
    ux = irfft2(c.sym_ux * w_hat, c.n) + mean_uv[..., 0, None, None]
    uy = irfft2(c.sym_uy * w_hat, c.n) + mean_uv[..., 1, None, None]
    return np.stack([ux, uy], axis=-3)


def _from_spectral_vjp(gu, c: _SolverConstants):
    gx_h = irfft2_vjp(gu[..., 0, :, :], c.n)
    gy_h = irfft2_vjp(gu[..., 1, :, :], c.n)
    g_what = np.conj(c.sym_ux) * gx_h + np.conj(c.sym_uy) * gy_h
    g_mean = gu.sum(axis=(-2, -1))
    return g_what, g_mean


# ---------------------------------------------------------------------------
# inner step: integrating-factor RK4 on the dealiased vorticity
# ---------------------------------------------------------------------------

def _nonlinear(w_hat, mean_uv, c: _SolverConstants, want_stash: bool):
    """Forcing-plus-advection tendency; optional stash for the adjoint."""
    q = np.stack([c.sym_ux * w_hat, c.sym_uy * w_hat,
                  c.sym_wx * w_hat, c.sym_wy * w_hat], axis=-3)
    phys = irfft2(q, c.n)
    ux = phys[..., 0, :, :] + mean_uv[..., 0, None, None]
    uy = phys[..., 1, :, :] + mean_uv[..., 1, None, None]
    wx = phys[..., 2, :, :]
    wy = phys[..., 3, :, :]
    adv = ux * wx + uy * wy
    n_hat = -c.mask * rfft2(adv) + c.f_hat
    if want_stash:
        return n_hat, (ux, uy, wx, wy)
    umax = max(float(np.max(np.abs(ux))), float(np.max(np.abs(uy))))
    return n_hat, umax


def _nonlinear_vjp(stash, g_nhat, c: _SolverConstants):
    ux, uy, wx, wy = stash
    g_adv = rfft2_vjp(-c.mask * g_nhat, c.n)
    g_ux = g_adv * wx
    g_uy = g_adv * wy
    g_wx = g_adv * ux
    g_wy = g_adv * uy
    g_mean = np.stack([g_ux.sum(axis=(-2, -1)), g_uy.sum(axis=(-2, -1))], axis=-1)
    g_what = (np.conj(c.sym_ux) * irfft2_vjp(g_ux, c.n)
              + np.conj(c.sym_uy) * irfft2_vjp(g_uy, c.n)
              + np.conj(c.sym_wx) * irfft2_vjp(g_wx, c.n)
              + np.conj(c.sym_wy) * irfft2_vjp(g_wy, c.n))
    return g_what, g_mean


def _inner_forward(w_hat, mean_uv, c: _SolverConstants, want_stash: bool = False):
    """One IF-RK4 inner step.  Returns the new state plus either the largest
    advecting velocity (for the CFL guard) or the stage stash."""
    h = c.dt
    mean2 = c.m_half * mean_uv
    mean4 = c.m_full * mean_uv

    k1, s1 = _nonlinear(w_hat, mean_uv, c, want_stash)
    a2 = c.e_half * (w_hat + (0.5 * h) * k1)
    k2, s2 = _nonlinear(a2, mean2, c, want_stash)
    a3 = c.e_half * w_hat + (0.5 * h) * k2
    k3, s3 = _nonlinear(a3, mean2, c, want_stash)
    a4 = c.e_full * w_hat + h * (c.e_half * k3)
    k4, s4 = _nonlinear(a4, mean4, c, want_stash)

    w_next = c.e_full * w_hat + (h / 6.0) * (c.e_full * k1
                                             + 2.0 * c.e_half * (k2 + k3) + k4)
    if want_stash:
        return w_next, mean4, (s1, s2, s3, s4, a2, a3, a4)
    return w_next, mean4, s1  # s1 is umax of the first stage


def _inner_vjp(w_hat, mean_uv, g_next, g_mean_next, c: _SolverConstants,
               stash=None):
    """Adjoint of one inner step evaluated at its entry state."""
    h = c.dt
    if stash is None:
        _, _, stash = _inner_forward(w_hat, mean_uv, c, want_stash=True)
    s1, s2, s3, s4, a2, a3, a4 = stash

    g_w = c.e_full * g_next
    g_k1 = (h / 6.0) * (c.e_full * g_next)
    g_k2 = (h / 3.0) * (c.e_half * g_next)
    g_k3 = (h / 3.0) * (c.e_half * g_next)
    g_k4 = (h / 6.0) * g_next
    g_mean = c.m_full * g_mean_next
    g_mean2 = np.zeros_like(g_mean)

    ga4, gm4 = _nonlinear_vjp(s4, g_k4, c)
    g_w = g_w + c.e_full * ga4
    g_k3 = g_k3 + h * (c.e_half * ga4)
    g_mean = g_mean + c.m_full * gm4

    ga3, gm3 = _nonlinear_vjp(s3, g_k3, c)
    g_w = g_w + c.e_half * ga3
    g_k2 = g_k2 + (0.5 * h) * ga3
    g_mean2 = g_mean2 + gm3

    ga2, gm2 = _nonlinear_vjp(s2, g_k2, c)
    g_w = g_w + c.e_half * ga2
    g_k1 = g_k1 + (0.5 * h) * (c.e_half * ga2)
    g_mean2 = g_mean2 + gm2

    g_mean = g_mean + c.m_half * g_mean2

    gw1, gm1 = _nonlinear_vjp(s1, g_k1, c)
    g_w = g_w + gw1
    g_mean = g_mean + gm1
    return g_w, g_mean


def _cfl_check(umax: float, p: KolmogorovParams):
    cfl = umax * p.dt_inner * p.n / (2.0 * np.pi)
    if not np.isfinite(cfl) or cfl > CFL_LIMIT:
        raise StabilityError(f"CFL number {cfl:.3f} exceeds {CFL_LIMIT}")


def ns_inner_step(u, p: KolmogorovParams) -> np.ndarray:
    """One inner step of size ``dt_inner`` on a velocity field."""
    u = _check_field(u, p.n)
    c = _consts(p)
    _cfl_check(float(np.max(np.abs(u))), p)
    w_hat, mean_uv = _to_spectral(u, c)
    w_next, mean_next, umax = _inner_forward(w_hat, mean_uv, c)
    _cfl_check(umax, p)
    return _from_spectral(w_next, mean_next, c)


# ---------------------------------------------------------------------------
# snapshot step: ``substeps`` inner steps with a checkpointed adjoint
# ---------------------------------------------------------------------------

#: diagnostics of the most recent differentiable snapshot step
last_snapshot_stored_states = 0


def _snapshot_forward(u, p: KolmogorovParams, keep_stash: bool):
    c = _consts(p)
    w_hat, mean_uv = _to_spectral(u, c)
    states = [(w_hat, mean_uv)]
    stashes = [] if keep_stash else None
    for _ in range(p.substeps):
        if keep_stash:
            w_hat, mean_uv, stash = _inner_forward(w_hat, mean_uv, c, want_stash=True)
            stashes.append(stash)
            umax = max(float(np.max(np.abs(stash[0][0]))),
                       float(np.max(np.abs(stash[0][1]))))
        else:
            w_hat, mean_uv, umax = _inner_forward(w_hat, mean_uv, c)
        _cfl_check(umax, p)
        states.append((w_hat, mean_uv))
    u_next = _from_spectral(w_hat, mean_uv, c)
    if not np.all(np.isfinite(u_next)):
        raise StabilityError("velocity field diverged")
    return u_next, states, stashes


def ns_snapshot_step(u, p: KolmogorovParams, checkpoint: bool = True):
    """Advance one snapshot interval (``substeps`` inner steps).

    Differentiable: accepts a tape Var and registers one custom node.  With
    ``checkpoint=True`` only the entry state of each inner step is stored
    (``substeps + 1`` states) and stage values are recomputed during the
    reverse sweep; ``checkpoint=False`` additionally stores every stage
    value, trading memory for the recomputation.
    """
    global last_snapshot_stored_states
    c = _consts(p)
    if isinstance(u, Var):
        uv = _check_field(u.value, p.n)
        u_next, states, stashes = _snapshot_forward(uv, p, keep_stash=not checkpoint)
        last_snapshot_stored_states = len(states)

        def vjp(g_u):
            g_what, g_mean = _from_spectral_vjp(g_u, c)
            for t in range(p.substeps - 1, -1, -1):
                w_t, m_t = states[t]
                stash = None if stashes is None else stashes[t]
                g_what, g_mean = _inner_vjp(w_t, m_t, g_what, g_mean, c, stash=stash)
            return (_to_spectral_vjp(g_what, g_mean, c),)

        return ops.custom(u_next, (u,), vjp)

    uv = _check_field(u, p.n)
    u_next, states, _ = _snapshot_forward(uv, p, keep_stash=False)
    last_snapshot_stored_states = len(states)
    return u_next


def integrate(u0, p: KolmogorovParams, n_snapshots: int, checkpoint: bool = True):
    """Sequence of ``n_snapshots + 1`` snapshot states (list; Vars when taped)."""
    states = [u0]
    for _ in range(n_snapshots):
        states.append(ns_snapshot_step(states[-1], p, checkpoint=checkpoint))
    return states


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def random_initial_field(p: KolmogorovParams, seed, n_samples: int | None = None
                         ) -> np.ndarray:
    """Divergence-free random field with the energy peaked near wavenumber 4,
    normalized to unit RMS velocity; deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = 1 if n_samples is None else int(n_samples)
    c = _consts(p)
    kx, ky = wavenumbers(p.n)
    kmag = np.sqrt(kx * kx + ky * ky)
    envelope = kmag * np.exp(-((kmag - 4.0) ** 2) / (2.0 * 0.8 ** 2))
    noise = rng.normal(size=(n, p.n, p.n))
    w_hat = rfft2(noise) * envelope * c.mask
    u = _from_spectral(w_hat, np.zeros((n, 2)), c)
    rms = np.sqrt(np.mean(u ** 2, axis=(-3, -2, -1), keepdims=True))
    u = u / rms
    return u[0] if n_samples is None else u


def sample_stationary(p: KolmogorovParams, seed, n_samples: int | None = None,
                      spinup_snapshots: int = 60, chunk: int = 256) -> np.ndarray:
    """Velocity fields from the statistically stationary regime.

    Every member starts from an independent random field and discards
    ``spinup_snapshots`` snapshot intervals; deterministic per seed.
    """
    if spinup_snapshots < 1:
        raise ValueError("spinup_snapshots must be >= 1")
    n = 1 if n_samples is None else int(n_samples)
    u0 = random_initial_field(p, seed, n_samples=n)
    c = _consts(p)
    out = np.empty_like(u0)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        w_hat, mean_uv = _to_spectral(u0[lo:hi], c)
        for _ in range(spinup_snapshots * p.substeps):
            w_hat, mean_uv, umax = _inner_forward(w_hat, mean_uv, c)
            _cfl_check(umax, p)
        out[lo:hi] = _from_spectral(w_hat, mean_uv, c)
    if not np.all(np.isfinite(out)):
        raise StabilityError("spinup diverged")
    return out[0] if n_samples is None else out
