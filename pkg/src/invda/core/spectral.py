"""Fourier transforms on the periodic [0, 2pi]^2 grid.

Two layers:

  * :func:`spectral_transform` / :func:`inverse_spectral` expose normalized
    coefficients (the coefficient of mode ``(kx, ky)`` equals the continuous
    Fourier coefficient of a band-limited field).
  * packed real transforms (``rfft2`` et al.) plus their adjoints, which the
    flow solver composes into hand-derived step adjoints.

Grid convention: ``field[i, j] = f(x_i, y_j)`` with ``x = 2*pi*i/N`` on
axis -2 and ``y = 2*pi*j/N`` on axis -1.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as sfft


class GridError(ValueError):
    """Grid is not square / power-of-two."""


def _check_square_pow2(field):
    if field.ndim != 2 or field.shape[0] != field.shape[1]:
        raise GridError(f"expected a square 2d grid, got shape {field.shape}")
    n = field.shape[0]
    if n < 2 or (n & (n - 1)) != 0:
        raise GridError(f"grid extent must be a power of two, got {n}")
    return n


def spectral_transform(field):
    """Normalized 2d Fourier coefficients of a real square field."""
    field = np.asarray(field, dtype=np.float64)
    n = _check_square_pow2(field)
    return np.fft.fft2(field) / (n * n)


def inverse_spectral(coeffs):
    """Real field from normalized coefficients (imaginary residue dropped)."""
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    n = _check_square_pow2(coeffs.real)
    return np.fft.ifft2(coeffs * (n * n)).real


# ---------------------------------------------------------------------------
# packed real transforms and their adjoints
# ---------------------------------------------------------------------------

def rfft2(x):
    return sfft.rfft2(x, axes=(-2, -1))


def irfft2(q, n):
    return sfft.irfft2(q, s=(n, n), axes=(-2, -1))


def hermitian_weights(n):
    """Multiplicity of each packed column under conjugate symmetry."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def rfft2_vjp(g_packed, n):
    """Adjoint of ``rfft2`` (real input) under the real inner product."""
    w = hermitian_weights(n)
    return irfft2(g_packed / w, n) * (n * n)


def irfft2_vjp(g_real, n):
    """Adjoint of ``irfft2`` under the real inner product."""
    w = hermitian_weights(n)
    return rfft2(g_real) * (w / (n * n))


def wavenumbers(n):
    """Integer wavenumbers of the packed spectrum: kx (n,1), ky (1, n//2+1)."""
    kx = np.fft.fftfreq(n, d=1.0 / n).reshape(n, 1)
    ky = np.arange(n // 2 + 1, dtype=np.float64).reshape(1, n // 2 + 1)
    return kx, ky


def dealias_mask(n, cutoff=None):
    """Two-thirds-rule square mask on the packed spectrum."""
    if cutoff is None:
        cutoff = n // 3
    kx, ky = wavenumbers(n)
    return ((np.abs(kx) <= cutoff) & (np.abs(ky) <= cutoff)).astype(np.float64)
