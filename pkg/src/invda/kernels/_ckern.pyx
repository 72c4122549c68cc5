# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython twins of the hot kernels (im2col/col2im and Lorenz96 rollout).

Matrix products stay in BLAS via numpy; these routines remove the python
per-offset roll/stack overhead and the interpreter cost of the RK4 loops.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


# ---------------------------------------------------------------------------
# im2col / col2im, 2d
# ---------------------------------------------------------------------------

def im2col2d(double[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], S = x.shape[2], Ci = x.shape[3]
    cdef cnp.ndarray[double, ndim=2] cols = np.zeros((B * T * S, 9 * Ci))
    cdef double[:, ::1] c = cols
    cdef Py_ssize_t b, t, s, dt, ds, ci, tt, ss, row, col0
    with nogil:
        for b in range(B):
            for t in range(T):
                for dt in range(3):
                    tt = t + dt - 1
                    if tt < 0 or tt >= T:
                        continue
                    for s in range(S):
                        row = (b * T + t) * S + s
                        for ds in range(3):
                            ss = s + ds - 1
                            if ss < 0:
                                ss += S
                            elif ss >= S:
                                ss -= S
                            col0 = (dt * 3 + ds) * Ci
                            for ci in range(Ci):
                                c[row, col0 + ci] = x[b, tt, ss, ci]
    return cols


def col2im2d(double[:, ::1] gcols, Py_ssize_t B, Py_ssize_t T, Py_ssize_t S, Py_ssize_t Ci):
    cdef cnp.ndarray[double, ndim=4] gx = np.zeros((B, T, S, Ci))
    cdef double[:, :, :, ::1] g = gx
    cdef Py_ssize_t b, t, s, dt, ds, ci, tt, ss, row, col0
    with nogil:
        for b in range(B):
            for t in range(T):
                for dt in range(3):
                    tt = t + dt - 1
                    if tt < 0 or tt >= T:
                        continue
                    for s in range(S):
                        row = (b * T + t) * S + s
                        for ds in range(3):
                            ss = s + ds - 1
                            if ss < 0:
                                ss += S
                            elif ss >= S:
                                ss -= S
                            col0 = (dt * 3 + ds) * Ci
                            for ci in range(Ci):
                                g[b, tt, ss, ci] += gcols[row, col0 + ci]
    return gx


# ---------------------------------------------------------------------------
# im2col / col2im, 3d
# ---------------------------------------------------------------------------

def im2col3d(double[:, :, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], H = x.shape[2], W = x.shape[3], Ci = x.shape[4]
    cdef cnp.ndarray[double, ndim=2] cols = np.zeros((B * T * H * W, 27 * Ci))
    cdef double[:, ::1] c = cols
    cdef Py_ssize_t b, t, h, w, dt, dh, dw, ci, tt, hh, ww, row, col0
    with nogil:
        for b in range(B):
            for t in range(T):
                for dt in range(3):
                    tt = t + dt - 1
                    if tt < 0 or tt >= T:
                        continue
                    for h in range(H):
                        for dh in range(3):
                            hh = h + dh - 1
                            if hh < 0:
                                hh += H
                            elif hh >= H:
                                hh -= H
                            for w in range(W):
                                row = ((b * T + t) * H + h) * W + w
                                for dw in range(3):
                                    ww = w + dw - 1
                                    if ww < 0:
                                        ww += W
                                    elif ww >= W:
                                        ww -= W
                                    col0 = ((dt * 3 + dh) * 3 + dw) * Ci
                                    for ci in range(Ci):
                                        c[row, col0 + ci] = x[b, tt, hh, ww, ci]
    return cols


def col2im3d(double[:, ::1] gcols, Py_ssize_t B, Py_ssize_t T, Py_ssize_t H,
             Py_ssize_t W, Py_ssize_t Ci):
    cdef cnp.ndarray[double, ndim=5] gx = np.zeros((B, T, H, W, Ci))
    cdef double[:, :, :, :, ::1] g = gx
    cdef Py_ssize_t b, t, h, w, dt, dh, dw, ci, tt, hh, ww, row, col0
    with nogil:
        for b in range(B):
            for t in range(T):
                for dt in range(3):
                    tt = t + dt - 1
                    if tt < 0 or tt >= T:
                        continue
                    for h in range(H):
                        for dh in range(3):
                            hh = h + dh - 1
                            if hh < 0:
                                hh += H
                            elif hh >= H:
                                hh -= H
                            for w in range(W):
                                row = ((b * T + t) * H + h) * W + w
                                for dw in range(3):
                                    ww = w + dw - 1
                                    if ww < 0:
                                        ww += W
                                    elif ww >= W:
                                        ww -= W
                                    col0 = ((dt * 3 + dh) * 3 + dw) * Ci
                                    for ci in range(Ci):
                                        g[b, tt, hh, ww, ci] += gcols[row, col0 + ci]
    return gx


# ---------------------------------------------------------------------------
# Lorenz96 RK4 rollout and adjoint
# ---------------------------------------------------------------------------

cdef inline void _tendency(double* x, double* out, Py_ssize_t K, double F) nogil:
    cdef Py_ssize_t k, km1, km2, kp1
    for k in range(K):
        km1 = k - 1 if k >= 1 else K - 1
        km2 = k - 2 if k >= 2 else k - 2 + K
        kp1 = k + 1 if k + 1 < K else 0
        out[k] = -x[km1] * (x[km2] - x[kp1]) - x[k] + F


cdef inline void _jtv(double* x, double* v, double* out, Py_ssize_t K) nogil:
    # transposed Jacobian of the tendency applied to v
    cdef Py_ssize_t j, jm1, jm2, jp1, jp2
    for j in range(K):
        jm1 = j - 1 if j >= 1 else K - 1
        jm2 = j - 2 if j >= 2 else j - 2 + K
        jp1 = j + 1 if j + 1 < K else 0
        jp2 = j + 2 if j + 2 < K else j + 2 - K
        out[j] = (-v[jp1] * (x[jm1] - x[jp2])
                  - v[jp2] * x[jp1]
                  + v[jm1] * x[jm2]
                  - v[j])


cdef void _rk4_step(double* x, double* y, double* k1, double* k2, double* k3,
                    double* k4, double* xs, Py_ssize_t K, double dt, double F) nogil:
    cdef Py_ssize_t i
    _tendency(x, k1, K, F)
    for i in range(K):
        xs[i] = x[i] + 0.5 * dt * k1[i]
    _tendency(xs, k2, K, F)
    for i in range(K):
        xs[i] = x[i] + 0.5 * dt * k2[i]
    _tendency(xs, k3, K, F)
    for i in range(K):
        xs[i] = x[i] + dt * k3[i]
    _tendency(xs, k4, K, F)
    for i in range(K):
        y[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


def l96_rollout(double[::1] x0, Py_ssize_t n_steps, double dt, double F):
    cdef Py_ssize_t K = x0.shape[0], t
    cdef cnp.ndarray[double, ndim=2] traj = np.empty((n_steps + 1, K))
    cdef double[:, ::1] tr = traj
    cdef cnp.ndarray[double, ndim=2] scratch = np.empty((5, K))
    cdef double[:, ::1] sc = scratch
    tr[0, :] = x0
    with nogil:
        for t in range(n_steps):
            _rk4_step(&tr[t, 0], &tr[t + 1, 0], &sc[0, 0], &sc[1, 0], &sc[2, 0],
                      &sc[3, 0], &sc[4, 0], K, dt, F)
    return traj


def l96_rollout_vjp(double[:, ::1] traj, double[:, ::1] g_traj, double dt, double F):
    cdef Py_ssize_t K = traj.shape[1], n = traj.shape[0] - 1
    cdef Py_ssize_t t, i
    cdef cnp.ndarray[double, ndim=1] lam_arr = np.array(g_traj[n], dtype=np.float64)
    cdef double[::1] lam = lam_arr
    cdef cnp.ndarray[double, ndim=2] scratch = np.empty((12, K))
    cdef double[:, ::1] sc = scratch
    cdef double *k1
    cdef double *k2
    cdef double *k3
    cdef double *x2
    cdef double *x3
    cdef double *x4
    cdef double *g1
    cdef double *g2
    cdef double *g3
    cdef double *g4
    cdef double *jt
    cdef double *gx
    k1 = &sc[0, 0]; k2 = &sc[1, 0]; k3 = &sc[2, 0]
    x2 = &sc[3, 0]; x3 = &sc[4, 0]; x4 = &sc[5, 0]
    g1 = &sc[6, 0]; g2 = &sc[7, 0]; g3 = &sc[8, 0]; g4 = &sc[9, 0]
    jt = &sc[10, 0]; gx = &sc[11, 0]
    with nogil:
        for t in range(n - 1, -1, -1):
            # recompute the step's stage states from the stored snapshot
            _tendency(&traj[t, 0], k1, K, F)
            for i in range(K):
                x2[i] = traj[t, i] + 0.5 * dt * k1[i]
            _tendency(x2, k2, K, F)
            for i in range(K):
                x3[i] = traj[t, i] + 0.5 * dt * k2[i]
            _tendency(x3, k3, K, F)
            for i in range(K):
                x4[i] = traj[t, i] + dt * k3[i]

            for i in range(K):
                g1[i] = (dt / 6.0) * lam[i]
                g2[i] = (dt / 3.0) * lam[i]
                g3[i] = (dt / 3.0) * lam[i]
                g4[i] = (dt / 6.0) * lam[i]
                gx[i] = lam[i]
            _jtv(x4, g4, jt, K)
            for i in range(K):
                gx[i] += jt[i]
                g3[i] += dt * jt[i]
            _jtv(x3, g3, jt, K)
            for i in range(K):
                gx[i] += jt[i]
                g2[i] += 0.5 * dt * jt[i]
            _jtv(x2, g2, jt, K)
            for i in range(K):
                gx[i] += jt[i]
                g1[i] += 0.5 * dt * jt[i]
            _jtv(&traj[t, 0], g1, jt, K)
            for i in range(K):
                lam[i] = gx[i] + jt[i] + g_traj[t, i]
    return lam_arr
