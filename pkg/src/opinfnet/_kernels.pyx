# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics mirror ``_kernels_py``."""
import numpy as np
from libc.math cimport tanh


def burgers_rhs(const double[::1] u, double dx):
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t j, jp
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double[::1] flux = np.empty(n)
    for j in range(n):
        jp = j + 1 if j + 1 < n else 0
        flux[j] = (u[j] * u[j] + u[j] * u[jp] + u[jp] * u[jp]) / 6.0
    for j in range(n):
        out[j] = -(flux[j] - flux[j - 1 if j > 0 else n - 1]) / dx
    return out_arr


def heat_rhs(const double[::1] T, Py_ssize_t nx, Py_ssize_t ny, double hx, double hy,
             double k0, double k1, double tc, double w):
    cdef Py_ssize_t m = ny + 1
    cdef Py_ssize_t n = (nx + 1) * m
    cdef Py_ssize_t i, j, p
    cdef double a = 0.5 * (k0 + k1), b = 0.5 * (k1 - k0)
    cdef double ihx2 = 1.0 / (hx * hx), ihy2 = 1.0 / (hy * hy)
    cdef double kc, c
    out_arr = np.zeros(n)
    cdef double[::1] out = out_arr
    cdef double[::1] kap = np.empty(n)
    for p in range(n):
        kap[p] = a + b * tanh((T[p] - tc) / w)
    for i in range(1, nx):
        for j in range(1, ny):
            p = i * m + j
            c = T[p]
            kc = kap[p]
            out[p] = (
                (0.5 * (kc + kap[p + m]) * (T[p + m] - c)
                 - 0.5 * (kc + kap[p - m]) * (c - T[p - m])) * ihx2
                + (0.5 * (kc + kap[p + 1]) * (T[p + 1] - c)
                   - 0.5 * (kc + kap[p - 1]) * (c - T[p - 1])) * ihy2
                + 1.0
            )
    return out_arr


def skew_apply(const double[:, ::1] P, const double[:, ::1] X):
    cdef Py_ssize_t nb = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t b, i, j, q
    cdef double s
    out_arr = np.zeros((nb, k))
    cdef double[:, ::1] out = out_arr
    for b in range(nb):
        q = 0
        for i in range(1, k):
            for j in range(i):
                s = P[b, q]
                out[b, i] += s * X[b, j]
                out[b, j] -= s * X[b, i]
                q += 1
    return out_arr


def skew_vjp(const double[:, ::1] P, const double[:, ::1] X, const double[:, ::1] G):
    cdef Py_ssize_t nb = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t b, i, j, q
    cdef double s
    dP_arr = np.empty((nb, P.shape[1]))
    dX_arr = np.zeros((nb, k))
    cdef double[:, ::1] dP = dP_arr
    cdef double[:, ::1] dX = dX_arr
    for b in range(nb):
        q = 0
        for i in range(1, k):
            for j in range(i):
                s = P[b, q]
                dP[b, q] = G[b, i] * X[b, j] - G[b, j] * X[b, i]
                # dX = (S - S^T)^T G = S^T G - S G
                dX[b, j] += s * G[b, i]
                dX[b, i] -= s * G[b, j]
                q += 1
    return dP_arr, dX_arr


cdef inline void _lower_t_apply(const double[:, ::1] P, const double[:, ::1] X, Py_ssize_t b,
                                Py_ssize_t k, double* z) noexcept nogil:
    # z = L^T x
    cdef Py_ssize_t i, j, q = 0
    for j in range(k):
        z[j] = 0.0
    for i in range(k):
        for j in range(i + 1):
            z[j] += P[b, q] * X[b, i]
            q += 1


def spsd_apply(const double[:, ::1] P, const double[:, ::1] X):
    cdef Py_ssize_t nb = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t b, i, j, q
    cdef double acc
    out_arr = np.empty((nb, k))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] zbuf = np.empty(k)
    cdef double* z = &zbuf[0] if k > 0 else NULL
    for b in range(nb):
        _lower_t_apply(P, X, b, k, z)
        q = 0
        for i in range(k):
            acc = 0.0
            for j in range(i + 1):
                acc += P[b, q] * z[j]
                q += 1
            out[b, i] = acc
    return out_arr


def spsd_vjp(const double[:, ::1] P, const double[:, ::1] X, const double[:, ::1] G):
    cdef Py_ssize_t nb = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t b, i, j, q
    cdef double acc
    dP_arr = np.empty((nb, P.shape[1]))
    dX_arr = np.empty((nb, k))
    cdef double[:, ::1] dP = dP_arr
    cdef double[:, ::1] dX = dX_arr
    cdef double[::1] zbuf = np.empty(k)
    cdef double[::1] wbuf = np.empty(k)
    cdef double* z = &zbuf[0] if k > 0 else NULL
    cdef double* wv = &wbuf[0] if k > 0 else NULL
    for b in range(nb):
        _lower_t_apply(P, X, b, k, z)
        _lower_t_apply(P, G, b, k, wv)
        q = 0
        for i in range(k):
            acc = 0.0
            for j in range(i + 1):
                dP[b, q] = G[b, i] * z[j] + X[b, i] * wv[j]
                acc += P[b, q] * wv[j]
                q += 1
            dX[b, i] = acc
    return dP_arr, dX_arr


def sqr_pack(const double[:, ::1] X):
    cdef Py_ssize_t nb = X.shape[0], k = X.shape[1]
    cdef Py_ssize_t b, i, j, q
    out_arr = np.empty((nb, k * (k + 1) // 2))
    cdef double[:, ::1] out = out_arr
    for b in range(nb):
        q = 0
        for i in range(k):
            for j in range(i + 1):
                out[b, q] = X[b, i] * X[b, j]
                q += 1
    return out_arr
