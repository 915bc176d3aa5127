"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature and
semantics; :mod:`opinfnet.kernels` picks one at import time.

Packed layouts (all row-major over a triangle):

* lower, diagonal included: entry ``(i, j)`` with ``j <= i`` at ``i*(i+1)//2 + j``
* strictly lower: entry ``(i, j)`` with ``j < i`` at ``i*(i-1)//2 + j``
"""
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def lower_index(k):
    return np.tril_indices(k)


@lru_cache(maxsize=None)
def strict_index(k):
    return np.tril_indices(k, -1)


def n_lower(k):
    return k * (k + 1) // 2


def n_strict(k):
    return k * (k - 1) // 2


def burgers_rhs(u, dx):
    up = np.roll(u, -1)
    flux = (u * u + u * up + up * up) / 6.0
    return -(flux - np.roll(flux, 1)) / dx


def heat_rhs(T, nx, ny, hx, hy, k0, k1, tc, w):
    T2 = T.reshape(nx + 1, ny + 1)
    kap = 0.5 * (k0 + k1) + 0.5 * (k1 - k0) * np.tanh((T2 - tc) / w)
    out = np.zeros_like(T2)
    c = T2[1:-1, 1:-1]
    kc = kap[1:-1, 1:-1]
    ke = 0.5 * (kc + kap[2:, 1:-1])
    kw = 0.5 * (kc + kap[:-2, 1:-1])
    kn = 0.5 * (kc + kap[1:-1, 2:])
    ks = 0.5 * (kc + kap[1:-1, :-2])
    out[1:-1, 1:-1] = (
        (ke * (T2[2:, 1:-1] - c) - kw * (c - T2[:-2, 1:-1])) / (hx * hx)
        + (kn * (T2[1:-1, 2:] - c) - ks * (c - T2[1:-1, :-2])) / (hy * hy)
        + 1.0
    )
    return out.reshape(-1)


def unpack_lower_batch(P, k):
    out = np.zeros((P.shape[0], k, k))
    r, c = lower_index(k)
    out[:, r, c] = P
    return out


def unpack_strict_batch(P, k):
    out = np.zeros((P.shape[0], k, k))
    r, c = strict_index(k)
    out[:, r, c] = P
    return out


def skew_apply(P, X):
    k = X.shape[1]
    S = unpack_strict_batch(P, k)
    return np.einsum("bij,bj->bi", S, X) - np.einsum("bji,bj->bi", S, X)


def skew_vjp(P, X, G):
    k = X.shape[1]
    r, c = strict_index(k)
    dP = G[:, r] * X[:, c] - G[:, c] * X[:, r]
    dX = -skew_apply(P, G)
    return dP, dX


def spsd_apply(P, X):
    k = X.shape[1]
    L = unpack_lower_batch(P, k)
    z = np.einsum("bij,bi->bj", L, X)
    return np.einsum("bij,bj->bi", L, z)


def spsd_vjp(P, X, G):
    k = X.shape[1]
    L = unpack_lower_batch(P, k)
    z = np.einsum("bij,bi->bj", L, X)
    wv = np.einsum("bij,bi->bj", L, G)
    r, c = lower_index(k)
    dP = G[:, r] * z[:, c] + X[:, r] * wv[:, c]
    dX = np.einsum("bij,bj->bi", L, wv)
    return dP, dX


def sqr_pack(X):
    r, c = lower_index(X.shape[1])
    return X[:, r] * X[:, c]
