"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy fallback
is used. Set ``OPINFNET_KERNELS=python`` to force the fallback.
"""
import importlib
import os

import numpy as np

from . import _kernels_py

_NAMES = ("burgers_rhs", "heat_rhs", "skew_apply", "skew_vjp",
          "spsd_apply", "spsd_vjp", "sqr_pack")


def load_backend(name):
    """Return the kernel module for ``name`` ("cython" or "python")."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("opinfnet._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


def _select():
    wanted = os.environ.get("OPINFNET_KERNELS", "").strip().lower()
    if wanted == "python":
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        if wanted == "cython":
            raise
        return "python", _kernels_py


BACKEND, _impl = _select()


def _c2(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def burgers_rhs(u, dx):
    return _impl.burgers_rhs(_c2(u), float(dx))


def heat_rhs(T, nx, ny, hx, hy, k0, k1, tc, w):
    return _impl.heat_rhs(_c2(T), int(nx), int(ny), float(hx), float(hy),
                          float(k0), float(k1), float(tc), float(w))


def skew_apply(P, X):
    return _impl.skew_apply(_c2(P), _c2(X))


def skew_vjp(P, X, G):
    return _impl.skew_vjp(_c2(P), _c2(X), _c2(G))


def spsd_apply(P, X):
    return _impl.spsd_apply(_c2(P), _c2(X))


def spsd_vjp(P, X, G):
    return _impl.spsd_vjp(_c2(P), _c2(X), _c2(G))


def sqr_pack(X):
    return _impl.sqr_pack(_c2(X))
