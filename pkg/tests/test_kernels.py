import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opinfnet import kernels, _kernels_py

BACKENDS = [kernels.load_backend(b) for b in kernels.available_backends()]
IDS = kernels.available_backends()


def dense_lower(p, k):
    L = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            L[i, j] = p[i * (i + 1) // 2 + j]
    return L


def dense_strict(p, k):
    S = np.zeros((k, k))
    for i in range(k):
        for j in range(i):
            S[i, j] = p[i * (i - 1) // 2 + j]
    return S


@pytest.fixture(params=BACKENDS, ids=IDS)
def impl(request):
    return request.param


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    with pytest.raises(ValueError):
        kernels.load_backend("fortran")


def test_burgers_matches_hand_formula(impl, rng):
    u = rng.normal(size=37)
    dx = 0.3
    out = impl.burgers_rhs(u, dx)
    ref = np.empty_like(u)
    n = len(u)
    for j in range(n):
        a, b, c = u[j - 1], u[j], u[(j + 1) % n]
        ref[j] = -((b * b + b * c + c * c) - (a * a + a * b + b * b)) / 6.0 / dx
    np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-13)


def test_heat_backends_agree(rng):
    T = rng.uniform(0, 0.6, size=13 * 9)
    args = (12, 8, 1 / 12, 1 / 8, 0.01, 0.3, 0.3, 0.02)
    ref = _kernels_py.heat_rhs(T, *args)
    for impl in BACKENDS:
        np.testing.assert_allclose(impl.heat_rhs(T, *args), ref, rtol=1e-13, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 7), b=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_skew_apply_dense_oracle(k, b, seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(b, k * (k - 1) // 2))
    X = r.normal(size=(b, k))
    for impl in BACKENDS:
        out = impl.skew_apply(P, X)
        for n in range(b):
            S = dense_strict(P[n], k)
            np.testing.assert_allclose(out[n], (S - S.T) @ X[n], atol=1e-12)
            assert abs(X[n] @ out[n]) <= 1e-12 * max(1.0, np.linalg.norm(X[n]) * np.linalg.norm(out[n]))


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 7), b=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_spsd_apply_dense_oracle(k, b, seed):
    r = np.random.default_rng(seed)
    P = r.normal(size=(b, k * (k + 1) // 2))
    X = r.normal(size=(b, k))
    for impl in BACKENDS:
        out = impl.spsd_apply(P, X)
        for n in range(b):
            L = dense_lower(P[n], k)
            np.testing.assert_allclose(out[n], L @ L.T @ X[n], atol=1e-12)
            assert X[n] @ out[n] >= -1e-12


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_sqr_pack_order(k, seed):
    X = np.random.default_rng(seed).normal(size=(3, k))
    ref = np.array([[x[i] * x[j] for i in range(k) for j in range(i + 1)] for x in X])
    for impl in BACKENDS:
        np.testing.assert_allclose(impl.sqr_pack(X), ref, rtol=1e-15)


def _fd_check(apply, vjp, P, X, G, h=1e-6):
    dP, dX = vjp(P, X, G)
    for arr, grad in ((P, dP), (X, dX)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = np.sum(G * apply(P, X))
            arr[idx] = old - h
            fm = np.sum(G * apply(P, X))
            arr[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_skew_vjp_finite_difference(impl, rng, k):
    P = rng.normal(size=(3, k * (k - 1) // 2))
    X, G = rng.normal(size=(3, k)), rng.normal(size=(3, k))
    _fd_check(impl.skew_apply, impl.skew_vjp, P, X, G)


@pytest.mark.parametrize("k", [1, 2, 5])
def test_spsd_vjp_finite_difference(impl, rng, k):
    P = rng.normal(size=(3, k * (k + 1) // 2))
    X, G = rng.normal(size=(3, k)), rng.normal(size=(3, k))
    _fd_check(impl.spsd_apply, impl.spsd_vjp, P, X, G)


def test_read_only_inputs_accepted(impl):
    P = np.broadcast_to(np.arange(3.0), (4, 3))
    X = np.ones((4, 3))
    X.setflags(write=False)
    assert impl.skew_apply(np.ascontiguousarray(P), X).shape == (4, 3)


def test_dispatch_casts_inputs():
    out = kernels.spsd_apply(np.ones((2, 3), dtype=np.float32), [[1, 0], [0, 1]])
    assert out.dtype == np.float64
