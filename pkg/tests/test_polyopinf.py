import numpy as np
import pytest

from opinfnet import polyopinf as po
from opinfnet import reduction as red
from opinfnet.romeval import integrate_rom, relative_error


def test_sqr_pack_examples():
    np.testing.assert_array_equal(po.sqr_pack([2.0, 3.0]), [4, 6, 9])
    np.testing.assert_array_equal(po.sqr_pack([5.0]), [25])
    np.testing.assert_array_equal(po.sqr_pack([1.0, 0.0, -1.0]), [1, 0, 0, -1, 0, 1])
    assert po.sqr_pack(np.ones(7)).size == po.n_quadratic(7) == 28


def test_sqr_pack_reproduces_symmetric_tensor(rng):
    K = 4
    T = rng.normal(size=(K, K, K))
    T = 0.5 * (T + T.transpose(0, 2, 1))
    H = np.zeros((K, po.n_quadratic(K)))
    col = 0
    for i in range(K):
        for j in range(i + 1):
            H[:, col] = T[:, i, j] * (1 if i == j else 2)
            col += 1
    ops = po.PolyOperators(H=H)
    for _ in range(5):
        x = rng.normal(size=K)
        np.testing.assert_allclose(po.eval_poly_rhs(ops, x), np.einsum("kij,i,j->k", T, x, x),
                                   atol=1e-12)


def test_fit_recovers_linear(rng):
    A = rng.normal(size=(5, 5))
    x = rng.normal(size=(5, 30))
    ops = po.fit(x, A @ x, "A")
    assert np.linalg.norm(ops.A - A) <= 1e-8 * np.linalg.norm(A)


def test_fit_recovers_quadratic(rng):
    K = 3
    H = rng.normal(size=(K, po.n_quadratic(K)))
    x = rng.normal(size=(K, 40))
    ops = po.fit(x, H @ po.sqr_pack(x.T).T, "H")
    assert np.linalg.norm(ops.H - H) <= 1e-6 * np.linalg.norm(H)


def test_fit_heavy_regularization():
    ops = po.fit(np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]), "A", reg=1e14)
    assert np.max(np.abs(ops.A)) < 1e-12


def test_fit_rank_deficient_flagged():
    x = np.ones((3, 2))
    ops = po.fit(x, x, "A")
    assert ops.diagnostics["rank_deficient"]


def test_fit_errors():
    with pytest.raises(ValueError):
        po.fit(np.ones((2, 3)), np.ones((2, 3)), "Q")
    with pytest.raises(ValueError):
        po.fit(np.ones((2, 3)), np.ones((2, 3)), "A", reg=-1)


def test_vec_oracle_agrees_with_fit(rng):
    for _ in range(10):
        K = rng.integers(1, 6)
        x = rng.normal(size=(K, 3 * K + 2))
        dx = rng.normal(size=(K, 3 * K + 2))
        a = po.fit(x, dx, "A").A
        b = po.fit_vec_oracle(x, dx)
        assert np.linalg.norm(a - b) <= 1e-9


def test_vec_oracle_examples(rng):
    x = rng.normal(size=(3, 10))
    np.testing.assert_allclose(po.fit_vec_oracle(x, x), np.eye(3), atol=1e-12)
    np.testing.assert_array_equal(po.fit_vec_oracle(x, np.zeros_like(x)), 0.0)


@pytest.mark.parametrize("blocks,reg", [("A", 0.0), ("cAH", 0.3), ("AH", 1e-4), ("c", 2.0)])
def test_normal_equation_residual(rng, blocks, reg):
    x = rng.normal(size=(3, 25))
    dx = rng.normal(size=(3, 25))
    ops = po.fit(x, dx, blocks, reg)
    assert po.normal_equation_residual(x, dx, ops) <= 1e-8


def _linear_trajectory(rng, K=3, n=201):
    M = rng.normal(size=(K, K))
    A = -0.5 * np.eye(K) + 0.5 * (M - M.T)
    times = np.linspace(0, 2, n)
    x0 = rng.normal(size=K)
    run = integrate_rom(lambda y: A @ y, x0, times)
    return A, times, run.states


def test_grid_search_noiseless_linear(rng):
    A, times, X = _linear_trajectory(rng)
    ops, lam = po.grid_search(X, A @ X, X[:, 0], times, blocks="A")
    assert lam <= 1e-6
    run = integrate_rom(ops, X[:, 0], times)
    assert relative_error(run.states, X) < 1e-6


def test_grid_search_zero_targets_smallest_reg():
    X = np.ones((2, 11))
    times = np.linspace(0, 1, 11)
    ops, lam = po.grid_search(X, np.zeros_like(X), X[:, 0], times, blocks="A")
    assert lam == pytest.approx(1e-8)
    np.testing.assert_allclose(ops.A, 0.0, atol=1e-15)


def test_grid_search_failure():
    X = np.ones((1, 11)) * np.exp(np.linspace(0, 1, 11))
    times = np.linspace(0, 1, 11)
    with pytest.raises(po.SearchFailure) as info:
        po.grid_search(X, 1e4 * X, X[:, 0], times, po.RegSearchSpec((1e-8, 1e-6)), blocks="A")
    assert len(info.value.diagnostics) == 2


def test_reg_spec_default():
    v = np.array(po.RegSearchSpec().values)
    assert v.size == 40 and v[0] == pytest.approx(1e-8) and v[-1] == pytest.approx(1e3)
    with pytest.raises(ValueError):
        po.RegSearchSpec((1.0, 0.5))


def test_burgers_reproductive_k8(burgers_run):
    b = red.compute_pod(burgers_run.states, 8)
    ds = red.build_dataset(b, [burgers_run])
    ops, _ = po.grid_search(ds.x, ds.dx, ds.x[:, 0], burgers_run.times, blocks="AH")
    run = integrate_rom(ops, ds.x[:, 0], burgers_run.times)
    assert relative_error(b.V @ run.states, burgers_run.states) < 1e-2


def test_interpolate_examples(rng):
    lat = po.OperatorLattice([[0.0, 1.0]], [po.PolyOperators(A=np.zeros((2, 2))),
                                          po.PolyOperators(A=np.eye(2))])
    np.testing.assert_allclose(po.interpolate(lat, 0.5).A, 0.5 * np.eye(2))
    np.testing.assert_array_equal(po.interpolate(lat, 1.0).A, np.eye(2))
    with pytest.raises(po.ExtrapolationError):
        po.interpolate(lat, 1.5)
    np.testing.assert_allclose(po.interpolate(lat, 1.5, extrapolate=True).A, 1.5 * np.eye(2))


def test_interpolate_bilinear_exact(rng):
    a, b, c, d = rng.normal(size=(4, 2, 2))
    f = lambda m1, m2: a + b * m1 + c * m2 + d * m1 * m2
    ax1, ax2 = [0.2, 0.4], [0.3, 0.4]
    lat = po.OperatorLattice([ax1, ax2], [po.PolyOperators(A=f(m1, m2), c=np.ones(2))
                                          for m1 in ax1 for m2 in ax2])
    for m in rng.uniform([0.2, 0.3], [0.4, 0.4], size=(5, 2)):
        out = po.interpolate(lat, m)
        np.testing.assert_allclose(out.A, f(*m), atol=1e-13)
        np.testing.assert_allclose(out.c, 1.0, atol=1e-14)


def test_eval_examples(rng):
    np.testing.assert_array_equal(po.eval_poly_rhs(po.PolyOperators(A=np.eye(2)), [1.0, 2.0]), [1, 2])
    c = rng.normal(size=3)
    np.testing.assert_array_equal(po.PolyOperators(c=c)(rng.normal(size=3)), c)
    H = rng.normal(size=(2, 3))
    np.testing.assert_allclose(po.PolyOperators(H=H)([2.0, 3.0]), H @ [4, 6, 9])
    X = rng.normal(size=(2, 4))
    batch = po.PolyOperators(H=H)(X)
    np.testing.assert_allclose(batch[:, 1], po.PolyOperators(H=H)(X[:, 1]))


def test_operator_invariants():
    with pytest.raises(ValueError):
        po.PolyOperators(A=np.eye(2), c=np.ones(3))
    with pytest.raises(ValueError):
        po.PolyOperators(H=np.ones((2, 4)))


def test_json_round_trip(rng):
    ops = po.fit(rng.normal(size=(3, 20)), rng.normal(size=(3, 20)), "cAH", 0.1)
    back = po.from_json(po.to_json(ops))
    for n in "cAH":
        np.testing.assert_array_equal(getattr(back, n), getattr(ops, n))
    assert back.reg == 0.1
