"""Acceptance criteria 1-9.

Each test records one verdict line through the ``acceptance`` fixture (printed
immediately and again in the terminal summary) and then asserts it. Experiment
runs go through the command-line pipeline so that the same code path serves
users and tests.
"""
import time

import numpy as np
import pytest

from opinfnet import cli, costmodel, fom, neural
from opinfnet import operators as ops
from opinfnet import polyopinf as po
from opinfnet import training as tr
from opinfnet.reduction import ReducedDataset


def _quiet(msg):
    pass


def _run(tmp_path_factory, doc, name):
    cfg = cli.parse_config(doc)
    out = str(tmp_path_factory.mktemp(name))
    t0 = time.perf_counter()
    rows = cli.run(cfg, out, log=_quiet)
    return rows, time.perf_counter() - t0, cli.run_dir(cfg, out)


def _row(rows, family, K, split=None):
    found = [r for r in rows if r["family"] == family and r["K"] == K
             and (split is None or r["split"] == split)]
    assert len(found) == 1
    return found[0]


# --- 1. structure exactness ---------------------------------------------------

def test_criterion_1_structure_exactness(acceptance):
    rng = np.random.default_rng(1)
    worst = {"skew_sym": 0.0, "skew_qf": 0.0, "spsd_qf": 0.0}
    n_draws = 1000
    for K in (2, 8, 16):
        for d in range(n_draws):
            seed = int(rng.integers(2**31))
            x = rng.normal(size=(1, K)) * rng.uniform(0.1, 10)
            mu = rng.uniform(-1, 1, size=(1, 2))
            skew = ops.make_operator("Skew", K, ("x", "mu"), n_params=2, n_hidden=2, width=K,
                                     seed=seed)
            rep = ops.structure_report(skew, x, mu)
            out = skew.forward(x, mu)[0][0]
            qf = abs(x[0] @ out) / max(np.linalg.norm(x) * np.linalg.norm(out), 1e-300)
            worst["skew_sym"] = max(worst["skew_sym"], rep["max_rel_sym_residual"])
            worst["skew_qf"] = max(worst["skew_qf"], qf)
            spsd = ops.make_operator("Spsd", K, ("x", "mu"), n_params=2, n_hidden=2, width=K,
                                     seed=seed, positive=bool(d % 2))
            P = spsd.factor(x[0], mu[0])
            Lt_x = ops.unpack_lower(P, K).T @ x[0]
            val = x[0] @ spsd.forward(x, mu)[0][0]
            rel = -val / max(Lt_x @ Lt_x, 1e-300)
            worst["spsd_qf"] = max(worst["spsd_qf"], rel)
    ok = worst["skew_sym"] <= 1e-12 and worst["skew_qf"] <= 1e-12 and worst["spsd_qf"] <= 1e-12
    acceptance(1, ok, f"3x{n_draws} draws at K=2,8,16; max rel ||A+A^T|| = {worst['skew_sym']:.1e}, "
               f"max rel |x.skew(x)| = {worst['skew_qf']:.1e}, "
               f"max rel -(x.LL^Tx) = {worst['spsd_qf']:.1e} (bound 1e-12)")
    assert ok


# --- 2. gradient correctness ----------------------------------------------------

def _pre_activations(params, X):
    pre, h = [], X
    for W, b in params.layers[:-1]:
        a = h @ W.T + b
        pre.append(a)
        h = np.maximum(a, 0)
    return pre


def _safe_input(params, rng, n_in, margin=1e-3):
    for _ in range(1000):
        x = rng.normal(size=(1, n_in))
        if all(np.min(np.abs(a)) >= margin for a in _pre_activations(params, x)):
            return x
    raise RuntimeError("no input away from activation kinks")


def _fd(f, v, h=1e-5):
    g = np.zeros_like(v)
    for i in range(v.size):
        old = v.flat[i]
        v.flat[i] = old + h
        fp = f()
        v.flat[i] = old - h
        fm = f()
        v.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_criterion_2_gradient_correctness(acceptance):
    rng = np.random.default_rng(2)
    worst = {"params": 0.0, "input": 0.0, "potential": 0.0}
    n_nets = 100
    for k in range(n_nets):
        spec = neural.MlpSpec(int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                              int(rng.integers(0, 4)), int(rng.integers(2, 7)))
        p = neural.init(spec, k)
        x = _safe_input(p, rng, spec.n_in)
        a = rng.normal(size=(1, spec.n_out))
        _, c = neural.forward(p, x, cache=True)
        gp, gi = neural.grad_params(p, c, a), neural.grad_input(p, c, a)
        f = lambda: float(np.sum(a * neural.forward(p, x)))
        worst["params"] = max(worst["params"], _rel(gp, _fd(f, p.flat)))
        worst["input"] = max(worst["input"], _rel(gi, _fd(f, x)))

        K = int(rng.integers(2, 5))
        pot = ops.make_operator("SpsdPotential", K, ("x",), n_hidden=int(rng.integers(1, 3)),
                                width=int(rng.integers(3, 7)), seed=1000 + k,
                                positive=bool(k % 2))
        xs = _safe_input(pot.params, rng, K)

        def potential():
            L = ops.unpack_lower(pot.factor(xs[0]), K)
            return float(xs[0] @ L @ L.T @ xs[0])

        worst["potential"] = max(worst["potential"], _rel(pot(xs[0]), _fd(potential, xs[0])))
    ok = max(worst.values()) <= 1e-6
    acceptance(2, ok, f"{n_nets} random networks, FD step 1e-5, kink margin 1e-3; max rel err "
               f"grad_params {worst['params']:.1e}, grad_input {worst['input']:.1e}, "
               f"SpsdPotential {worst['potential']:.1e} (bound 1e-6)")
    assert ok


# --- 3. convex oracles -------------------------------------------------------------

def test_criterion_3_convex_oracles(acceptance):
    rng = np.random.default_rng(3)
    worst_a = 0.0
    for _ in range(50):
        K = int(rng.integers(1, 7))
        n = int(rng.integers(K + 1, 6 * K + 3))
        x, dx = rng.normal(size=(K, n)), rng.normal(size=(K, n))
        worst_a = max(worst_a, float(np.linalg.norm(po.fit(x, dx, "A").A - po.fit_vec_oracle(x, dx))))

    K, n = 3, 5000
    A = rng.normal(size=(K, K))
    xs = rng.normal(size=(K, n))
    ds = ReducedDataset(xs, A @ xs + 0.1 * rng.normal(size=(K, n)), [])

    def fresh():
        return ops.RomModel([ops.StructuredOperator("Matrix", K)], K)

    m = fresh()
    trn, _, _ = tr.prepare(m, ds, 0)
    A_ls = po.fit(trn.x.T, trn.dx.T, "A").A
    f_opt = tr.loss(fresh(), trn, 0.0, A_ls.ravel(), grad=False)
    _, f_lb, _ = tr.lbfgs_run(lambda w: tr.loss(m, trn, 0.0, w), m.get_flat(), 50)
    rel_b = abs(f_lb - f_opt) / f_opt

    settings = tr.TrainingSettings(epochs=60, lbfgs_every=30, weight_decay=0.0)
    trained, _ = tr.train(fresh(), ds, settings)
    rel_c = abs(tr.loss(trained, trn, 0.0, grad=False) - f_opt) / f_opt

    ok = worst_a <= 1e-9 and rel_b <= 1e-6 and rel_c <= 1e-3
    acceptance(3, ok, f"(a) fit vs vec oracle max Frobenius {worst_a:.1e} (<=1e-9); "
               f"(b) lbfgs rel loss gap {rel_b:.1e} (<=1e-6); "
               f"(c) hybrid train rel loss gap {rel_c:.1e} (<=1e-3)")
    assert ok


# --- 4. FOM conservation --------------------------------------------------------------

def test_criterion_4_fom_conservation(acceptance, burgers_run, burgers_grid):
    E = burgers_grid.dx * np.sum(burgers_run.states ** 2, axis=0)
    drift = float(np.max(np.abs(E - E[0])) / E[0])
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        u = rng.normal(size=500) + rng.uniform(-3, 3)
        r = fom.burgers_rhs(u, burgers_grid)
        worst = max(worst, abs(u @ r) / (np.linalg.norm(u) * np.linalg.norm(r)))
    ok = drift <= 1e-6 and worst <= 1e-12
    acceptance(4, ok, f"FOM relative energy drift {drift:.2e} (bound 1e-6); "
               f"semi-discrete |u.rhs(u)| rel {worst:.1e} (bound 1e-12)")
    assert ok


# --- 5. Burgers reproductive --------------------------------------------------------------

@pytest.fixture(scope="session")
def burgers_reproductive(tmp_path_factory):
    doc = {"experiment": "burgers-reproductive", "K": [4, 8, 12],
           "families": ["P-OpInf-AH", "NN-OpInf-SS"], "seed": 0}
    return _run(tmp_path_factory, doc, "burgers-rep")


def test_criterion_5_burgers_reproductive(acceptance, burgers_reproductive):
    rows, seconds, _ = burgers_reproductive
    parts, ok = [], True
    for r in rows:
        good = (not r["unstable"]) and r["e"] < 1e-2
        ok &= good
        parts.append(f"{r['family']} K={r['K']} e={r['e']:.2e}")
    drifts = {r["K"]: r["reduced_drift"] for r in rows if r["family"] == "NN-OpInf-SS"}
    drift_ok = all(d is not None and d <= 1e-8 for d in drifts.values())
    ok = ok and len(rows) == 6 and drift_ok
    acceptance("5a", ok, "; ".join(parts) + " (bound e<1e-2); SS reduced drift "
               + ", ".join(f"K={k}: {v:.1e}" for k, v in drifts.items())
               + f" (bound 1e-8); {seconds:.0f}s")
    assert ok


def test_criterion_5_fast_profile(acceptance, tmp_path_factory):
    doc = {"experiment": "burgers-reproductive", "K": [4, 8, 12], "families": ["NN-OpInf-SS"],
           "training": {"epochs": 2000}, "seed": 0}
    rows, seconds, _ = _run(tmp_path_factory, doc, "burgers-fast")
    worst = max(r["e"] for r in rows)
    ok = all(not r["unstable"] for r in rows) and worst < 5e-2 and seconds <= 300
    acceptance("5b", ok, "fast profile (2000 epochs) NN-OpInf-SS e = "
               + ", ".join(f"K={r['K']}: {r['e']:.2e}" for r in rows)
               + f" (bound 5e-2); {seconds:.0f}s (bound 300s)")
    assert ok


# --- 6. Burgers future-state ordering ---------------------------------------------------------

def test_criterion_6_burgers_future(acceptance, tmp_path_factory, burgers_reproductive):
    doc = {"experiment": "burgers-future", "K": [4, 8, 12],
           "families": ["P-OpInf-A", "P-OpInf-AH", "NN-OpInf-SS"], "seed": 0}
    rows, seconds, _ = _run(tmp_path_factory, doc, "burgers-future")
    rep_rows = burgers_reproductive[0]
    ok, parts = True, []
    for K in (4, 8, 12):
        ss = _row(rows, "NN-OpInf-SS", K)
        polys = [_row(rows, f, K) for f in ("P-OpInf-A", "P-OpInf-AH")]
        best = min(p["e"] for p in polys)
        rep = _row(rep_rows, "NN-OpInf-SS", K)
        viol_ok = ss["energy_drift"] is not None and ss["energy_drift"] <= 10 * rep["energy_drift"]
        poly_larger = all(p["unstable"] or (p["energy_drift_pred"] is not None
                                            and p["energy_drift_pred"] > ss["energy_drift_pred"])
                          for p in polys)
        good = (not ss["unstable"]) and ss["e"] <= best and viol_ok and poly_larger
        ok &= good
        parts.append(f"K={K}: SS e={ss['e']:.2e} vs best P-OpInf {best:.2e}, SS drift "
                     f"{ss['energy_drift']:.1e} vs 10x rep {10 * rep['energy_drift']:.1e}, "
                     f"P-OpInf drift beyond t=1 "
                     + "/".join("unstable" if p["unstable"] else f"{p['energy_drift_pred']:.1e}"
                                for p in polys)
                     + f" vs SS {ss['energy_drift_pred']:.1e}"
                     + ("" if good else " [FAIL]"))
    acceptance(6, ok, "; ".join(parts) + f"; {seconds:.0f}s")
    assert ok


# --- 7. heat qualitative reproduction -----------------------------------------------------------

@pytest.mark.parametrize("experiment", ["heat-reproductive", "heat-future"])
def test_criterion_7_heat(acceptance, tmp_path_factory, experiment):
    doc = {"experiment": experiment, "K": [10], "families": ["P-OpInf-cA", "NN-OpInf-SPSD-f"],
           "seed": 0}
    rows, s1, _ = _run(tmp_path_factory, doc, experiment + "-k10")
    spsd, ca = _row(rows, "NN-OpInf-SPSD-f", 10), _row(rows, "P-OpInf-cA", 10)
    doc = {"experiment": experiment, "K": [4, 10], "families": ["P-OpInf-cAH"], "seed": 0}
    rows2, s2, _ = _run(tmp_path_factory, doc, experiment + "-cah")
    c4, c10 = _row(rows2, "P-OpInf-cAH", 4), _row(rows2, "P-OpInf-cAH", 10)
    order_ok = (not spsd["unstable"]) and spsd["e"] <= ca["e"]
    cah_ok = c10["unstable"] or not (c10["e"] < c4["e"])
    ok = order_ok and cah_ok
    tag = "7a" if experiment == "heat-reproductive" else "7b"
    acceptance(tag, ok, f"{experiment} K=10: SPSD-f e={spsd['e']:.2e} vs cA e={ca['e']:.2e}"
               f" ({'ok' if order_ok else 'FAIL'}); cAH K=4 e={c4['e']:.2e}"
               f"{' unstable' if c4['unstable'] else ''}, K=10 e={c10['e']:.2e}"
               f"{' unstable' if c10['unstable'] else ''} (must diverge or not improve: "
               f"{'ok' if cah_ok else 'FAIL'}); {s1 + s2:.0f}s")
    assert ok


# --- 8. cost model ------------------------------------------------------------------------------

# Table classes as functions of K (N_s and n_epochs held at their defaults)
_EVAL_CLASSES = {"linear": lambda K: K**2, "quadratic": lambda K: K**3, "standard": lambda K: K**2,
                 "matrix": lambda K: K**3, "spsd": lambda K: K**3, "skew": lambda K: K**3,
                 "spsd_potential": lambda K: K**3}
_NS = 10_000
_TRAIN_CLASSES = {"linear": lambda K: _NS * K**3 + K**4, "quadratic": lambda K: _NS * K**5 + K**7,
                  "standard": lambda K: K**2, "matrix": lambda K: K**3, "spsd": lambda K: K**3,
                  "skew": lambda K: K**3, "spsd_potential": lambda K: K**3}


def test_criterion_8_cost_model(acceptance):
    quad = costmodel.eval_cost("quadratic", costmodel.CostQuery(K=10))
    nn = costmodel.eval_cost("nn_forward", costmodel.CostQuery(K=10, n_h=3, n_n=10, n_out=10, n_oa=1))
    exact_ok = quad == 1150 and nn == 1040
    kinds = ("linear", "quadratic") + costmodel.OPERATOR_KINDS[:4] + ("spsd_potential",)
    kinds = tuple(k for k in kinds if k != "vector")
    worst, worst_name = 0.0, ""
    for measure, classes in (("eval", _EVAL_CLASSES), ("train", _TRAIN_CLASSES)):
        rows = costmodel.ratio_table(kinds, [32, 64, 128], measure=measure)
        cost = {(r["K"], r["kind"]): r["cost"] for r in rows}
        for kind in kinds:
            for K in (32, 64):
                ours = cost[(2 * K, kind)] / cost[(K, kind)]
                ref = classes[kind](2 * K) / classes[kind](K)
                dev = abs(ours / ref - 1)
                if dev > worst:
                    worst, worst_name = dev, f"{measure}/{kind}@K={K}"
    ok = exact_ok and worst <= 0.25
    acceptance(8, ok, f"C_quadratic(10) = {quad:g} (1150), C_NN(10) = {nn} (1040); doubling-K "
               f"factor vs stated class, max deviation {worst:.1%} at {worst_name} (bound 25%)")
    assert ok


# --- 9. determinism --------------------------------------------------------------------------------

def test_criterion_9_determinism(acceptance, tmp_path_factory):
    doc = {"experiment": "burgers-future", "K": [4, 6],
           "families": ["Galerkin", "P-OpInf-AH", "NN-OpInf-SS", "NN-OpInf-NN"],
           "training": {"epochs": 300, "lbfgs_every": 150}, "seed": 7}
    _, s1, d1 = _run(tmp_path_factory, doc, "det-a")
    _, s2, d2 = _run(tmp_path_factory, doc, "det-b")
    a = open(f"{d1}/results.csv", "rb").read()
    b = open(f"{d2}/results.csv", "rb").read()
    ok = a == b and len(a.splitlines()) == 1 + 8
    acceptance(9, ok, f"two serial runs of a burgers-future config: results.csv "
               f"{'byte-identical' if a == b else 'DIFFERENT'} ({len(a)} bytes; {s1:.0f}s + {s2:.0f}s)")
    assert ok
