"""Config-driven experiment pipeline: simulate, reduce, train, evaluate, export.

Each stage reads what the previous one wrote under the run directory
``<out>/<experiment>-<config hash>``, so stages can be run one at a time or
all together with ``run``. Exit codes: 0 success, 2 configuration error,
3 pipeline-stage failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import costmodel, fom, kernels, polyopinf, reduction, romeval, training
from .operators import NN_FAMILIES, build_family, load_model, save_model

__version__ = "0.1.0"

POLY_FAMILIES = ("P-OpInf-A", "P-OpInf-AH", "P-OpInf-cA", "P-OpInf-cAH")
FAMILIES = ("Galerkin",) + POLY_FAMILIES + NN_FAMILIES
RESULT_COLUMNS = ["experiment", "family", "K", "mu", "split", "e", "unstable",
                  "energy_drift", "energy_drift_pred", "reduced_drift", "notes"]

_BURGERS_FOM = {"n_cells": 500, "dt": 0.01, "t_final": 4.0}
_HEAT_FOM = {"nx": 50, "ny": 50, "dt": 1e-3, "t_final": 2.0, "k1": 0.2, "tc": 0.3}

CATALOG = {
    "burgers-reproductive": {
        "fom": "burgers", "settings": dict(_BURGERS_FOM, t_train=4.0),
        "K": [4, 8, 12],
        "families": ["Galerkin", "P-OpInf-A", "P-OpInf-AH", "NN-OpInf-NN", "NN-OpInf-SS"],
    },
    "burgers-future": {
        "fom": "burgers", "settings": dict(_BURGERS_FOM, t_train=1.0),
        "K": [4, 8, 12],
        "families": ["Galerkin", "P-OpInf-A", "P-OpInf-AH", "NN-OpInf-NN", "NN-OpInf-SS"],
    },
    "heat-reproductive": {
        "fom": "heat", "settings": dict(_HEAT_FOM, t_train=2.0),
        "K": [4, 6, 8, 10],
        "families": ["P-OpInf-cA", "P-OpInf-cAH", "NN-OpInf-NN", "NN-OpInf-SPSD-f"],
    },
    "heat-future": {
        "fom": "heat", "settings": dict(_HEAT_FOM, t_train=1.0),
        "K": [4, 6, 8, 10],
        "families": ["P-OpInf-cA", "P-OpInf-cAH", "NN-OpInf-NN", "NN-OpInf-SPSD-f"],
    },
    "heat-parametric": {
        "fom": "heat",
        "settings": {"nx": 50, "ny": 50, "dt": 1e-3, "t_final": 2.0, "t_train": 2.0,
                     "k1_grid": [0.2, 0.4], "tc_grid": [0.3, 0.4],
                     "k1_range": [0.2, 0.5], "tc_range": [0.3, 0.5], "n_test": 4},
        "K": [4, 6, 8, 10],
        "families": ["P-OpInf-cA", "P-OpInf-cAH", "NN-OpInf-NN", "NN-OpInf-SPSD-f"],
    },
}

_CONFIG_KEYS = {"experiment", "K", "families", "training", "seed", "fom", "jobs"}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, config_hash, cause):
        super().__init__(f"stage '{stage}' failed (config {config_hash}): {cause}")
        self.stage = stage
        self.config_hash = config_hash


@dataclass
class ExperimentConfig:
    experiment: str
    K: list
    families: list
    training: training.TrainingSettings
    seed: int = 0
    fom: dict = field(default_factory=dict)
    jobs: int = 1

    @property
    def parametric(self) -> bool:
        return self.experiment == "heat-parametric"

    @property
    def fom_kind(self) -> str:
        return CATALOG[self.experiment]["fom"]

    def canonical(self) -> dict:
        """Everything that determines the results (``jobs`` excluded)."""
        return {"experiment": self.experiment, "K": list(self.K), "families": list(self.families),
                "training": asdict(self.training), "seed": self.seed, "fom": dict(self.fom)}

    @property
    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def list_experiments() -> dict:
    return {k: {"fom": v["fom"], "defaults": dict(v["settings"]), "K": list(v["K"]),
                "families": list(v["families"])} for k, v in CATALOG.items()}


def parse_config(doc, seed=None, jobs=None) -> ExperimentConfig:
    """Validate a config document; unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    exp = doc.get("experiment")
    if exp not in CATALOG:
        raise ConfigError(f"experiment must be one of {sorted(CATALOG)}, got {exp!r}")
    cat = CATALOG[exp]
    Ks = doc.get("K", cat["K"])
    if not isinstance(Ks, list) or not all(isinstance(k, int) and not isinstance(k, bool)
                                           and k >= 1 for k in Ks):
        raise ConfigError("K must be a list of integers >= 1")
    fams = doc.get("families", cat["families"])
    if not isinstance(fams, list) or any(f not in FAMILIES for f in fams):
        raise ConfigError(f"families must be drawn from {list(FAMILIES)}")
    if len(set(fams)) != len(fams) or len(set(Ks)) != len(Ks):
        raise ConfigError("duplicate K values or families")
    if "Galerkin" in fams and cat["fom"] != "burgers":
        raise ConfigError("Galerkin needs an available full-order right-hand side (Burgers only)")
    tdoc = doc.get("training", {})
    names = {f.name for f in fields(training.TrainingSettings)}
    if not isinstance(tdoc, dict) or set(tdoc) - names:
        raise ConfigError(f"unknown training keys: {sorted(set(tdoc) - names)}")
    s = seed if seed is not None else doc.get("seed", 0)
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        ts = training.TrainingSettings(**dict(tdoc, seed=s))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training settings: {exc}") from None
    fdoc = doc.get("fom", {})
    if not isinstance(fdoc, dict) or set(fdoc) - set(cat["settings"]):
        raise ConfigError(f"fom overrides must be drawn from {sorted(cat['settings'])}")
    fset = dict(cat["settings"], **fdoc)
    if fset["t_train"] > fset["t_final"] or fset["dt"] <= 0:
        raise ConfigError("need dt > 0 and t_train <= t_final")
    j = jobs if jobs is not None else doc.get("jobs", 1)
    if not isinstance(j, int) or j < 1:
        raise ConfigError("jobs must be a positive integer")
    return ExperimentConfig(exp, Ks, fams, ts, s, fset, j)


def load_config(path, seed=None, jobs=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(doc, seed, jobs)


# --- pipeline stages ---------------------------------------------------------

def run_dir(cfg: ExperimentConfig, out) -> str:
    return os.path.join(out, f"{cfg.experiment}-{cfg.hash}")


def _grid(cfg):
    f = cfg.fom
    if cfg.fom_kind == "burgers":
        return fom.Grid1D(int(f["n_cells"]))
    return fom.Grid2D(int(f["nx"]), int(f["ny"]))


def _cases(cfg):
    """``(name, params, split)`` for every full-order run the experiment needs."""
    f = cfg.fom
    if cfg.fom_kind == "burgers":
        return [("run0", None, "train" if f["t_train"] >= f["t_final"] else "test")]
    if not cfg.parametric:
        split = "train" if f["t_train"] >= f["t_final"] else "test"
        return [("run0", fom.HeatParams(f["k1"], f["tc"]), split)]
    cases = []
    for i, k1 in enumerate(f["k1_grid"]):
        for j, tc in enumerate(f["tc_grid"]):
            cases.append((f"train{i}{j}", fom.HeatParams(k1, tc), "train"))
    rng = np.random.default_rng(cfg.seed)
    for n in range(int(f["n_test"])):
        k1 = rng.uniform(*f["k1_range"])
        tc = rng.uniform(*f["tc_range"])
        cases.append((f"test{n}", fom.HeatParams(k1, tc), "test"))
    return cases


def stage_simulate(cfg, rdir, log=print):
    os.makedirs(os.path.join(rdir, "trajectories"), exist_ok=True)
    grid = _grid(cfg)
    counts = {}
    for name, params, _ in _cases(cfg):
        path = os.path.join(rdir, "trajectories", f"{name}.bin")
        if os.path.exists(path):
            counts[name] = fom.load_trajectory(path).n_times
            continue
        t0 = time.perf_counter()
        tr = fom.simulate(cfg.fom_kind, grid, params, t_final=cfg.fom["t_final"], dt=cfg.fom["dt"])
        fom.save_trajectory(path, tr)
        counts[name] = tr.n_times
        log(f"simulate {name}: {tr.n_times} snapshots in {time.perf_counter() - t0:.1f}s")
    return counts


def _load_cases(cfg, rdir):
    out = []
    for name, params, split in _cases(cfg):
        tr = fom.load_trajectory(os.path.join(rdir, "trajectories", f"{name}.bin"))
        out.append((name, params, split, tr))
    return out


def _training_trajectories(cfg, cases):
    return [tr.window(cfg.fom["t_train"]) for _, _, split, tr in cases
            if split == "train" or not cfg.parametric]


def stage_reduce(cfg, rdir, log=print):
    if not cfg.K:
        return None
    cases = _load_cases(cfg, rdir)
    trains = _training_trajectories(cfg, cases)
    X = reduction.SnapshotMatrix.from_blocks([t.states for t in trains])
    basis = reduction.compute_pod(X, max(cfg.K))
    os.makedirs(os.path.join(rdir, "pod"), exist_ok=True)
    reduction.save_pod(os.path.join(rdir, "pod", "basis.bin"), basis)
    log(f"reduce: {X.data.shape[1]} snapshots, K_max = {basis.K}")
    return basis


def _model_dir(rdir, family, K):
    return os.path.join(rdir, "models", f"{family}_K{K}")


def _fit_poly(family, x_list, dx_list, x0_list, t_list):
    blocks = family.replace("P-OpInf-", "")
    ops = []
    for x, dx, x0, t in zip(x_list, dx_list, x0_list, t_list):
        o, _ = polyopinf.grid_search(x, dx, x0, t, blocks=blocks)
        o.diagnostics.pop("search", None)
        ops.append(o)
    return ops


def _train_item(item):
    """One (family, K) work item; top-level so it can run in a worker process."""
    family, K, payload, settings = item
    if family in POLY_FAMILIES:
        return _fit_poly(family, *payload)
    ds = payload
    ens, hist = training.train_ensemble(
        lambda s: build_family(family, K, ds.n_params, seed=s), ds, settings)
    return ens, hist


def stage_train(cfg, rdir, log=print):
    cases = _load_cases(cfg, rdir)
    basis_full = reduction.load_pod(os.path.join(rdir, "pod", "basis.bin")) if cfg.K else None
    trains = [(p, tr.window(cfg.fom["t_train"])) for _, p, split, tr in cases
              if split == "train" or not cfg.parametric]
    items = []
    for family in cfg.families:
        if family == "Galerkin":
            continue
        for K in cfg.K:
            basis = basis_full.truncate(K)
            if family in POLY_FAMILIES:
                xs = [reduction.project(basis, tr.states) for _, tr in trains]
                dxs = [reduction.project(basis, tr.rhs) for _, tr in trains]
                payload = (xs, dxs, [x[:, 0] for x in xs], [tr.times for _, tr in trains])
            else:
                ds = reduction.build_dataset(basis, [tr for _, tr in trains])
                if not cfg.parametric:
                    ds = reduction.ReducedDataset(ds.x, ds.dx, np.zeros((0, ds.n_samples)))
                payload = ds
            items.append((family, K, payload, cfg.training))
    if cfg.jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_train_item, items))
    else:
        results = [_train_item(it) for it in items]
    for (family, K, _, _), res in zip(items, results):
        mdir = _model_dir(rdir, family, K)
        os.makedirs(mdir, exist_ok=True)
        if family in POLY_FAMILIES:
            doc = {"lattice": None, "operators": [json.loads(polyopinf.to_json(o)) for o in res]}
            if cfg.parametric:
                doc["lattice"] = [list(cfg.fom["k1_grid"]), list(cfg.fom["tc_grid"])]
            with open(os.path.join(mdir, "poly.json"), "w") as fh:
                json.dump(doc, fh, indent=1)
            log(f"train {family} K={K}: reg = {[o.reg for o in res]}")
        else:
            ens, hist = res
            save_model(ens, mdir)
            for m, h in enumerate(hist):
                training._write_history(os.path.join(mdir, f"history{m}.csv"), h)
            log(f"train {family} K={K}: best val loss {[min(r['val_loss'] for r in h) for h in hist]}")


def _load_poly(cfg, mdir):
    with open(os.path.join(mdir, "poly.json")) as fh:
        doc = json.load(fh)
    ops = [polyopinf.from_json(json.dumps(o)) for o in doc["operators"]]
    if doc["lattice"] is None:
        return lambda mu: ops[0]
    lattice = polyopinf.OperatorLattice(doc["lattice"], ops)
    return lambda mu: polyopinf.interpolate(lattice, mu, extrapolate=True)


def _outside(cfg, mu):
    f = cfg.fom
    return not (f["k1_grid"][0] <= mu[0] <= f["k1_grid"][-1] and f["tc_grid"][0] <= mu[1] <= f["tc_grid"][-1])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def stage_evaluate(cfg, rdir, log=print):
    cases = _load_cases(cfg, rdir)
    basis_full = reduction.load_pod(os.path.join(rdir, "pod", "basis.bin")) if cfg.K else None
    grid = _grid(cfg)
    t_train = cfg.fom["t_train"]
    os.makedirs(os.path.join(rdir, "runs"), exist_ok=True)
    train_norm = {}
    for K in cfg.K:
        V = basis_full.truncate(K).V
        train_norm[K] = max(float(np.max(np.linalg.norm(V.T @ tr.window(t_train).states, axis=0)))
                            for _, _, s, tr in cases if s == "train" or not cfg.parametric)
    rows = []
    for family in cfg.families:
        for K in cfg.K:
            basis = basis_full.truncate(K)
            mdir = _model_dir(rdir, family, K)
            if family in POLY_FAMILIES:
                poly_at = _load_poly(cfg, mdir)
            elif family in NN_FAMILIES:
                model = load_model(mdir)
            for ci, (name, params, split, tr) in enumerate(cases):
                mu = None if params is None else params.as_vector()
                notes = []
                if family == "Galerkin":
                    rhs = romeval.galerkin_model(basis.V, lambda s: fom.burgers_rhs(s, grid))
                elif family in POLY_FAMILIES:
                    if cfg.parametric and _outside(cfg, mu):
                        notes.append("extrapolated")
                    rhs = poly_at(mu)
                else:
                    rhs = model.bind(mu if cfg.parametric else None)
                x0 = basis.V.T @ tr.states[:, 0]
                run = romeval.integrate_rom(rhs, x0, tr.times, norm_scale=train_norm[K])
                lifted = basis.V @ run.states
                if run.completed:
                    run.error = romeval.relative_error(lifted, tr.states)
                else:
                    run.error = float("inf")
                    notes.append(f"diverged at t={tr.times[run.states.shape[1]]!r}")
                drift = pred = rdrift = None
                if cfg.fom_kind == "burgers" and run.completed:
                    diag = romeval.energy_violation(lifted, grid, run.states)
                    drift = diag.max_relative_drift()
                    later = np.nonzero(tr.times > t_train + 1e-9)[0]
                    if later.size:
                        pred = diag.max_relative_drift(int(later[0]))
                    red = diag.reduced_energy
                    rdrift = float(np.max(np.abs(red - red[0])) / red[0])
                mu_s = "-" if mu is None else ";".join(repr(float(v)) for v in mu)
                row = {"experiment": cfg.experiment, "family": family, "K": K, "mu": mu_s,
                       "split": split, "e": float(run.error), "unstable": int(run.unstable),
                       "energy_drift": drift, "energy_drift_pred": pred, "reduced_drift": rdrift,
                       "notes": "|".join(notes)}
                rows.append(row)
                run.meta = {"family": family, "K": K, "case": name, "integrator": "RK4",
                            "dt": float(cfg.fom["dt"])}
                stem = os.path.join(rdir, "runs", f"{family}_K{K}_{name}")
                romeval.export_run(run, stem + ".csv", stem + ".json",
                                   {"energy_drift": drift, "reduced_drift": rdrift})
                log(f"evaluate {family} K={K} {name}: e = {run.error:.4e}"
                    + (" (unstable)" if run.unstable else ""))
    write_results(os.path.join(rdir, "results.csv"), rows)
    return rows


def write_results(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in RESULT_COLUMNS])


def read_results(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["K"] = int(r["K"])
        r["e"] = float(r["e"])
        r["unstable"] = bool(int(r["unstable"]))
        for c in ("energy_drift", "energy_drift_pred", "reduced_drift"):
            r[c] = float(r[c]) if r[c] else None
    return rows


def write_metadata(cfg, rdir, extra=None):
    doc = {
        "config": cfg.canonical(),
        "config_hash": cfg.hash,
        "seeds": {"training": cfg.training.seed,
                  "ensemble_members": [cfg.training.seed + m for m in range(cfg.training.ensemble)],
                  "test_draws": cfg.seed},
        "versions": {"opinfnet": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "kernels": kernels.BACKEND},
        "defaults": {
            "fom": cfg.fom,
            "training": asdict(cfg.training),
            "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
            "lbfgs": {"c1": 1e-4, "c2": 0.9, "history": cfg.training.lbfgs_history},
            "regularization_grid": [float(v) for v in polyopinf.RegSearchSpec().values],
            "rom_integrator": "RK4 at the full-order time step",
            "divergence_factor": romeval.DIVERGENCE_FACTOR,
            "normalization": "max-abs, one scalar per group, training split",
            "network": {"n_hidden": 3, "width": "K", "activation": "relu"},
            "spsd_positive": True,
        },
    }
    doc.update(extra or {})
    with open(os.path.join(rdir, "metadata.json"), "w") as fh:
        json.dump(doc, fh, indent=1, default=float)


def run(cfg: ExperimentConfig, out, cost=False, log=print):
    """Full pipeline; returns the result rows."""
    rdir = run_dir(cfg, out)
    os.makedirs(rdir, exist_ok=True)
    with open(os.path.join(rdir, "config.json"), "w") as fh:
        json.dump(cfg.canonical(), fh, indent=1, sort_keys=True)
    if not cfg.families or not cfg.K:
        write_results(os.path.join(rdir, "results.csv"), [])
        write_metadata(cfg, rdir, {"snapshot_counts": {}})
        return []
    counts = _stage("simulate", cfg, lambda: stage_simulate(cfg, rdir, log))
    _stage("reduce", cfg, lambda: stage_reduce(cfg, rdir, log))
    _stage("train", cfg, lambda: stage_train(cfg, rdir, log))
    rows = _stage("evaluate", cfg, lambda: stage_evaluate(cfg, rdir, log))
    write_metadata(cfg, rdir, {"snapshot_counts": counts})
    if cost:
        with open(os.path.join(rdir, "cost_table.csv"), "w") as fh:
            fh.write(costmodel.table_csv(costmodel.ratio_table()))
    return rows


def _stage(name, cfg, fn):
    try:
        return fn()
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # every other failure is reported with its stage
        raise StageError(name, cfg.hash, f"{type(exc).__name__}: {exc}") from exc


# --- command line ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="opinfnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reduce", "train", "evaluate", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", default="runs")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--cost", action="store_true", help="also write cost_table.csv")
    sp = sub.add_parser("cost")
    sp.add_argument("--out", help="CSV path (stdout if omitted)")
    sp.add_argument("--measure", choices=("eval", "train"), default="eval")
    sp.add_argument("--K", type=int, nargs="+", default=[2, 4, 8, 16, 32, 64, 128])
    sub.add_parser("list")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            print(json.dumps(list_experiments(), indent=1))
            return 0
        if args.command == "cost":
            text = costmodel.table_csv(costmodel.ratio_table(Ks=args.K, measure=args.measure))
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
            return 0
        cfg = load_config(args.config, args.seed, args.jobs)
        log = lambda msg: print(msg, file=sys.stderr)  # noqa: E731
        if args.command == "run":
            rows = run(cfg, args.out, args.cost, log)
            print(os.path.join(run_dir(cfg, args.out), "results.csv"))
            log(f"{len(rows)} result rows")
            return 0
        rdir = run_dir(cfg, args.out)
        os.makedirs(rdir, exist_ok=True)
        stage = {"simulate": stage_simulate, "reduce": stage_reduce,
                 "train": stage_train, "evaluate": stage_evaluate}[args.command]
        _stage(args.command, cfg, lambda: stage(cfg, rdir, log))
        if args.command == "evaluate":
            write_metadata(cfg, rdir)
            if args.cost:
                with open(os.path.join(rdir, "cost_table.csv"), "w") as fh:
                    fh.write(costmodel.table_csv(costmodel.ratio_table()))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
