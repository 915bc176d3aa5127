"""Polynomial operator inference: constant, linear and quadratic reduced operators."""
from __future__ import annotations

import base64
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class SearchFailure(RuntimeError):
    def __init__(self, diagnostics):
        super().__init__("every regularization candidate produced an unstable ROM")
        self.diagnostics = diagnostics


class ExtrapolationError(ValueError):
    pass


def sqr_pack(x):
    """Unique products ``x_i x_j`` (``j <= i``), ordered row by row."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return kernels.sqr_pack(x[None, :])[0]
    return kernels.sqr_pack(x)


def n_quadratic(K):
    return K * (K + 1) // 2


@dataclass
class PolyOperators:
    c: np.ndarray | None = None
    A: np.ndarray | None = None
    H: np.ndarray | None = None
    reg: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        Ks = set()
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float)
            Ks.add(self.c.shape[0])
        if self.A is not None:
            self.A = np.asarray(self.A, dtype=float)
            if self.A.shape[0] != self.A.shape[1]:
                raise ValueError("A must be square")
            Ks.add(self.A.shape[0])
        if self.H is not None:
            self.H = np.asarray(self.H, dtype=float)
            Ks.add(self.H.shape[0])
            if self.H.shape[1] != n_quadratic(self.H.shape[0]):
                raise ValueError("H must have K(K+1)/2 columns")
        if len(Ks) != 1:
            raise ValueError("operators must be present with one consistent K")

    @property
    def K(self) -> int:
        for m in (self.c, self.A, self.H):
            if m is not None:
                return m.shape[0]
        raise AssertionError

    @property
    def blocks(self) -> str:
        return "".join(n for n, m in (("c", self.c), ("A", self.A), ("H", self.H)) if m is not None)

    def __call__(self, x):
        return eval_poly_rhs(self, x)


def eval_poly_rhs(ops: PolyOperators, x):
    """``A x + H sqr(x) + c`` for whichever blocks are present; ``x`` is (K,) or (K, n)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    if ops.A is not None:
        out += ops.A @ x
    if ops.H is not None:
        q = sqr_pack(x) if x.ndim == 1 else sqr_pack(x.T).T
        out += ops.H @ q
    if ops.c is not None:
        out += ops.c if x.ndim == 1 else ops.c[:, None]
    return out


def _parse_blocks(blocks):
    blocks = blocks.replace("P-OpInf-", "")
    if not blocks or set(blocks) - set("cAH"):
        raise ValueError(f"blocks must be drawn from 'cAH', got {blocks!r}")
    return "".join(b for b in "cAH" if b in blocks)


def design_matrix(x, blocks):
    """Rows ``[1 | x^T | sqr(x)^T]`` restricted to the requested blocks."""
    x = np.asarray(x, dtype=float)
    cols = []
    if "c" in blocks:
        cols.append(np.ones((x.shape[1], 1)))
    if "A" in blocks:
        cols.append(x.T)
    if "H" in blocks:
        cols.append(sqr_pack(x.T))
    return np.hstack(cols)


def fit(x, dx, blocks="AH", reg=0.0) -> PolyOperators:
    """Tikhonov-regularized least-squares fit of the polynomial operators.

    Minimizes ``sum_j ||D_j theta - dx_j||^2 + reg ||theta||^2`` for every output
    row at once by solving the augmented system ``[D; sqrt(reg) I]`` with an
    orthogonal factorization (LAPACK ``gelsd``), which returns the minimum-norm
    solution when the design is rank deficient.
    """
    blocks = _parse_blocks(blocks)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dx = np.atleast_2d(np.asarray(dx, dtype=float))
    if x.shape != dx.shape or x.shape[1] < 1:
        raise ValueError("x and dx must be K x n with n >= 1")
    if reg < 0:
        raise ValueError("regularization must be non-negative")
    K = x.shape[0]
    D = design_matrix(x, blocks)
    p = D.shape[1]
    rhs = dx.T
    if reg > 0:
        D_aug = np.vstack([D, np.sqrt(reg) * np.eye(p)])
        rhs = np.vstack([rhs, np.zeros((p, K))])
    else:
        D_aug = D
    theta, _, rank, _ = np.linalg.lstsq(D_aug, rhs, rcond=None)
    diag = {"rank": int(rank), "n_unknowns": p, "rank_deficient": bool(rank < p)}
    ops = {}
    col = 0
    if "c" in blocks:
        ops["c"] = theta[col].copy()
        col += 1
    if "A" in blocks:
        ops["A"] = theta[col:col + K].T.copy()
        col += K
    if "H" in blocks:
        ops["H"] = theta[col:col + n_quadratic(K)].T.copy()
    return PolyOperators(reg=float(reg), diagnostics=diag, **ops)


def normal_equation_residual(x, dx, ops: PolyOperators) -> float:
    """Scaled norm of ``D^T (D theta - y) + reg theta``; zero at the optimum."""
    D = design_matrix(x, ops.blocks)
    theta = np.hstack([m if m.ndim == 2 else m[:, None]
                       for m in (ops.c, ops.A, ops.H) if m is not None]).T
    r = D.T @ (D @ theta - np.asarray(dx).T) + ops.reg * theta
    scale = np.linalg.norm(D.T @ D) * np.linalg.norm(theta) + np.linalg.norm(D.T @ np.asarray(dx).T)
    return float(np.linalg.norm(r) / max(scale, 1e-300))


def fit_vec_oracle(x, dx):
    """Linear operator from the vectorized least-squares problem.

    Solves ``min ||(X^T kron I) vec(A) - vec(Y)||`` directly. Only meant as an
    independent check of :func:`fit`; it builds an ``nK x K^2`` matrix.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dx = np.atleast_2d(np.asarray(dx, dtype=float))
    K = x.shape[0]
    M = np.kron(x.T, np.eye(K))
    vecA, *_ = np.linalg.lstsq(M, dx.reshape(-1, order="F"), rcond=None)
    return vecA.reshape(K, K, order="F")


@dataclass(frozen=True)
class RegSearchSpec:
    values: tuple = tuple(np.logspace(-8, 3, 40))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size == 0 or np.any(v <= 0) or np.any(np.diff(v) <= 0):
            raise ValueError("regularization values must be positive and strictly increasing")


def grid_search(x, dx, x0, times, spec: RegSearchSpec = RegSearchSpec(), blocks="AH",
                reference=None):
    """Pick the regularization whose integrated ROM best matches the training trajectory.

    Each candidate is fitted, integrated with RK4 over ``times`` from ``x0`` and
    scored by the relative trajectory error against ``reference`` (defaults to
    ``x``, which must then be the time-ordered training trajectory). Divergent
    candidates score ``inf``; ties go to the smaller value.
    """
    from .romeval import integrate_rom, relative_error

    reference = np.asarray(x if reference is None else reference, dtype=float)
    best, best_err, diags = None, np.inf, []
    for lam in spec.values:
        ops = fit(x, dx, blocks, lam)
        run = integrate_rom(ops, x0, times)
        if run.unstable:
            err = np.inf
        else:
            err = relative_error(run.states, reference)
        diags.append({"reg": float(lam), "error": float(err), "unstable": run.unstable})
        if err < best_err:
            best, best_err = ops, err
    if best is None:
        raise SearchFailure(diags)
    best.diagnostics = dict(best.diagnostics, search=diags, train_error=float(best_err))
    return best, best.reg


@dataclass
class OperatorLattice:
    """Operators fitted at every node of a full regular parameter grid.

    ``ops`` is ordered C-style over the axes (last axis fastest).
    """

    axes: list
    ops: list

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        if len(self.ops) != int(np.prod([a.size for a in self.axes])):
            raise ValueError("one operator set per lattice node required")
        for a in self.axes:
            if np.any(np.diff(a) <= 0):
                raise ValueError("lattice axes must be strictly increasing")


def interpolate(lattice: OperatorLattice, mu, extrapolate=False) -> PolyOperators:
    """Entrywise multilinear interpolation of every operator block.

    Queries outside the lattice box raise :class:`ExtrapolationError` unless
    ``extrapolate`` is set, in which case the multilinear formula of the
    nearest cell is evaluated as is.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if mu.size != len(lattice.axes):
        raise ValueError("query dimension does not match the lattice")
    shape = [a.size for a in lattice.axes]
    per_axis = []
    for a, m in zip(lattice.axes, mu):
        tol = 1e-12 * max(1.0, abs(a[-1] - a[0]))
        if (m < a[0] - tol or m > a[-1] + tol) and not extrapolate:
            raise ExtrapolationError(f"query {m} outside [{a[0]}, {a[-1]}]")
        if a.size == 1:
            per_axis.append([(0, 1.0)])
            continue
        i = int(np.clip(np.searchsorted(a, m, side="right") - 1, 0, a.size - 2))
        t = (m - a[i]) / (a[i + 1] - a[i])
        if not extrapolate:
            t = min(max(t, 0.0), 1.0)
        per_axis.append([(i, 1.0 - t), (i + 1, t)])
    acc = {}
    for combo in itertools.product(*per_axis):
        wgt = float(np.prod([w for _, w in combo]))
        if wgt == 0.0 and not extrapolate:
            continue
        node = lattice.ops[int(np.ravel_multi_index([i for i, _ in combo], shape))]
        for name in ("c", "A", "H"):
            m = getattr(node, name)
            if m is not None:
                acc[name] = acc.get(name, 0.0) + wgt * m
    return PolyOperators(**acc)


# --- JSON serialization --------------------------------------------------

def _enc(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d):
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def to_json(ops: PolyOperators) -> str:
    doc = {
        "K": ops.K,
        "s": n_quadratic(ops.K),
        "lambda": ops.reg,
        "blocks": {n: _enc(getattr(ops, n)) for n in "cAH" if getattr(ops, n) is not None},
    }
    return json.dumps(doc, indent=1)


def from_json(text) -> PolyOperators:
    doc = json.loads(text)
    blocks = {n: _dec(v) for n, v in doc["blocks"].items()}
    ops = PolyOperators(reg=float(doc["lambda"]), **blocks)
    if ops.K != doc["K"]:
        raise ValueError("K metadata does not match the stored blocks")
    return ops
