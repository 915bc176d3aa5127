"""Structured reduced operators, their additive composition and ensembles.

Every operator maps normalized reduced inputs to a normalized velocity
contribution. Batches are row-major: ``X`` is ``(B, K)`` and ``MU`` is
``(B, n_params)``. The learnable part is either a network of the inputs named
in an :class:`InputSignature` or, when no signature is given, a constant vector
holding the raw packed entries directly.

Kinds and their action on a sample ``x`` given the raw output ``n``:

=============  ==============================================  ==============
kind           contribution                                    raw width
=============  ==============================================  ==============
Standard       ``n``                                           K
Matrix         ``reshape(n, K, K) @ x``                        K^2
Spsd           ``L (L^T x)`` with ``L = unpack_lower(n)``      K(K+1)/2
Skew           ``(S - S^T) x`` with ``S = unpack_strict(n)``   K(K-1)/2
Vector         ``n`` (constant, or a network of ``mu``)        K
SpsdPotential  ``grad_x [x^T L L^T x]``, ``L`` may depend on x K(K+1)/2
=============  ==============================================  ==============
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels, neural
from ._kernels_py import lower_index, n_lower, n_strict, strict_index

KINDS = ("Standard", "Matrix", "Spsd", "Skew", "Vector", "SpsdPotential")
MANIFEST = "manifest.json"


def n_raw(kind, K):
    if kind in ("Standard", "Vector"):
        return K
    if kind == "Matrix":
        return K * K
    if kind in ("Spsd", "SpsdPotential"):
        return n_lower(K)
    if kind == "Skew":
        return n_strict(K)
    raise ValueError(f"unknown operator kind {kind!r}")


# --- packing ---------------------------------------------------------------

def softplus(v):
    return np.logaddexp(0.0, v)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def diag_positions(K):
    i = np.arange(K)
    return i * (i + 1) // 2 + i


def unpack_lower(v, K, positive=False):
    """Row-by-row fill of the lower triangle (diagonal included)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (n_lower(K),):
        raise ValueError(f"expected {n_lower(K)} entries for K={K}, got {v.shape}")
    L = np.zeros((K, K))
    L[lower_index(K)] = v
    if positive:
        d = np.arange(K)
        L[d, d] = softplus(L[d, d])
    return L


def unpack_strict(v, K):
    v = np.asarray(v, dtype=float)
    if v.shape != (n_strict(K),):
        raise ValueError(f"expected {n_strict(K)} entries for K={K}, got {v.shape}")
    S = np.zeros((K, K))
    S[strict_index(K)] = v
    return S


def pack_lower(L):
    L = np.asarray(L, dtype=float)
    return L[lower_index(L.shape[0])].copy()


def pack_strict(S):
    S = np.asarray(S, dtype=float)
    return S[strict_index(S.shape[0])].copy()


def _unpack_batch(P, K, strict=False):
    out = np.zeros((P.shape[0], K, K))
    r, c = strict_index(K) if strict else lower_index(K)
    out[:, r, c] = P
    return out


# --- operators -------------------------------------------------------------

@dataclass(frozen=True)
class InputSignature:
    """Ordered input groups (``"x"`` and/or ``"mu"``) feeding an operator network."""

    groups: tuple
    K: int
    n_params: int = 0

    def __post_init__(self):
        g = tuple(self.groups)
        object.__setattr__(self, "groups", g)
        if not g or len(set(g)) != len(g) or set(g) - {"x", "mu"}:
            raise ValueError(f"signature groups must be a non-empty subset of (x, mu), got {g}")
        if "mu" in g and self.n_params < 1:
            raise ValueError("a mu input needs n_params >= 1")

    @property
    def width(self) -> int:
        return sum(self.K if s == "x" else self.n_params for s in self.groups)

    @property
    def x_columns(self):
        off = 0
        for s in self.groups:
            if s == "x":
                return slice(off, off + self.K)
            off += self.n_params
        return None

    def build(self, X, MU):
        parts = [X if s == "x" else MU for s in self.groups]
        return parts[0] if len(parts) == 1 else np.hstack(parts)


class StructuredOperator:
    """One learnable block of the reduced right-hand side.

    Parameters
    ----------
    kind : str
        One of :data:`KINDS`.
    K : int
        Reduced dimension.
    signature : InputSignature or None
        Network inputs; ``None`` makes the raw output a learnable constant.
    params : MlpParams or ndarray
        Network parameters, or the constant raw vector.
    positive : bool
        Pass diagonal entries of ``L`` through softplus (Spsd kinds only).
    sign : float
        Multiplies the contribution; ``-1`` turns an Spsd block dissipative.
    """

    def __init__(self, kind, K, signature=None, params=None, positive=False, sign=1.0):
        if kind not in KINDS:
            raise ValueError(f"unknown operator kind {kind!r}")
        if positive and kind not in ("Spsd", "SpsdPotential"):
            raise ValueError("the positivity flag only applies to Spsd kinds")
        self.kind = kind
        self.K = int(K)
        self.signature = signature
        self.positive = bool(positive)
        self.sign = float(sign)
        width = n_raw(kind, self.K)
        if signature is None:
            self.params = np.zeros(width) if params is None else np.array(params, dtype=float)
            if self.params.shape != (width,):
                raise ValueError(f"{kind} constant needs {width} entries")
        else:
            if signature.K != self.K:
                raise ValueError("signature K disagrees with operator K")
            if kind == "Vector" and "x" in signature.groups:
                raise ValueError("Vector operators may only depend on mu")
            if not isinstance(params, neural.MlpParams):
                raise TypeError("network operators need MlpParams")
            if params.spec.n_in != signature.width or params.spec.n_out != width:
                raise ValueError(f"network must map {signature.width} -> {width}")
            self.params = params
        self._diag = diag_positions(self.K)

    # parameters
    @property
    def is_constant(self) -> bool:
        return self.signature is None

    @property
    def n_weights(self) -> int:
        return self.params.size if self.is_constant else self.params.spec.n_params

    def get_flat(self):
        return (self.params if self.is_constant else self.params.flat).copy()

    def set_flat(self, v):
        if self.is_constant:
            self.params[:] = v
        else:
            self.params.set_flat(v)

    def copy(self) -> "StructuredOperator":
        p = self.params.copy()
        return StructuredOperator(self.kind, self.K, self.signature, p, self.positive, self.sign)

    # transform from raw output to the packed factor
    def _transform(self, raw):
        if not self.positive:
            return raw
        P = raw.copy()
        P[:, self._diag] = softplus(raw[:, self._diag])
        return P

    def _transform_slope(self, raw):
        d = np.ones_like(raw)
        if self.positive:
            d[:, self._diag] = _sigmoid(raw[:, self._diag])
        return d

    # evaluation
    def forward(self, X, MU=None, need_grad=False):
        """Contribution for a batch; returns ``(out, ctx)``, ``ctx`` feeds :meth:`vjp`."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.K:
            raise ValueError(f"expected a (B, {self.K}) state batch, got {X.shape}")
        B = X.shape[0]
        cache = None
        if self.is_constant:
            raw = np.broadcast_to(self.params, (B, self.params.size))
        else:
            if "mu" in self.signature.groups:
                MU = np.asarray(MU, dtype=float)
                if MU.ndim != 2 or MU.shape != (B, self.signature.n_params):
                    raise ValueError("parameter batch does not match the signature")
            eta = self.signature.build(X, MU)
            raw, cache = neural.forward(self.params, eta, cache=True)
        ctx = {"X": X, "raw": raw, "cache": cache}
        kind = self.kind
        if kind in ("Standard", "Vector"):
            out = np.array(raw)
        elif kind == "Matrix":
            out = np.einsum("bij,bj->bi", raw.reshape(B, self.K, self.K), X)
        elif kind == "Skew":
            out = kernels.skew_apply(raw, X)
        else:
            P = self._transform(raw)
            ctx["P"] = P
            if kind == "Spsd":
                out = kernels.spsd_apply(P, X)
            else:
                out = 2.0 * kernels.spsd_apply(P, X)
                if not self.is_constant:
                    # d(x^T L L^T x)/dP, then through the network's x inputs
                    qP = kernels.spsd_vjp(P, X, X)[0]
                    ctx["qP"] = qP
                    gin = neural.grad_input(self.params, cache, qP * self._transform_slope(raw))
                    out += gin[:, self.signature.x_columns]
        if self.sign != 1.0:
            out *= self.sign
        return out, (ctx if need_grad else None)

    def vjp(self, ctx, G):
        """Gradient of ``sum_b <G_b, out_b>`` with respect to the flat parameters."""
        G = np.asarray(G, dtype=float) * self.sign
        X, raw, cache = ctx["X"], ctx["raw"], ctx["cache"]
        B = X.shape[0]
        kind = self.kind
        if kind in ("Standard", "Vector"):
            dn = G
        elif kind == "Matrix":
            dn = (G[:, :, None] * X[:, None, :]).reshape(B, -1)
        elif kind == "Skew":
            dn = kernels.skew_vjp(raw, X, G)[0]
        elif kind == "Spsd":
            dn = kernels.spsd_vjp(ctx["P"], X, G)[0] * self._transform_slope(raw)
        else:
            return self._potential_vjp(ctx, G)
        if self.is_constant:
            return dn.sum(axis=0)
        return neural.grad_params(self.params, cache, dn)

    def _potential_vjp(self, ctx, G):
        # psi = sum_b G_b . g_b with g = 2 L L^T x + J^T q. Differentiate psi as a
        # function of (P, Pdot), where Pdot is the directional derivative of P along
        # G through the x inputs.
        X, raw, cache, P = ctx["X"], ctx["raw"], ctx["cache"], ctx["P"]
        K = self.K
        slope = self._transform_slope(raw)
        dP = 2.0 * kernels.spsd_vjp(P, X, G)[0]
        if self.is_constant:
            return (dP * slope).sum(axis=0)
        teta = np.zeros((X.shape[0], self.signature.width))
        teta[:, self.signature.x_columns] = G
        ndot, tin = neural.jvp(self.params, cache, teta)
        Pdot = ndot * slope
        Ld = _unpack_batch(Pdot, K)
        zdot = np.einsum("bij,bi->bj", Ld, X)
        r, c = lower_index(K)
        dP += 2.0 * X[:, r] * zdot[:, c]
        dPdot = ctx["qP"]
        dn = dP * slope
        dndot = dPdot * slope
        if self.positive:
            d = self._diag
            s = _sigmoid(raw[:, d])
            dn[:, d] += dPdot[:, d] * s * (1.0 - s) * ndot[:, d]
        return neural.grad_params_dual(self.params, cache, tin, dn, dndot)

    def __call__(self, x, mu=None):
        x = np.asarray(x, dtype=float)
        MU = None if mu is None else np.atleast_2d(np.asarray(mu, dtype=float))
        return self.forward(x[None, :], MU)[0][0]

    def factor(self, x, mu=None):
        """Packed ``L`` / ``S`` (after transforms) at one sample."""
        x = np.asarray(x, dtype=float)[None, :]
        if self.is_constant:
            raw = self.params[None, :]
        else:
            MU = None if mu is None else np.atleast_2d(np.asarray(mu, dtype=float))
            raw = neural.forward(self.params, self.signature.build(x, MU))
        return self._transform(raw)[0]


def make_operator(kind, K, inputs=("x",), n_params=0, n_hidden=3, width=None, seed=0,
                  positive=False, sign=1.0) -> StructuredOperator:
    """Network operator with Kaiming initialization, or a zero constant when ``inputs`` is empty."""
    if not inputs:
        return StructuredOperator(kind, K, None, None, positive, sign)
    sig = InputSignature(tuple(inputs), K, n_params)
    spec = neural.MlpSpec(sig.width, n_raw(kind, K), n_hidden, K if width is None else width)
    return StructuredOperator(kind, K, sig, neural.init(spec, seed), positive, sign)


# --- models ----------------------------------------------------------------

class RomModel:
    """Additive composition of operators with max-abs normalization scales.

    Physical reduced velocity: ``dx_scale * sum_r g_r(x / x_scale, mu / mu_scale)``.
    """

    def __init__(self, operators, K, n_params=0, x_scale=1.0, dx_scale=1.0, mu_scale=1.0,
                 seed=None):
        self.operators = list(operators)
        self.K = int(K)
        self.n_params = int(n_params)
        for op in self.operators:
            if op.K != self.K:
                raise ValueError("all operators must share K")
        self.set_scales(x_scale, dx_scale, mu_scale)
        self.seed = seed

    def set_scales(self, x_scale, dx_scale, mu_scale=1.0):
        if min(x_scale, dx_scale, mu_scale) <= 0:
            raise ValueError("scales must be positive")
        self.x_scale, self.dx_scale, self.mu_scale = float(x_scale), float(dx_scale), float(mu_scale)

    @property
    def n_weights(self) -> int:
        return sum(op.n_weights for op in self.operators)

    def get_flat(self):
        if not self.operators:
            return np.zeros(0)
        return np.concatenate([op.get_flat() for op in self.operators])

    def set_flat(self, v):
        off = 0
        for op in self.operators:
            n = op.n_weights
            op.set_flat(v[off:off + n])
            off += n

    def copy(self) -> "RomModel":
        return RomModel([op.copy() for op in self.operators], self.K, self.n_params,
                        self.x_scale, self.dx_scale, self.mu_scale, self.seed)

    def forward_normalized(self, Xn, MUn=None, need_grad=False):
        out = np.zeros((Xn.shape[0], self.K))
        ctxs = []
        for op in self.operators:
            o, ctx = op.forward(Xn, MUn, need_grad)
            out += o
            ctxs.append(ctx)
        return out, ctxs

    def vjp(self, ctxs, G):
        if not self.operators:
            return np.zeros(0)
        return np.concatenate([op.vjp(c, G) for op, c in zip(self.operators, ctxs)])

    def _mu_batch(self, mu, B):
        if self.n_params == 0:
            return None
        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 1:
            if mu.size != self.n_params:
                raise ValueError(f"expected {self.n_params} parameters")
            mu = np.broadcast_to(mu, (B, self.n_params))
        return mu / self.mu_scale

    def eval_batch(self, X, mu=None):
        """Physical velocities for states stored one per column (``K x n``)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        MU = self._mu_batch(mu.T if mu is not None and np.ndim(mu) == 2 else mu, X.shape[1])
        out, _ = self.forward_normalized(X.T / self.x_scale, MU)
        return self.dx_scale * out.T

    def rhs(self, x, mu=None):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.K,):
            raise ValueError(f"expected a reduced state of length {self.K}")
        out, _ = self.forward_normalized(x[None, :] / self.x_scale, self._mu_batch(mu, 1))
        return self.dx_scale * out[0]

    __call__ = rhs

    def bind(self, mu=None):
        return lambda x: self.rhs(x, mu)


eval_model = RomModel.rhs


class EnsembleModel:
    """Uniform average of structurally identical member models."""

    def __init__(self, members, seeds=None):
        self.members = list(members)
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        sig0 = _architecture(self.members[0])
        for m in self.members[1:]:
            if _architecture(m) != sig0:
                raise ValueError("ensemble members must share one architecture")
        self.seeds = list(seeds) if seeds is not None else [m.seed for m in self.members]

    @property
    def K(self):
        return self.members[0].K

    @property
    def n_params(self):
        return self.members[0].n_params

    def rhs(self, x, mu=None):
        acc = self.members[0].rhs(x, mu)
        for m in self.members[1:]:
            acc = acc + m.rhs(x, mu)
        return acc / len(self.members)

    __call__ = rhs

    def eval_batch(self, X, mu=None):
        return sum(m.eval_batch(X, mu) for m in self.members) / len(self.members)

    def bind(self, mu=None):
        return lambda x: self.rhs(x, mu)


def eval_ensemble(ens: EnsembleModel, x, mu=None):
    return ens.rhs(x, mu)


def _architecture(model):
    out = [model.K, model.n_params]
    for op in model.operators:
        spec = None if op.is_constant else op.params.spec
        groups = None if op.signature is None else op.signature.groups
        out.append((op.kind, groups, spec, op.positive, op.sign))
    return out


# --- structure checks --------------------------------------------------------

def structure_report(op: StructuredOperator, X, MU=None) -> dict:
    """Check the algebraic structure an operator claims on sample inputs (rows of ``X``)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("need at least one sample")
    K = op.K
    if op.is_constant:
        raw = np.broadcast_to(op.params, (X.shape[0], op.params.size))
    else:
        MU = None if MU is None else np.atleast_2d(np.asarray(MU, dtype=float))
        raw = neural.forward(op.params, op.signature.build(X, MU))
    if op.kind == "Skew":
        S = _unpack_batch(np.ascontiguousarray(raw), K, strict=True)
        A = S - S.transpose(0, 2, 1)
        Ax = np.einsum("bij,bj->bi", A, X)
        sym = np.linalg.norm(A + A.transpose(0, 2, 1), axis=(1, 2))
        anorm = np.linalg.norm(A, axis=(1, 2))
        qf = np.abs(np.einsum("bi,bi->b", X, Ax))
        scale = np.linalg.norm(X, axis=1) * np.linalg.norm(Ax, axis=1)
        return {
            "kind": op.kind,
            "claims": "skew-symmetric",
            "max_sym_residual": float(sym.max()),
            "max_rel_sym_residual": float(np.max(sym / np.where(anorm > 0, anorm, 1.0))),
            "max_quadratic_form": float(qf.max()),
            "max_rel_quadratic_form": float(np.max(qf / np.where(scale > 0, scale, 1.0))),
        }
    if op.kind in ("Spsd", "SpsdPotential"):
        L = _unpack_batch(op._transform(np.ascontiguousarray(raw)), K)
        M = L @ L.transpose(0, 2, 1)
        z = np.einsum("bji,bj->bi", L, X)
        qf = np.einsum("bi,bij,bj->b", X, M, X)
        zz = np.einsum("bi,bi->b", z, z)
        rel = qf / np.where(zz > 0, zz, 1.0)
        return {
            "kind": op.kind,
            "claims": "positive definite" if op.positive else "positive semi-definite",
            "min_eigenvalue": float(np.linalg.eigvalsh(M).min()),
            "min_quadratic_form": float(qf.min()),
            "min_rel_quadratic_form": float(np.min(np.where(zz > 0, rel, 0.0))),
        }
    return {"kind": op.kind, "claims": "no structure claimed"}


# --- serialization -----------------------------------------------------------

def save_model(model, directory):
    """Write an ensemble (or single model) as a manifest plus one blob per operator."""
    members = model.members if isinstance(model, EnsembleModel) else [model]
    os.makedirs(directory, exist_ok=True)
    doc = {"format": "opinfnet-model/1", "K": members[0].K, "n_params": members[0].n_params,
           "ensemble": isinstance(model, EnsembleModel), "members": []}
    for mi, m in enumerate(members):
        entry = {"seed": m.seed, "x_scale": m.x_scale, "dx_scale": m.dx_scale,
                 "mu_scale": m.mu_scale, "operators": []}
        for oi, op in enumerate(m.operators):
            fname = f"member{mi}_op{oi}_{op.kind}.bin"
            path = os.path.join(directory, fname)
            if op.is_constant:
                neural.save_raw(path, op.params)
            else:
                neural.save_params(path, op.params)
            entry["operators"].append({
                "file": fname, "kind": op.kind, "positive": op.positive, "sign": op.sign,
                "signature": None if op.signature is None else list(op.signature.groups),
            })
        doc["members"].append(entry)
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(directory):
    with open(os.path.join(directory, MANIFEST)) as fh:
        doc = json.load(fh)
    K, n_params = doc["K"], doc["n_params"]
    members = []
    for entry in doc["members"]:
        ops = []
        for od in entry["operators"]:
            blob = neural.load_blob(os.path.join(directory, od["file"]))
            sig = None if od["signature"] is None else InputSignature(tuple(od["signature"]), K, n_params)
            ops.append(StructuredOperator(od["kind"], K, sig, blob, od["positive"], od["sign"]))
        members.append(RomModel(ops, K, n_params, entry["x_scale"], entry["dx_scale"],
                                entry["mu_scale"], entry["seed"]))
    if doc["ensemble"]:
        return EnsembleModel(members, [m.seed for m in members])
    return members[0]


# --- model families ----------------------------------------------------------

NN_FAMILIES = ("NN-OpInf-NN", "NN-OpInf-SS", "NN-OpInf-SPSD-f")


def build_family(name, K, n_params=0, seed=0, n_hidden=3, width=None) -> RomModel:
    """Untrained model for one of the neural families.

    ``n_params > 0`` appends ``mu`` to every network input; the forcing of
    SPSD-f then becomes a network of ``mu``.
    """
    inputs = ("x", "mu") if n_params else ("x",)
    kw = dict(n_params=n_params, n_hidden=n_hidden, width=width)
    if name == "NN-OpInf-NN":
        ops = [make_operator("Standard", K, inputs, seed=seed, **kw)]
    elif name == "NN-OpInf-SS":
        ops = [make_operator("Skew", K, inputs, seed=seed, **kw)]
    elif name == "NN-OpInf-SPSD-f":
        ops = [make_operator("Spsd", K, inputs, seed=seed, positive=True, sign=-1.0, **kw),
               make_operator("Vector", K, ("mu",) if n_params else (), seed=seed + 7919, **kw)]
    else:
        raise ValueError(f"unknown neural family {name!r}")
    return RomModel(ops, K, n_params, seed=seed)
