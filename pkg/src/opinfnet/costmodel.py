"""Analytical FLOP counts for evaluating and training reduced operators.

Counts are leading-order estimates with unit big-O constants. The network
count follows a fully connected layout with an input layer, ``n_h`` hidden
layers of ``n_n`` neurons and an output layer without activation; in terms of
:class:`opinfnet.neural.MlpSpec` this is ``n_hidden = n_h + 1`` ReLU layers.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

OPERATOR_KINDS = ("standard", "matrix", "spsd", "skew", "vector", "spsd_potential")
EVAL_KINDS = ("linear", "quadratic", "spsd_apply", "skew_apply", "nn_forward", "nn_opinf",
              "spsd_potential")
TRAIN_METHODS = ("popinf_linear", "popinf_quadratic", "nnopinf")


@dataclass(frozen=True)
class CostQuery:
    """Problem and network sizes; ``None`` widths default to ``K``."""

    K: int
    n_h: int = 3
    n_n: int | None = None
    n_in: int | None = None
    n_out: int | None = None
    n_oa: int = 1
    N_s: int = 10_000
    n_epochs: int = 10_000

    def __post_init__(self):
        for name in ("K", "n_h", "n_oa", "N_s", "n_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("n_n", "n_in", "n_out"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def neurons(self):
        return self.K if self.n_n is None else self.n_n

    @property
    def inputs(self):
        return self.K if self.n_in is None else self.n_in


def eval_nout(kind, K) -> int:
    kind = _op_kind(kind)
    if kind in ("standard", "vector"):
        return K
    if kind == "matrix":
        return K * K
    if kind in ("spsd", "spsd_potential"):
        return K * (K + 1) // 2
    return K * (K - 1) // 2


def _op_kind(kind):
    k = str(kind).lower().replace("-", "_")
    aliases = {"spsdpotential": "spsd_potential", "potential": "spsd_potential", "nn": "standard"}
    k = aliases.get(k, k)
    if k not in OPERATOR_KINDS:
        raise ValueError(f"unknown operator kind {kind!r}")
    return k


def nn_forward(q: CostQuery, n_out=None) -> int:
    n, ni = q.neurons, q.inputs
    no = q.n_out if n_out is None else n_out
    if no is None:
        raise ValueError("nn_forward needs an output width")
    return 2 * n * ni + q.n_oa * n + q.n_h * (2 * n * n + q.n_oa * n) + 2 * n * no


def apply_cost(kind, K) -> int:
    kind = _op_kind(kind)
    if kind in ("spsd", "skew", "spsd_potential"):
        return K * K
    if kind == "matrix":
        return 2 * K * K
    return 0


def eval_cost(kind, q: CostQuery, op=None) -> float:
    """Evaluation FLOPs.

    ``kind`` is one of :data:`EVAL_KINDS`; ``nn_opinf`` needs the operator kind
    ``op``, whose output width then fixes ``n_out``.
    """
    K = q.K
    if kind == "linear":
        return 2 * K * K
    if kind == "quadratic":
        return K ** 3 + 1.5 * K * K
    if kind in ("spsd_apply", "skew_apply"):
        return K * K
    if kind == "nn_forward":
        return nn_forward(q)
    if kind == "nn_opinf":
        if op is None:
            raise ValueError("nn_opinf needs an operator kind")
        op = _op_kind(op)
        if op == "spsd_potential":
            return eval_cost("spsd_potential", q)
        return nn_forward(q, eval_nout(op, K)) + apply_cost(op, K)
    if kind == "spsd_potential":
        return 3 * nn_forward(q, eval_nout("spsd", K)) + K * K
    raise ValueError(f"unknown cost kind {kind!r}")


def training_cost(method, q: CostQuery, op=None) -> float:
    """Offline cost: least squares for P-OpInf, epochs of forward plus backward passes for NN-OpInf."""
    K = q.K
    if method in ("popinf_linear", "popinf_quadratic"):
        p = K if method == "popinf_linear" else K * (K + 1) // 2
        return K * (q.N_s * p * p + p ** 3)
    if method == "nnopinf":
        return 3 * q.N_s * q.n_epochs * eval_cost("nn_opinf", q, op or "standard")
    raise ValueError(f"unknown training method {method!r}")


def ratio_table(kinds=OPERATOR_KINDS, Ks=(2, 4, 8, 16, 32, 64, 128), defaults=None,
                measure="eval"):
    """Cost of each NN-OpInf operator kind relative to linear and quadratic P-OpInf.

    Widths follow ``n_n = K`` and ``n_in = K`` unless ``defaults`` (a dict of
    :class:`CostQuery` fields) says otherwise. ``measure`` is ``"eval"`` or ``"train"``.
    """
    Ks = list(Ks)
    if not Ks:
        raise ValueError("K range must be non-empty")
    defaults = dict(defaults or {})
    rows = []
    for K in Ks:
        q = CostQuery(K=K, **defaults)
        if measure == "eval":
            lin, quad = eval_cost("linear", q), eval_cost("quadratic", q)
        elif measure == "train":
            lin, quad = training_cost("popinf_linear", q), training_cost("popinf_quadratic", q)
        else:
            raise ValueError("measure must be 'eval' or 'train'")
        for kind in kinds:
            if kind in ("linear", "quadratic"):
                cost = lin if kind == "linear" else quad
            elif measure == "eval":
                cost = eval_cost("nn_opinf", q, kind)
            else:
                cost = training_cost("nnopinf", q, kind)
            rows.append({"K": K, "kind": kind, "cost": float(cost),
                         "ratio_vs_linear": cost / lin, "ratio_vs_quadratic": cost / quad})
    return rows


def table_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["K", "kind", "cost", "ratio_vs_linear", "ratio_vs_quadratic"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def doubling_exponent(kind, K, defaults=None, op=None) -> float:
    """``log2(cost(2K) / cost(K))``: the empirical polynomial degree in ``K``."""
    import math

    q1 = CostQuery(K=K, **(defaults or {}))
    q2 = replace(q1, K=2 * K)
    return math.log2(eval_cost(kind, q2, op) / eval_cost(kind, q1, op))
