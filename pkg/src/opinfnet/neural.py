"""Dense ReLU networks with hand-written reverse-mode gradients.

Batches are row-major: inputs are ``(B, n_in)`` and outputs ``(B, n_out)``.
Gradients with respect to parameters are summed over the batch.

Besides the usual backward pass, :func:`jvp` pushes an input tangent through the
network and :func:`grad_params_dual` differentiates a scalar that depends on both
the primal output and that tangent. Because ReLU masks are piecewise constant,
this is all that is needed for the gradient of a gradient (the potential operator).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._binio import read_f64, read_header, write_f64, write_header

MLP_MAGIC = b"OIFMLP1\0"


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """``n_hidden`` ReLU layers of ``width`` units; ``n_hidden = 0`` is a single affine map."""

    n_in: int
    n_out: int
    n_hidden: int = 3
    width: int = 8

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or self.n_hidden < 0:
            raise ValueError("widths must be >= 1 and n_hidden >= 0")
        if self.n_hidden > 0 and self.width < 1:
            raise ValueError("hidden width must be >= 1")

    @property
    def layer_shapes(self):
        dims = [self.n_in] + [self.width] * self.n_hidden + [self.n_out]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


class MlpParams:
    """Flat parameter vector with per-layer ``(W, b)`` views.

    Layout: for each layer, ``W`` row-major (out x in) followed by ``b``.
    """

    def __init__(self, spec: MlpSpec, flat=None):
        self.spec = spec
        self.flat = np.zeros(spec.n_params) if flat is None else np.array(flat, dtype=float)
        if self.flat.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got {self.flat.shape}")
        self.version = 0
        self._build_views()

    def _build_views(self):
        self.layers = []
        off = 0
        for o, i in self.spec.layer_shapes:
            W = self.flat[off:off + o * i].reshape(o, i)
            off += o * i
            b = self.flat[off:off + o]
            off += o
            self.layers.append((W, b))

    def set_flat(self, values):
        self.flat[:] = values
        self.version += 1

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())

    @classmethod
    def from_layers(cls, spec, layers):
        flat = np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])
        return cls(spec, flat)


def init(spec: MlpSpec, seed) -> MlpParams:
    """Kaiming-uniform weights for ReLU (bound ``sqrt(6 / fan_in)``), biases in ``+-1/sqrt(fan_in)``."""
    rng = np.random.default_rng(seed)
    layers = []
    for o, i in spec.layer_shapes:
        wb = np.sqrt(6.0 / i)
        bb = 1.0 / np.sqrt(i)
        layers.append((rng.uniform(-wb, wb, size=(o, i)), rng.uniform(-bb, bb, size=o)))
    return MlpParams.from_layers(spec, layers)


class Cache:
    __slots__ = ("inputs", "masks", "owner", "version")

    def __init__(self, params):
        self.inputs = []
        self.masks = []
        self.owner = params
        self.version = params.version

    def check(self, params):
        if params is not self.owner or params.version != self.version:
            raise StaleCacheError("cache was produced with different parameters")


def forward(params: MlpParams, X, cache=False):
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.shape[1] != params.spec.n_in:
        raise ValueError(f"input width {X.shape[1]} != {params.spec.n_in}")
    c = Cache(params) if cache else None
    h = X
    last = len(params.layers) - 1
    for li, (W, b) in enumerate(params.layers):
        if c is not None:
            c.inputs.append(h)
        a = h @ W.T + b
        if li < last:
            m = a > 0.0
            h = a * m
            if c is not None:
                c.masks.append(m)
        else:
            h = a
    out = h[0] if squeeze else h
    return (out, c) if cache else out


def _as_batch(adj):
    adj = np.asarray(adj, dtype=float)
    return adj[None, :] if adj.ndim == 1 else adj


def grad_params(params: MlpParams, cache: Cache, adjoint) -> np.ndarray:
    """Gradient of ``sum_b <adjoint_b, output_b>`` with respect to the flat parameters."""
    cache.check(params)
    g = _as_batch(adjoint)
    out = np.empty_like(params.flat)
    spans = _spans(params.spec)
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        (w0, w1), (b0, b1) = spans[li]
        out[w0:w1] = (g.T @ cache.inputs[li]).ravel()
        out[b0:b1] = g.sum(axis=0)
        if li > 0:
            g = (g @ W) * cache.masks[li - 1]
    return out


def grad_input(params: MlpParams, cache: Cache, adjoint) -> np.ndarray:
    """Gradient of ``<adjoint_b, output_b>`` with respect to each input row."""
    cache.check(params)
    g = _as_batch(adjoint)
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        g = g @ W
        if li > 0:
            g = g * cache.masks[li - 1]
    return g


def backward(params: MlpParams, cache: Cache, adjoint, want_input=False):
    """Parameter gradient and, optionally, input gradient from one sweep."""
    cache.check(params)
    g = _as_batch(adjoint)
    out = np.empty_like(params.flat)
    spans = _spans(params.spec)
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        (w0, w1), (b0, b1) = spans[li]
        out[w0:w1] = (g.T @ cache.inputs[li]).ravel()
        out[b0:b1] = g.sum(axis=0)
        if li > 0 or want_input:
            g = g @ W
            if li > 0:
                g = g * cache.masks[li - 1]
    return (out, g) if want_input else out


def jvp(params: MlpParams, cache: Cache, tangent):
    """Push input tangents through the network; returns output tangents and the per-layer inputs."""
    cache.check(params)
    t = _as_batch(tangent)
    tin = []
    last = len(params.layers) - 1
    for li, (W, _) in enumerate(params.layers):
        tin.append(t)
        t = t @ W.T
        if li < last:
            t = t * cache.masks[li]
    return t, tin


def grad_params_dual(params: MlpParams, cache: Cache, tangent_inputs, adj_primal, adj_tangent):
    """Parameter gradient of a scalar ``psi(output, output_tangent)``.

    ``adj_primal`` and ``adj_tangent`` are ``d psi / d output`` and
    ``d psi / d output_tangent``; ``tangent_inputs`` comes from :func:`jvp`.
    """
    cache.check(params)
    g = _as_batch(adj_primal)
    gt = _as_batch(adj_tangent)
    out = np.empty_like(params.flat)
    spans = _spans(params.spec)
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        (w0, w1), (b0, b1) = spans[li]
        out[w0:w1] = (g.T @ cache.inputs[li] + gt.T @ tangent_inputs[li]).ravel()
        out[b0:b1] = g.sum(axis=0)
        if li > 0:
            m = cache.masks[li - 1]
            g = (g @ W) * m
            gt = (gt @ W) * m
    return out


_SPAN_CACHE: dict = {}


def _spans(spec: MlpSpec):
    spans = _SPAN_CACHE.get(spec)
    if spans is None:
        spans, off = [], 0
        for o, i in spec.layer_shapes:
            spans.append(((off, off + o * i), (off + o * i, off + o * i + o)))
            off += o * i + o
        _SPAN_CACHE[spec] = spans
    return spans


def save_params(path_or_fh, params: MlpParams):
    s = params.spec
    if hasattr(path_or_fh, "write"):
        _write(path_or_fh, s, params.flat)
    else:
        with open(path_or_fh, "wb") as fh:
            _write(fh, s, params.flat)


def _write(fh, s, flat):
    write_header(fh, MLP_MAGIC, s.n_in, s.n_out, s.n_hidden, s.width, flat.size)
    write_f64(fh, flat)


def save_raw(path, values):
    """Constant parameter vector in the same container (``n_in = 0``)."""
    values = np.asarray(values, dtype=float)
    with open(path, "wb") as fh:
        write_header(fh, MLP_MAGIC, 0, values.size, 0, 0, values.size)
        write_f64(fh, values)


def load_blob(path):
    """Return an :class:`MlpParams`, or a plain array for constant blobs."""
    with open(path, "rb") as fh:
        n_in, n_out, n_hidden, width, count = read_header(fh, MLP_MAGIC, 5)
        flat = read_f64(fh, count)
    if n_in == 0:
        return flat
    return MlpParams(MlpSpec(n_in, n_out, n_hidden, width), flat)


load_params = load_blob

__all__ = ["MlpSpec", "MlpParams", "init", "forward", "grad_params", "grad_input", "backward",
           "jvp", "grad_params_dual", "save_params", "load_params", "StaleCacheError"]
