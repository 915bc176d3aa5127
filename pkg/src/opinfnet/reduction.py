"""POD bases, projection, derivative estimation, max-abs scaling and splits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binio import read_f64, read_header, write_f64, write_header

POD_MAGIC = b"OIFPOD1\0"


class DimensionError(ValueError):
    pass


@dataclass
class SnapshotMatrix:
    data: np.ndarray
    blocks: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if not self.blocks:
            self.blocks = [self.data.shape[1]]
        if sum(self.blocks) != self.data.shape[1]:
            raise DimensionError("block sizes must sum to the column count")

    @classmethod
    def from_blocks(cls, mats):
        mats = [np.asarray(m, dtype=float) for m in mats]
        return cls(np.hstack(mats), [m.shape[1] for m in mats])

    def block(self, i):
        start = sum(self.blocks[:i])
        return self.data[:, start:start + self.blocks[i]]


@dataclass
class PodBasis:
    V: np.ndarray
    singular_values: np.ndarray

    @property
    def K(self) -> int:
        return self.V.shape[1]

    @property
    def N(self) -> int:
        return self.V.shape[0]

    def truncate(self, K) -> "PodBasis":
        if not 1 <= K <= self.K:
            raise ValueError(f"cannot truncate a {self.K}-mode basis to {K}")
        return PodBasis(self.V[:, :K].copy(), self.singular_values)

    def projection_error(self) -> float:
        """Squared Frobenius projection error of the snapshots used to build the basis."""
        return float(np.sum(self.singular_values[self.K:] ** 2))


def compute_pod(X, K) -> PodBasis:
    """Leading ``K`` left singular vectors of the snapshot matrix."""
    data = X.data if isinstance(X, SnapshotMatrix) else np.asarray(X, dtype=float)
    if not 1 <= K <= min(data.shape):
        raise ValueError(f"K={K} outside [1, {min(data.shape)}]")
    U, s, _ = np.linalg.svd(data, full_matrices=False)
    return PodBasis(U[:, :K].copy(), s)


def project(basis, X):
    V = basis.V if isinstance(basis, PodBasis) else np.asarray(basis)
    X = np.asarray(X, dtype=float)
    if X.shape[0] != V.shape[0]:
        raise DimensionError(f"basis has {V.shape[0]} rows, data has {X.shape[0]}")
    return V.T @ X


def lift(basis, Xr):
    V = basis.V if isinstance(basis, PodBasis) else np.asarray(basis)
    return V @ np.asarray(Xr, dtype=float)


def save_pod(path, basis: PodBasis):
    with open(path, "wb") as fh:
        write_header(fh, POD_MAGIC, basis.N, basis.K, basis.singular_values.size)
        write_f64(fh, basis.V, order="F")
        write_f64(fh, basis.singular_values)


def load_pod(path) -> PodBasis:
    with open(path, "rb") as fh:
        n, k, ns = read_header(fh, POD_MAGIC, 3)
        V = read_f64(fh, n * k, (n, k), order="F")
        s = read_f64(fh, ns)
    return PodBasis(V, s)


def estimate_derivatives(states, times):
    """Second-order finite-difference time derivative of each row.

    Central differences in the interior and one-sided three-point stencils at
    the two ends; requires uniform spacing.
    """
    states = np.asarray(states, dtype=float)
    times = np.asarray(times, dtype=float)
    if states.shape[1] < 3:
        raise ValueError("need at least 3 time samples")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-8, atol=0):
        raise ValueError("time samples must be uniformly spaced")
    return np.gradient(states, dt[0], axis=1, edge_order=2)


def maxabs_fit(data) -> float:
    data = np.asarray(data, dtype=float)
    if data.size == 0:
        raise ValueError("empty data")
    m = float(np.max(np.abs(data)))
    return m if m > 0 else 1.0


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    seed: int


def split(n, seed, fraction=0.8) -> SplitIndices:
    """Random train/validation split with ``floor(fraction * n)`` training samples."""
    if n < 2:
        raise ValueError("need at least two samples to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return SplitIndices(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed)


@dataclass
class ReducedDataset:
    """Reduced states, velocities and parameters, one sample per column.

    The scales are the max-abs values of each group over the training part;
    ``normalized`` returns the samples divided by them.
    """

    x: np.ndarray
    dx: np.ndarray
    mu: np.ndarray
    x_scale: float = 1.0
    dx_scale: float = 1.0
    mu_scale: float = 1.0

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.dx = np.atleast_2d(np.asarray(self.dx, dtype=float))
        n = self.x.shape[1]
        mu = np.asarray(self.mu, dtype=float)
        self.mu = mu.reshape(0, n) if mu.size == 0 else np.atleast_2d(mu)
        if self.dx.shape != self.x.shape or self.mu.shape[1] != n:
            raise DimensionError("sample counts disagree")
        if min(self.x_scale, self.dx_scale, self.mu_scale) <= 0:
            raise ValueError("scales must be positive")

    @property
    def n_samples(self) -> int:
        return self.x.shape[1]

    @property
    def K(self) -> int:
        return self.x.shape[0]

    @property
    def n_params(self) -> int:
        return self.mu.shape[0]

    def subset(self, idx) -> "ReducedDataset":
        return ReducedDataset(self.x[:, idx], self.dx[:, idx], self.mu[:, idx],
                              self.x_scale, self.dx_scale, self.mu_scale)

    def fit_scales(self, idx=None) -> "ReducedDataset":
        sel = slice(None) if idx is None else idx
        mu_scale = maxabs_fit(self.mu[:, sel]) if self.n_params else 1.0
        return ReducedDataset(self.x, self.dx, self.mu, maxabs_fit(self.x[:, sel]),
                              maxabs_fit(self.dx[:, sel]), mu_scale)

    def normalized(self):
        return self.x / self.x_scale, self.dx / self.dx_scale, self.mu / self.mu_scale


def build_dataset(basis, trajectories, use_recorded_rhs=True) -> ReducedDataset:
    """Project a list of trajectories and stack them into one dataset."""
    xs, dxs, mus = [], [], []
    for tr in trajectories:
        xs.append(project(basis, tr.states))
        deriv = tr.rhs if use_recorded_rhs else estimate_derivatives(tr.states, tr.times)
        dxs.append(project(basis, deriv))
        mus.append(np.repeat(tr.params.reshape(-1, 1), tr.n_times, axis=1))
    return ReducedDataset(np.hstack(xs), np.hstack(dxs), np.hstack(mus))
