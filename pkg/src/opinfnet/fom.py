"""Full-order simulators: periodic 1D Burgers and 2D nonlinear heat conduction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from ._binio import read_f64, read_header, write_f64, write_header

TRAJ_MAGIC = b"OIFTRAJ1"


class DimensionError(ValueError):
    pass


class IntegrationError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Grid1D:
    n_cells: int
    length: float = 2.0 * math.pi

    def __post_init__(self):
        if self.n_cells < 1 or self.length <= 0:
            raise ValueError("Grid1D needs n_cells >= 1 and length > 0")

    @property
    def dx(self) -> float:
        return self.length / self.n_cells

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_cells) * self.dx


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("Grid2D needs at least one interior node per direction")

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.nx + 1, self.ny + 1), dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m.reshape(-1)

    def coordinates(self):
        """Node coordinates ``(x, y)`` flattened in storage order (x-major)."""
        x, y = np.meshgrid(np.linspace(0, 1, self.nx + 1),
                           np.linspace(0, 1, self.ny + 1), indexing="ij")
        return x.reshape(-1), y.reshape(-1)


@dataclass(frozen=True)
class HeatParams:
    k1: float
    tc: float
    k0: float = 1e-2
    w: float = 2e-2

    def __post_init__(self):
        if not (self.k0 > 0 and self.k1 > self.k0 and self.w > 0):
            raise ValueError("HeatParams requires k0 > 0, k1 > k0, w > 0")

    def as_vector(self) -> np.ndarray:
        return np.array([self.k1, self.tc])


@dataclass
class Trajectory:
    """States and exact right-hand sides, one column per stored time."""

    states: np.ndarray
    rhs: np.ndarray
    times: np.ndarray
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.params = np.atleast_1d(np.asarray(self.params, dtype=float))
        if self.states.shape != self.rhs.shape:
            raise DimensionError("states and rhs shapes differ")
        if self.states.shape[1] != self.times.size:
            raise DimensionError("one time per column required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_times(self) -> int:
        return self.times.size

    def window(self, t_end: float) -> "Trajectory":
        """Columns with ``t <= t_end`` (with a small tolerance)."""
        keep = self.times <= t_end + 1e-9 * max(1.0, abs(t_end))
        return Trajectory(self.states[:, keep], self.rhs[:, keep],
                          self.times[keep], self.params)


def save_trajectory(path, traj: Trajectory):
    n, nt = traj.states.shape
    with open(path, "wb") as fh:
        write_header(fh, TRAJ_MAGIC, n, nt, traj.params.size)
        write_f64(fh, traj.times)
        write_f64(fh, traj.params)
        write_f64(fh, traj.states, order="F")
        write_f64(fh, traj.rhs, order="F")


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        n, nt, npar = read_header(fh, TRAJ_MAGIC, 3)
        times = read_f64(fh, nt)
        params = read_f64(fh, npar)
        states = read_f64(fh, n * nt, (n, nt), order="F")
        rhs = read_f64(fh, n * nt, (n, nt), order="F")
    return Trajectory(states, rhs, times, params)


# --- Burgers -------------------------------------------------------------

def burgers_rhs(u, grid: Grid1D) -> np.ndarray:
    """Energy-conserving split-flux discretisation of ``-(u^2/2)_x``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.n_cells,):
        raise DimensionError(f"state has shape {u.shape}, grid has {grid.n_cells} cells")
    return kernels.burgers_rhs(u, grid.dx)


def burgers_initial(grid: Grid1D) -> np.ndarray:
    x = grid.nodes
    return 0.025 * (np.sin(4 * x) + 2 * np.cos(6 * x)) + 2.0


def energy(u, grid: Grid1D) -> float:
    u = np.asarray(u, dtype=float)
    return grid.dx * float(u @ u)


# --- heat ----------------------------------------------------------------

def heat_kappa(T, p: HeatParams):
    return 0.5 * (p.k0 + p.k1) + 0.5 * (p.k1 - p.k0) * np.tanh((np.asarray(T) - p.tc) / p.w)


def heat_rhs(T, grid: Grid2D, p: HeatParams) -> np.ndarray:
    """Five-point ``div(kappa grad T) + 1`` on interior nodes, zero on the boundary."""
    T = np.asarray(T, dtype=float)
    if T.shape != (grid.n_nodes,):
        raise DimensionError(f"field has shape {T.shape}, grid has {grid.n_nodes} nodes")
    return kernels.heat_rhs(T, grid.nx, grid.ny, grid.hx, grid.hy, p.k0, p.k1, p.tc, p.w)


def heat_operator(kappa, grid: Grid2D) -> sp.csr_matrix:
    """Sparse diffusion matrix for nodal diffusivity ``kappa``; boundary rows are empty.

    ``heat_operator(heat_kappa(T, p), grid) @ T + source`` equals ``heat_rhs(T, grid, p)``.
    """
    nx, ny = grid.nx, grid.ny
    m = ny + 1
    kap = np.asarray(kappa).reshape(nx + 1, m)
    ii, jj = np.meshgrid(np.arange(1, nx), np.arange(1, ny), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    p = ii * m + jj
    kc = kap[ii, jj]
    ke = 0.5 * (kc + kap[ii + 1, jj]) / grid.hx**2
    kw = 0.5 * (kc + kap[ii - 1, jj]) / grid.hx**2
    kn = 0.5 * (kc + kap[ii, jj + 1]) / grid.hy**2
    ks = 0.5 * (kc + kap[ii, jj - 1]) / grid.hy**2
    rows = np.concatenate([p, p, p, p, p])
    cols = np.concatenate([p, p + m, p - m, p + 1, p - 1])
    vals = np.concatenate([-(ke + kw + kn + ks), ke, kw, kn, ks])
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


def heat_source(grid: Grid2D) -> np.ndarray:
    return (~grid.boundary_mask).astype(float)


# --- time stepping -------------------------------------------------------

def rk4_step(rhs, x, t, dt):
    """Classical four-stage Runge-Kutta step for ``x' = rhs(x, t)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = rhs(x, t)
    k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = rhs(x + dt * k3, t + dt)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationError(f"non-finite state after RK4 step at t={t:.6g}")
    return out


PICARD_TOL = 1e-10
PICARD_MAXITER = 100


def _face_coefficients(kap, grid: Grid2D):
    kc = kap[1:-1, 1:-1]
    return (0.5 * (kc + kap[2:, 1:-1]) / grid.hx**2, 0.5 * (kc + kap[:-2, 1:-1]) / grid.hx**2,
            0.5 * (kc + kap[1:-1, 2:]) / grid.hy**2, 0.5 * (kc + kap[1:-1, :-2]) / grid.hy**2)


def _apply_diffusion(full, coef):
    ke, kw, kn, ks = coef
    c = full[1:-1, 1:-1]
    return (ke * (full[2:, 1:-1] - c) - kw * (c - full[:-2, 1:-1])
            + kn * (full[1:-1, 2:] - c) - ks * (c - full[1:-1, :-2]))


def _cg(matvec, b, x0, rtol=1e-14, maxiter=1000):
    x = x0.copy()
    r = b - matvec(x)
    d = r.copy()
    rr = float(np.vdot(r, r))
    stop = (rtol * float(np.linalg.norm(b))) ** 2
    for _ in range(maxiter):
        if rr <= stop or rr == 0.0:
            return x
        q = matvec(d)
        alpha = rr / float(np.vdot(d, q))
        x += alpha * d
        r -= alpha * q
        rr_new = float(np.vdot(r, r))
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise SolverError("conjugate gradient did not converge", rr**0.5)


def crank_nicolson_step(T, grid: Grid2D, p: HeatParams, dt, *, tol=PICARD_TOL,
                        maxiter=PICARD_MAXITER, rhs_old=None):
    """One trapezoidal step, nonlinear system solved by Picard iteration.

    The diffusivity is lagged at the previous iterate, so each iteration is a
    symmetric positive definite linear solve over the interior nodes (matrix-free
    conjugate gradients). Boundary values are held. Converged when the update
    2-norm drops below ``tol``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    T = np.asarray(T, dtype=float)
    if rhs_old is None:
        rhs_old = heat_rhs(T, grid, p)
    shape = (grid.nx + 1, grid.ny + 1)
    h = 0.5 * dt
    b_full = (T + h * (rhs_old + heat_source(grid))).reshape(shape)
    fixed = T.reshape(shape).copy()
    fixed[1:-1, 1:-1] = 0.0
    work = np.zeros(shape)
    cur = T.reshape(shape).copy()
    upd = np.inf
    for _ in range(maxiter):
        coef = _face_coefficients(heat_kappa(cur, p), grid)

        def matvec(v):
            work[1:-1, 1:-1] = v
            return v - h * _apply_diffusion(work, coef)

        rhs_i = b_full[1:-1, 1:-1] + h * _apply_diffusion(fixed, coef)
        sol = _cg(matvec, rhs_i, cur[1:-1, 1:-1])
        upd = float(np.linalg.norm(sol - cur[1:-1, 1:-1]))
        cur[1:-1, 1:-1] = sol
        if upd <= tol:
            break
    else:
        raise SolverError("Picard iteration did not converge", upd)
    if not np.all(np.isfinite(cur)):
        raise IntegrationError("non-finite state in Crank-Nicolson step")
    return cur.reshape(-1)


def _n_steps(t_final, dt):
    n = int(round(t_final / dt))
    if abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    return n


def simulate(fom, grid, params=None, t_final=1.0, dt=0.01, stride=1, x0=None) -> Trajectory:
    """Run a full-order model and record states with their exact right-hand sides.

    ``fom`` is ``"burgers"`` (RK4) or ``"heat"`` (Crank-Nicolson). Every
    ``stride``-th step is stored, always including ``t = 0``.
    """
    if t_final < 0:
        raise ValueError("t_final must be non-negative")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = _n_steps(t_final, dt) if t_final > 0 else 0

    if fom == "burgers":
        x = burgers_initial(grid) if x0 is None else np.array(x0, dtype=float)
        f = lambda s: burgers_rhs(s, grid)  # noqa: E731
        step = lambda s, t: rk4_step(lambda y, _t: f(y), s, t, dt)  # noqa: E731
        pvec = np.zeros(0)
    elif fom == "heat":
        if not isinstance(params, HeatParams):
            raise TypeError("heat simulation needs HeatParams")
        x = np.zeros(grid.n_nodes) if x0 is None else np.array(x0, dtype=float)
        f = lambda s: heat_rhs(s, grid, params)  # noqa: E731
        step = lambda s, t: crank_nicolson_step(s, grid, params, dt)  # noqa: E731
        pvec = params.as_vector()
    else:
        raise ValueError(f"unknown fom {fom!r}")

    states, rhs, times = [x.copy()], [f(x)], [0.0]
    for i in range(1, n + 1):
        x = step(x, (i - 1) * dt)
        if i % stride == 0:
            states.append(x.copy())
            rhs.append(f(x))
            times.append(i * dt)
    return Trajectory(np.column_stack(states), np.column_stack(rhs), np.array(times), pvec)
