"""Reduced-order time integration, Galerkin baseline, error metric and energy diagnostics."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_FACTOR = 1e6


@dataclass
class RomRun:
    states: np.ndarray
    times: np.ndarray
    unstable: bool = False
    wall_time: float = 0.0
    error: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.states.shape[1] == self.times.size


def integrate_rom(rhs, x0, times, *, norm_scale=None) -> RomRun:
    """RK4 over uniform ``times`` for the autonomous reduced system ``x' = rhs(x)``.

    The run stops and is flagged unstable when the state becomes non-finite or
    its norm exceeds ``DIVERGENCE_FACTOR`` times ``max(||x0||, norm_scale)``;
    the stored trajectory is truncated at the last good step.
    """
    times = np.asarray(times, dtype=float)
    x = np.array(x0, dtype=float)
    if times.size > 1:
        dts = np.diff(times)
        if not np.allclose(dts, dts[0], rtol=1e-8, atol=0):
            raise ValueError("times must be uniform")
        dt = dts[0]
    else:
        dt = 0.0
    ref = float(np.linalg.norm(x))
    if norm_scale is not None:
        ref = max(ref, float(norm_scale))
    if ref == 0.0:
        ref = 1.0
    limit = DIVERGENCE_FACTOR * ref
    out = np.empty((x.size, times.size))
    out[:, 0] = x
    unstable = False
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, times.size):
            k1 = rhs(x)
            k2 = rhs(x + 0.5 * dt * k1)
            k3 = rhs(x + 0.5 * dt * k2)
            k4 = rhs(x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            nrm = float(np.linalg.norm(x))
            if not np.isfinite(nrm) or nrm > limit:
                unstable = True
                out = out[:, :i]
                break
            out[:, i] = x
    return RomRun(out, times, unstable, time.perf_counter() - t0)


def galerkin_rhs(V, fom_rhs, x, mu=None):
    """``V^T f(V x, mu)``; ``fom_rhs`` takes ``(state)`` or ``(state, mu)``."""
    V = getattr(V, "V", V)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != V.shape[1]:
        raise ValueError(f"reduced state has {x.shape[0]} entries, basis has {V.shape[1]} modes")
    full = V @ x
    f = fom_rhs(full) if mu is None else fom_rhs(full, mu)
    return V.T @ f


def galerkin_model(V, fom_rhs, mu=None):
    return lambda x: galerkin_rhs(V, fom_rhs, x, mu)


def relative_error(rom_states, fom_states) -> float:
    """Sum over time of the 2-norm error divided by the sum of the reference norms."""
    rom_states = np.asarray(rom_states, dtype=float)
    fom_states = np.asarray(fom_states, dtype=float)
    if rom_states.shape != fom_states.shape:
        raise ValueError(f"shape mismatch {rom_states.shape} vs {fom_states.shape}")
    den = float(np.sum(np.linalg.norm(fom_states, axis=0)))
    if den == 0.0:
        raise ZeroDivisionError("reference trajectory is identically zero")
    return float(np.sum(np.linalg.norm(rom_states - fom_states, axis=0)) / den)


@dataclass
class EnergyDiagnostics:
    energy: np.ndarray
    violation: np.ndarray
    reduced_energy: np.ndarray | None = None

    def max_relative_drift(self, after_index=0) -> float:
        e0 = self.energy[0]
        return float(np.max(np.abs(self.violation[after_index:])) / abs(e0)) if e0 else float("nan")


def energy_violation(lifted, grid, reduced=None) -> EnergyDiagnostics:
    """Energy ``dx * sum(u^2)`` of each lifted column and its change from ``t = 0``."""
    lifted = np.asarray(lifted, dtype=float)
    E = grid.dx * np.einsum("ij,ij->j", lifted, lifted)
    red = None
    if reduced is not None:
        reduced = np.asarray(reduced, dtype=float)
        red = np.einsum("ij,ij->j", reduced, reduced)
    return EnergyDiagnostics(E, E - E[0], red)


def export_run(run: RomRun, csv_path, json_path, summary=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(run.states.shape[0])])
        for j in range(run.states.shape[1]):
            w.writerow([repr(float(run.times[j]))] + [repr(float(v)) for v in run.states[:, j]])
    doc = {"e": run.error, "unstable": run.unstable, "wall_time": run.wall_time}
    doc.update(run.meta)
    if summary:
        doc.update(summary)
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=1, default=float)
