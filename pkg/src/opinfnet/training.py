"""Loss, ADAM, L-BFGS and the hybrid training schedule for operator models."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .operators import EnsembleModel, RomModel
from .reduction import ReducedDataset, split


class TrainingAborted(RuntimeError):
    def __init__(self, msg, history=None, member=None):
        super().__init__(msg)
        self.history = history or []
        self.member = member


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 10000
    batch_size: int = 50
    lr: float = 5e-3
    decay: float = 0.9998
    weight_decay: float = 1e-6
    lbfgs_every: int = 5000
    lbfgs_steps: int = 50
    lbfgs_history: int = 10
    ensemble: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.ensemble < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and ensemble >= 1 required")
        if not (0 < self.lr) or not (0 < self.decay <= 1) or self.weight_decay < 0:
            raise ValueError("lr > 0, decay in (0, 1] and weight_decay >= 0 required")
        if self.lbfgs_every < 0 or self.lbfgs_steps < 0 or self.lbfgs_history < 1:
            raise ValueError("invalid L-BFGS settings")

    def lr_at(self, epoch) -> float:
        return self.lr * self.decay ** epoch


# --- objective ---------------------------------------------------------------

@dataclass
class Batch:
    """Normalized samples stored one per row."""

    x: np.ndarray
    dx: np.ndarray
    mu: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape[0] == 0:
            raise ValueError("empty batch")

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.dx[idx], None if self.mu is None else self.mu[idx])

    def __len__(self):
        return self.x.shape[0]


def loss(model: RomModel, batch: Batch, weight_decay=0.0, w=None, grad=True):
    """Relative squared residual plus ``weight_decay * ||w||^2`` and its gradient.

    If ``w`` is given it is loaded into the model first.
    """
    if w is not None:
        model.set_flat(w)
    else:
        w = model.get_flat()
    pred, ctxs = model.forward_normalized(batch.x, batch.mu, need_grad=grad)
    res = pred - batch.dx
    den = float(np.sum(batch.dx * batch.dx))
    if den == 0.0:
        den = 1.0
    val = float(np.sum(res * res)) / den + weight_decay * float(w @ w)
    if not grad:
        return val
    g = model.vjp(ctxs, (2.0 / den) * res) + (2.0 * weight_decay) * w
    return val, g


def data_loss(model, batch: Batch) -> float:
    return loss(model, batch, 0.0, grad=False)


# --- ADAM --------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rejected: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, w, g, lr):
    """Bias-corrected ADAM update; a non-finite gradient leaves ``w`` and ``state`` untouched.

    Returns ``(w_new, accepted)``.
    """
    g = np.asarray(g, dtype=float)
    if g.shape != state.m.shape or np.shape(w) != g.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(g)):
        state.rejected += 1
        return w, False
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return w - lr * mhat / (np.sqrt(vhat) + state.eps), True


# --- L-BFGS ------------------------------------------------------------------

@dataclass
class LbfgsState:
    m: int = 10
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    iterations: int = 0
    skipped: int = 0

    def push(self, s, y):
        sy = float(s @ y)
        if sy <= 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            self.skipped += 1
            return False
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.m:
            self.s.pop(0)
            self.y.pop(0)
        return True

    def direction(self, g):
        """Two-loop recursion: ``-H g`` with ``H0 = (s^T y / y^T y) I``."""
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            q -= a * y
            alphas.append((a, rho))
        if self.s:
            s, y = self.s[-1], self.y[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y), (a, rho) in zip(zip(self.s, self.y), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    den = gb - ga + 2.0 * d2
    if den == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / den


def strong_wolfe(fun, w, f0, g0, d, alpha0=1.0, c1=1e-4, c2=0.9, max_iter=25):
    """Bracketing and zoom line search; returns ``(alpha, f, g)`` or ``None``."""
    dg0 = float(g0 @ d)
    if dg0 >= 0:
        return None

    def phi(a):
        f, g = fun(w + a * d)
        return f, g, float(g @ d)

    a_prev, f_prev, dg_prev = 0.0, f0, dg0
    a = alpha0
    for i in range(max_iter):
        f, g, dg = phi(a)
        if not np.isfinite(f) or f > f0 + c1 * a * dg0 or (i > 0 and f >= f_prev):
            return _zoom(phi, f0, dg0, a_prev, f_prev, dg_prev, a, f, dg, c1, c2)
        if abs(dg) <= -c2 * dg0:
            return a, f, g
        if dg >= 0:
            return _zoom(phi, f0, dg0, a, f, dg, a_prev, f_prev, dg_prev, c1, c2)
        a_prev, f_prev, dg_prev = a, f, dg
        a *= 2.0
    return None


def _zoom(phi, f0, dg0, lo, flo, dglo, hi, fhi, dghi, c1, c2, max_iter=30):
    for _ in range(max_iter):
        trial = None
        if np.isfinite(fhi):
            trial = _cubic_min(lo, flo, dglo, hi, fhi, dghi)
        left, right = min(lo, hi), max(lo, hi)
        margin = 0.1 * (right - left)
        if trial is None or not (left + margin <= trial <= right - margin):
            trial = 0.5 * (lo + hi)
        f, g, dg = phi(trial)
        if not np.isfinite(f) or f > f0 + c1 * trial * dg0 or f >= flo:
            hi, fhi, dghi = trial, f, dg
        else:
            if abs(dg) <= -c2 * dg0:
                return trial, f, g
            if dg * (hi - lo) >= 0:
                hi, fhi, dghi = lo, flo, dglo
            lo, flo, dglo = trial, f, dg
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
    return None


def lbfgs_run(fun, w0, n_steps=50, m=10, gtol=1e-10, state=None):
    """Minimize ``fun(w) -> (f, g)`` for at most ``n_steps`` accepted iterations.

    Stops early when ``max|g| <= gtol`` or the line search fails; the returned
    point is the best one seen. Returns ``(w, f, info)``.
    """
    state = state or LbfgsState(m)
    w = np.array(w0, dtype=float)
    f, g = fun(w)
    info = {"steps": 0, "status": "max_steps", "f0": float(f)}
    if not np.isfinite(f):
        info["status"] = "non_finite"
        return w, f, info
    for k in range(n_steps):
        if np.max(np.abs(g)) <= gtol:
            info["status"] = "converged"
            break
        d = state.direction(g)
        if float(d @ g) >= 0:
            state.s.clear()
            state.y.clear()
            d = -g
        a0 = 1.0 if state.s else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-300))
        res = strong_wolfe(fun, w, f, g, d, a0)
        if res is None:
            info["status"] = "line_search_failed"
            break
        a, f_new, g_new = res
        s = a * d
        state.push(s, g_new - g)
        w, f, g = w + s, f_new, g_new
        state.iterations += 1
        info["steps"] = k + 1
    info["f"] = float(f)
    return w, f, info


# --- hybrid schedule ---------------------------------------------------------

def prepare(model: RomModel, dataset: ReducedDataset, seed):
    """Split the samples, fit the scales on the training part and build batches."""
    sp = split(dataset.n_samples, seed)
    ds = dataset.fit_scales(sp.train)
    model.set_scales(ds.x_scale, ds.dx_scale, ds.mu_scale)
    xn, dxn, mun = ds.normalized()
    mu = mun.T.copy() if ds.n_params else None
    full = Batch(xn.T.copy(), dxn.T.copy(), mu)
    return full.take(sp.train), full.take(sp.validation), sp


def train(model: RomModel, dataset: ReducedDataset, settings: TrainingSettings = TrainingSettings(),
          history_path=None):
    """Hybrid ADAM / L-BFGS training; returns ``(model, history)``.

    L-BFGS runs on the full training set whenever ``epoch % lbfgs_every == 0``
    (before that epoch's ADAM sweep). The model keeps the parameters with the
    lowest validation loss seen at the end of any epoch.
    """
    history = []
    if settings.epochs == 0:
        return model, history
    tr, va, _ = prepare(model, dataset, settings.seed)
    lam = settings.weight_decay

    def full_fun(w):
        with np.errstate(over="ignore", invalid="ignore"):
            return loss(model, tr, lam, w)

    w = model.get_flat()
    best_w, best_val = w.copy(), np.inf
    adam = AdamState.zeros(w.size)
    n = len(tr)
    bs = settings.batch_size

    def record(epoch, lr, phase):
        nonlocal best_w, best_val
        model.set_flat(w)
        tl = loss(model, tr, lam, grad=False)
        vl = data_loss(model, va)
        history.append({"epoch": epoch, "train_loss": tl, "val_loss": vl, "lr": lr, "phase": phase})
        if not (np.isfinite(tl) and np.isfinite(vl)):
            model.set_flat(best_w)
            _write_history(history_path, history)
            raise TrainingAborted(f"non-finite loss at epoch {epoch}", history)
        if vl < best_val:
            best_val, best_w = vl, w.copy()

    for epoch in range(settings.epochs):
        lr = settings.lr_at(epoch)
        if settings.lbfgs_every and settings.lbfgs_steps and epoch % settings.lbfgs_every == 0:
            w, _, _ = lbfgs_run(full_fun, w, settings.lbfgs_steps, settings.lbfgs_history)
            record(epoch, lr, "lbfgs")
        perm = np.random.default_rng([settings.seed, epoch]).permutation(n)
        for start in range(0, n, bs):
            _, g = loss(model, tr.take(perm[start:start + bs]), lam, w)
            w, _ = adam_step(adam, w, g, lr)
        record(epoch, lr, "adam")
    model.set_flat(best_w)
    _write_history(history_path, history)
    return model, history


def _write_history(path, history):
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, ["epoch", "train_loss", "val_loss", "lr", "phase"])
        wr.writeheader()
        for row in history:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train_ensemble(builder, dataset: ReducedDataset, settings: TrainingSettings = TrainingSettings(),
                   history_paths=None):
    """Train ``settings.ensemble`` members; member ``m`` is ``builder(seed + m)``.

    Each member draws its own split and minibatch stream from its seed.
    Returns ``(EnsembleModel, histories)``.
    """
    members, histories, seeds = [], [], []
    for m in range(settings.ensemble):
        seed = settings.seed + m
        model = builder(seed)
        path = None if history_paths is None else history_paths[m]
        try:
            model, hist = train(model, dataset, replace(settings, seed=seed), path)
        except TrainingAborted as exc:
            raise TrainingAborted(f"ensemble member {m} (seed {seed}): {exc}", exc.history, m) from exc
        members.append(model)
        histories.append(hist)
        seeds.append(seed)
    return EnsembleModel(members, seeds), histories
