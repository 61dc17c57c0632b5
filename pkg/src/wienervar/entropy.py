"""Wick exponentials, Girsanov densities and relative entropy of shifted laws.

The entropy of ``W^u nu`` relative to ``nu`` is estimated through the
composed identity ``E[log L o W^u] = E[-log rho(-delta_beta u)]``, exact
when the shift is invertible. A brute-force change-of-variables oracle on
coarse grids (:func:`grid_density_oracle`) gives an independent value,
including for non-invertible maps.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import stopping
from .conditioning import Binning, conditional_expectation, state_at
from .models import apply_shift
from .paths import CameronMartinPath, SamplePath, TimeGrid, cm_norm_sq
from .stats import mean_se

BATCHES = 20


@dataclass(frozen=True)
class DensityProcess:
    grid: TimeGrid
    log_m: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.log_m[..., -1]


def wick(v: CameronMartinPath, beta: SamplePath) -> DensityProcess:
    """``log M(t_k) = -sum_{j<k} v_j . dbeta_j - 1/2 sum_{j<k} |v_j|^2 dt``."""
    if v.grid != beta.grid:
        raise ValueError("drift and noise live on different grids")
    db = beta.increments()
    inc = -np.einsum("...kd,...kd->...k", v.dot_u, db) - 0.5 * np.einsum("...kd,...kd->...k", v.dot_u, v.dot_u) * v.grid.dt
    zero = np.zeros(inc.shape[:-1] + (1,))
    return DensityProcess(v.grid, np.concatenate([zero, np.cumsum(inc, axis=-1)], axis=-1))


@dataclass
class ShiftLogDensity:
    values: np.ndarray
    certified: bool

    @property
    def label(self) -> str:
        return "exact" if self.certified else "upper-bound surrogate only"


def log_density_at_shift(pair) -> ShiftLogDensity:
    """``log L o W^u = -log rho(-delta_beta u)`` per path.

    For shifts without an invertibility certificate the value is still
    returned but labelled as an upper-bound surrogate.
    """
    return ShiftLogDensity(-pair.log_wick, bool(pair.certified))


@dataclass
class EntropyReport:
    entropy_est: float
    half_energy: float
    gap: float
    se: dict
    cells: list = field(default_factory=list)
    worst_gap_z: float = 0.0
    label: str = "exact"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)


def relative_entropy(model, policy, tau, rng, grid, n_paths: int, scheme=Binning(), mode: str = "feedback",
                     batches: int = BATCHES) -> EntropyReport:
    """Estimate ``E[L log L | F_tau]`` and ``1/2 E[|u|^2 | F_tau]``.

    ``tau=None`` gives the unconditional pair. Per-cell values use the state of
    the shifted path at ``tau`` (it agrees with the base path there when the
    drift vanishes before ``tau``).
    """
    pair = apply_shift(model, rng, grid, policy, n_paths, mode=mode)
    ld = log_density_at_shift(pair)
    ent = ld.values
    half = 0.5 * cm_norm_sq(pair.u)
    diff = half - ent
    e_ent, e_half, e_gap = mean_se(ent, batches), mean_se(half, batches), mean_se(diff, batches)
    cells = []
    worst = 0.0
    if tau is not None:
        k_tau = stopping.evaluate_stop(tau, pair.w_path)
        state = state_at(pair.w_path, k_tau)
        t_gap = conditional_expectation(state, diff, scheme, batches=batches)
        t_ent = conditional_expectation(state, ent, scheme, edges=t_gap.edges, batches=batches)
        t_half = conditional_expectation(state, half, scheme, edges=t_gap.edges, batches=batches)
        for c in range(t_gap.n_cells):
            row = dict(cell=c, lo=t_gap.lo[c].tolist(), hi=t_gap.hi[c].tolist(), count=int(t_gap.count[c]),
                       entropy=float(t_ent.estimate[c]), half_energy=float(t_half.estimate[c]),
                       gap=float(t_gap.estimate[c]), se=float(t_gap.se[c]), valid=bool(t_gap.valid[c]))
            cells.append(row)
            if row["valid"]:
                z = 0.0 if row["se"] == 0 else row["gap"] / row["se"]
                worst = min(worst, z) if np.isfinite(z) else worst
    else:
        worst = min(0.0, e_gap.z(0.0))
    return EntropyReport(e_ent.value, e_half.value, e_gap.value,
                         dict(entropy=e_ent.se, half_energy=e_half.se, gap=e_gap.se), cells, float(worst), ld.label)


# coarse-grid oracle ---------------------------------------------------------

def increment_drift(policy, grid: TimeGrid):
    """Turn a policy on Wiener paths into a map ``increments (M, n) -> drift (M, n)``."""

    def fn(x):
        w = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x, axis=1)], axis=1)[..., None]
        return policy.drift_on(w, w, grid)[..., 0]

    return fn


def _log_phi(x, dt):
    return -0.5 * (x ** 2).sum(axis=-1) / dt - 0.5 * x.shape[-1] * np.log(2 * np.pi * dt)


def _jacobian(tmap, x, eps=1e-6):
    n = x.shape[1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        cols.append((tmap(x + e) - tmap(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def _preimages(tmap, y, dt, box, seeds_per_axis=9, iters=40, tol=1e-10):
    """All solutions of ``tmap(x) = y`` found by Newton from a seed lattice."""
    m, n = y.shape
    axis = np.linspace(-1.0, 1.0, seeds_per_axis)
    offs = np.array(list(itertools.product(axis, repeat=n))) * box
    x = (y[:, None, :] + offs[None]).reshape(-1, n)
    yy = np.repeat(y, offs.shape[0], axis=0)
    for _ in range(iters):
        r = tmap(x) - yy
        jac = _jacobian(tmap, x)
        det = np.linalg.det(jac)
        ok = np.abs(det) > 1e-12
        step = np.zeros_like(x)
        step[ok] = np.linalg.solve(jac[ok], r[ok][..., None])[..., 0]
        x = x - np.clip(step, -box, box)
    res = np.abs(tmap(x) - yy).max(axis=1)
    x = x.reshape(m, -1, n)
    res = res.reshape(m, -1)
    out = []
    for i in range(m):
        roots = x[i][res[i] < tol]
        uniq = []
        for r in roots:
            if not any(np.abs(r - q).max() < 1e-4 * box for q in uniq):
                uniq.append(r)
        out.append(np.array(uniq))
    return out


@dataclass
class OracleResult:
    entropy: float
    half_energy: float
    injective: bool
    quad_error: float
    message: str = ""

    @property
    def gap(self) -> float:
        return self.half_energy - self.entropy


def _oracle_once(drift, n_steps, dt, n_nodes, injective_hint=None):
    z, wts = hermegauss(n_nodes)
    wts = wts / wts.sum()
    x = np.array(list(itertools.product(z, repeat=n_steps))) * np.sqrt(dt)
    wt = np.prod(np.array(list(itertools.product(wts, repeat=n_steps))), axis=1)

    def tmap(v):
        return v + dt * drift(v)

    u = drift(x)
    half = float(np.sum(wt * 0.5 * (u ** 2).sum(axis=1) * dt))
    det = np.linalg.det(_jacobian(tmap, x))
    injective = bool(np.all(det > 0) or np.all(det < 0)) if injective_hint is None else injective_hint
    y = tmap(x)
    if injective:
        log_q = _log_phi(x, dt) - np.log(np.abs(det))
    else:
        box = np.max(np.abs(y - x)) + 1e-3
        pre = _preimages(tmap, y, dt, box)
        q = np.empty(len(pre))
        for i, p in enumerate(pre):
            dj = np.abs(np.linalg.det(_jacobian(tmap, p)))
            if np.any(dj == 0):
                raise ValueError("quadrature node on a kink of the shift map, use an even node count")
            q[i] = np.sum(np.exp(_log_phi(p, dt)) / dj)
        log_q = np.log(q)
    ent = float(np.sum(wt * (log_q - _log_phi(y, dt))))
    return ent, half, injective


def grid_density_oracle(drift, n_steps: int, n_nodes: int = 42, refine: int = 10) -> OracleResult:
    """Exact ``E[L log L]`` for a shift of an ``n_steps``-step Wiener grid.

    ``drift`` maps increments ``(M, n_steps)`` to drift densities ``(M, n_steps)``
    (see :func:`increment_drift`). The shift map on increments is
    ``x -> x + dt drift(x)``. Its Jacobian sign decides injectivity; if the sign
    changes the map is reported as not left-invertible at grid scale and the
    density is computed by summing over all preimages. The quadrature error is
    the change when ``refine`` nodes per axis are added. Keep ``n_nodes`` and
    ``refine`` even so no node sits at the origin, where folds have a kink.
    """
    if not 1 <= n_steps <= 4:
        raise ValueError("oracle supports 1 to 4 steps")
    if n_nodes < 41:
        raise ValueError("use at least 41 nodes per axis")
    dt = 1.0 / n_steps
    e1, h1, inj = _oracle_once(drift, n_steps, dt, n_nodes)
    e2, h2, _ = _oracle_once(drift, n_steps, dt, n_nodes + refine, inj)
    err = max(abs(e1 - e2), abs(h1 - h2))
    msg = "" if inj else "not left-invertible at grid scale"
    return OracleResult(e2, h2, inj, err, msg)


def anticipative_fold(a=0.5, scale=0.5):
    """Two-step drift that folds the second increment onto its absolute value.

    The first step reads the second increment through ``a tanh(x_2 / scale)``,
    so the map is anticipative; the fold makes it two-to-one.
    """
    dt = 0.5

    def drift(x):
        out = np.empty_like(x)
        out[:, 0] = a * np.tanh(x[:, 1] / scale) / dt
        out[:, 1] = (np.abs(x[:, 1]) - x[:, 1]) / dt
        return out

    return drift
