"""Conditional expectations given the stopped state, and the Bayes formula.

The sigma-field at a stopping time is represented by the grid state
``(t_tau, W(tau))``. Three estimators are provided:

* :class:`Binning`   equiprobable quantile cells, cell means.
* :class:`Regression` ridge least squares on polynomial features.
* :class:`NestedMC`  re-simulated continuations from each stopped state.

Every estimator returns a :class:`CellTable` on a common cell layout so that
per-cell results of different estimators can be compared directly.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import stopping
from .paths import RngStream, SamplePath
from .stats import mean_se, ratio_se

MIN_COUNT = 30


@dataclass(frozen=True)
class Binning:
    n_bins: int = 10
    min_count: int = MIN_COUNT


@dataclass(frozen=True)
class Regression:
    degree: int = 3
    ridge: float = 1e-8
    n_bins: int = 10
    min_count: int = MIN_COUNT


@dataclass(frozen=True)
class NestedMC:
    """Exact Markov conditioning by re-simulation.

    ``value`` maps full paths ``(N, n_steps + 1, m)`` to ``(N,)``. Only the
    first ``n_outer`` stopped states are re-simulated.
    """

    model: object
    value: object
    rng: RngStream
    branches: int = 200
    n_outer: int = 200
    n_bins: int = 10
    min_count: int = 5


@dataclass
class CellTable:
    """Per-cell estimates plus the layout needed to place new states."""

    edges: list
    lo: np.ndarray
    hi: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    count: np.ndarray
    valid: np.ndarray
    cell_of: np.ndarray
    coef: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return self.estimate.shape[0]

    def locate(self, state) -> np.ndarray:
        return assign_cells(np.atleast_2d(state), self.edges)

    def predict(self, state) -> np.ndarray:
        return self.estimate[self.locate(state)]

    def weights(self) -> np.ndarray:
        return self.count / self.count.sum()

    def rows(self):
        """Rows ``(cell, lo, hi, estimate, se, count, valid)`` for CSV output."""
        for c in range(self.n_cells):
            yield (c, self.lo[c].tolist(), self.hi[c].tolist(), float(self.estimate[c]), float(self.se[c]),
                   int(self.count[c]), bool(self.valid[c]))


def state_at(paths: SamplePath, k_tau) -> np.ndarray:
    """Conditioning statistic ``(t_tau, W(tau))`` per path, shape ``(N, 1 + m)``."""
    n = paths.values.shape[0]
    k = np.broadcast_to(np.asarray(k_tau), (n,))
    return np.column_stack([paths.grid.times[k], paths.at(k)])


def quantile_edges(state: np.ndarray, n_bins: int) -> list:
    """Interior cut points per coordinate; constant coordinates get none."""
    edges = []
    for j in range(state.shape[1]):
        col = state[:, j]
        if np.ptp(col) == 0.0:
            edges.append(np.empty(0))
            continue
        vals = np.unique(col)
        if vals.size <= n_bins:
            cuts = 0.5 * (vals[1:] + vals[:-1])
        else:
            cuts = np.unique(np.quantile(col, np.linspace(0, 1, n_bins + 1)[1:-1]))
        edges.append(cuts)
    return edges


def assign_cells(state: np.ndarray, edges: list) -> np.ndarray:
    idx = np.zeros(state.shape[0], dtype=int)
    for j, cuts in enumerate(edges):
        idx = idx * (cuts.size + 1) + np.searchsorted(cuts, state[:, j], side="right")
    return idx


def _cell_bounds(state, edges):
    shape = [c.size + 1 for c in edges]
    lo = np.empty((int(np.prod(shape)), len(edges)))
    hi = np.empty_like(lo)
    for c, combo in enumerate(itertools.product(*[range(s) for s in shape])):
        for j, b in enumerate(combo):
            cuts = edges[j]
            lo[c, j] = state[:, j].min() if b == 0 else cuts[b - 1]
            hi[c, j] = state[:, j].max() if b == cuts.size else cuts[b]
    return lo, hi


def _layout(state, scheme, edges=None):
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    if edges is None:
        edges = quantile_edges(state, scheme.n_bins)
    cell = assign_cells(state, edges)
    lo, hi = _cell_bounds(state, edges)
    return state, edges, cell, lo, hi


def _per_cell(values, cell, n_cells, min_count, batches=None):
    est = np.full(n_cells, np.nan)
    se = np.full(n_cells, np.nan)
    count = np.bincount(cell, minlength=n_cells)
    for c in range(n_cells):
        if count[c]:
            e = mean_se(values[cell == c], batches)
            est[c], se[c] = e.value, e.se
    valid = count >= min_count
    return est, se, count, valid


def _poly_features(state, degree, center, scale):
    z = (state - center) / scale
    cols = [np.ones((z.shape[0], 1))]
    for p in range(1, degree + 1):
        cols.append(z ** p)
    return np.concatenate(cols, axis=1)


def conditional_expectation(state, values, scheme=Binning(), paths: SamplePath | None = None,
                            tau_index=None, edges=None, batches=None) -> CellTable:
    """Estimate ``E[value | state]`` with ``scheme``.

    ``state`` is ``(N, s)`` (or ``(N,)``). ``edges`` reuses a cell layout from
    an earlier table, so two estimates can be compared cell by cell.
    """
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    state, edges, cell, lo, hi = _layout(state, scheme, edges)
    n_cells = lo.shape[0]

    if isinstance(scheme, NestedMC):
        return _nested(state, scheme, paths, tau_index, edges, cell, lo, hi)

    values = np.asarray(values, dtype=float).ravel()
    if values.shape[0] != state.shape[0]:
        raise ValueError("state and values have different lengths")

    if isinstance(scheme, Binning):
        est, se, count, valid = _per_cell(values, cell, n_cells, scheme.min_count, batches)
        if np.any(~valid & (count > 0)):
            warnings.warn(f"{int(np.sum(~valid & (count > 0)))} cells below {scheme.min_count} samples", stacklevel=2)
        return CellTable(edges, lo, hi, est, se, count, valid, cell)

    if isinstance(scheme, Regression):
        keep = np.ptp(state, axis=0) > 0
        s = state[:, keep]
        center, scale = s.mean(axis=0), s.std(axis=0)
        x = _poly_features(s, scheme.degree, center, scale)
        ridge = scheme.ridge
        gram = x.T @ x
        # the intercept is not shrunk
        pen = np.eye(x.shape[1])
        pen[0, 0] = 0.0
        for _ in range(8):
            a = gram + ridge * len(values) * pen
            if np.linalg.cond(a) < 1e12:
                break
            warnings.warn(f"ill-conditioned regression, ridge raised to {ridge * 100:g}", stacklevel=2)
            ridge = max(ridge * 100, 1e-10)
        coef = np.linalg.solve(a, x.T @ values)
        fit = x @ coef
        resid = values - fit
        est, _, count, valid = _per_cell(fit, cell, n_cells, scheme.min_count)
        se = np.full(n_cells, np.nan)
        for c in range(n_cells):
            if count[c] > 1:
                se[c] = resid[cell == c].std(ddof=1) / np.sqrt(count[c])
        table = CellTable(edges, lo, hi, est, se, count, valid, cell, coef)
        table.extras.update(keep=keep, center=center, scale=scale, degree=scheme.degree)
        return table

    raise TypeError(f"unknown scheme {scheme!r}")


def regression_predict(table: CellTable, state) -> np.ndarray:
    """Pointwise prediction of a fitted :class:`Regression` table."""
    ex = table.extras
    state = np.atleast_2d(state)[:, ex["keep"]]
    return _poly_features(state, ex["degree"], ex["center"], ex["scale"]) @ table.coef


def _nested(state, scheme: NestedMC, paths, tau_index, edges, cell, lo, hi):
    from .models import simulate

    if paths is None or tau_index is None:
        raise ValueError("nested conditioning needs the outer paths and the stopping index")
    grid = paths.grid
    n = paths.values.shape[0]
    k = np.broadcast_to(np.asarray(tau_index), (n,))
    outer = np.arange(min(scheme.n_outer, n))
    point = np.full(n, np.nan)
    point_se = np.full(n, np.nan)
    for j, i in enumerate(outer):
        prefix = np.repeat(paths.values[i: i + 1, : k[i] + 1], scheme.branches, axis=0)
        cont = simulate(scheme.model, scheme.rng.child(j), grid, scheme.branches, prefix=prefix)
        e = mean_se(scheme.value(cont.w_path.values))
        point[i], point_se[i] = e.value, e.se
    n_cells = lo.shape[0]
    sel = np.zeros(n, dtype=bool)
    sel[outer] = True
    est = np.full(n_cells, np.nan)
    se = np.full(n_cells, np.nan)
    count = np.bincount(cell[sel], minlength=n_cells)
    for c in range(n_cells):
        m = sel & (cell == c)
        if m.any():
            est[c] = point[m].mean()
            # inner noise only; states within a cell differ, so this is the error of the cell average
            se[c] = np.sqrt(np.sum(point_se[m] ** 2)) / m.sum()
    table = CellTable(edges, lo, hi, est, se, count, count >= scheme.min_count, cell)
    table.extras.update(point=point, point_se=point_se)
    return table


def bayes_conditional(f_samples, l_samples, state, scheme=Binning(), edges=None, batches=None) -> CellTable:
    """``E_theta[f | state] = E[f L | state] / E[L | state]`` with ``d theta = L d nu``.

    Cells whose ``E[L | state]`` is not at least 5 standard errors above zero
    are marked invalid.
    """
    f = np.asarray(f_samples, dtype=float).ravel()
    l = np.asarray(l_samples, dtype=float).ravel()
    if np.any(l < 0):
        raise ValueError("density samples must be nonnegative")
    if np.all(l == 1.0):
        return conditional_expectation(state, f, scheme, edges=edges, batches=batches)
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    state, edges, cell, lo, hi = _layout(state, scheme, edges)
    n_cells = lo.shape[0]
    est = np.full(n_cells, np.nan)
    se = np.full(n_cells, np.nan)
    count = np.bincount(cell, minlength=n_cells)
    defined = np.zeros(n_cells, dtype=bool)
    for c in range(n_cells):
        m = cell == c
        if count[c] < 2:
            continue
        den = mean_se(l[m])
        defined[c] = den.value > 5 * den.se if den.se > 0 else den.value > 0
        r = ratio_se(f[m] * l[m], l[m])
        est[c], se[c] = r.value, r.se
    valid = defined & (count >= scheme.min_count)
    return CellTable(edges, lo, hi, est, se, count, valid, cell, extras={"defined": defined})


@dataclass
class UnitReport:
    passed: bool
    syntactic: bool
    max_abs_z: float
    table: CellTable

    def as_dict(self):
        return dict(passed=self.passed, syntactic=self.syntactic, max_abs_z=self.max_abs_z,
                    n_cells=int(self.table.valid.sum()))


def check_unit_conditional(model, v, tau, rng: RngStream, grid, n_paths: int, scheme=Binning(),
                           n_se: float = 4.0) -> UnitReport:
    """Test ``E[rho(-delta_beta v) | F_tau] = 1`` cell by cell.

    ``v`` is evaluated on the unshifted paths; the report also records the
    syntactic condition that ``v`` vanishes on every step before ``tau``.
    """
    from .entropy import wick
    from .models import sample_base
    from .paths import CameronMartinPath

    base = sample_base(model, rng, grid, n_paths)
    dot = v.drift_on(base.w_path.values, base.beta_path.values, grid)
    dens = wick(CameronMartinPath(grid, dot), base.beta_path)
    k_tau = stopping.evaluate_stop(tau, base.w_path)
    steps = np.arange(grid.n_steps)
    before = steps[None, :] < np.broadcast_to(k_tau, (n_paths,))[:, None]
    syntactic = bool(np.all(np.where(before[..., None], dot, 0.0) == 0.0))
    table = conditional_expectation(state_at(base.w_path, k_tau), np.exp(dens.log_m[:, -1]), scheme)
    ok = table.valid
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(table.se[ok] > 0, (table.estimate[ok] - 1.0) / table.se[ok],
                     np.where(table.estimate[ok] == 1.0, 0.0, np.inf))
    max_z = float(np.max(np.abs(z))) if z.size else 0.0
    return UnitReport(bool(max_z <= n_se), syntactic, max_z, table)
