"""Variational representation of ``-log E[exp(-f) | F_tau]``.

* :func:`direct_value`  the left side, by plain Monte Carlo.
* :func:`objective`     ``J(u) = E[f o W^u + |u|^2 / 2 | F_tau]``.
* :func:`optimize`      Adam on Markov feedback weights with adjoint gradients.
* :func:`entropy_form_value`  the dual over measures ``d theta = L d nu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import stopping
from .conditioning import Binning, bayes_conditional, check_unit_conditional, conditional_expectation, state_at
from .entropy import wick
from .models import apply_shift, sample_base, simulate
from .paths import CameronMartinPath, RngStream, cm_norm_sq
from .policies import Clipped, Deterministic, MarkovFeedback, StoppedAt, VanishBefore
from .stats import Estimate, mean_se

SE_FLOOR = 1e-9


@dataclass
class CellValues:
    """Per-cell estimates on a shared layout; a single cell when unconditional."""

    estimate: np.ndarray
    se: np.ndarray
    count: np.ndarray
    valid: np.ndarray
    edges: list | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    @property
    def scalar(self) -> Estimate:
        if self.estimate.size != 1:
            raise ValueError("conditional result has several cells")
        return Estimate(float(self.estimate[0]), float(self.se[0]), int(self.count[0]))

    def weighted(self) -> Estimate:
        """Cell-weighted average, valid cells only."""
        w = np.where(self.valid, self.count, 0).astype(float)
        w /= w.sum()
        return Estimate(float(np.sum(w * np.nan_to_num(self.estimate))),
                        float(np.sqrt(np.sum((w * np.nan_to_num(self.se)) ** 2))), int(self.count.sum()))

    def rows(self):
        for c in range(self.estimate.size):
            lo = [] if self.lo is None else self.lo[c].tolist()
            hi = [] if self.hi is None else self.hi[c].tolist()
            yield c, lo, hi, float(self.estimate[c]), float(self.se[c]), int(self.count[c]), bool(self.valid[c])


def _from_table(table, est, se):
    return CellValues(est, se, table.count, table.valid, table.edges, table.lo, table.hi)


def _stopped_state(tau, paths):
    k_tau = stopping.evaluate_stop(tau, paths)
    return state_at(paths, k_tau)


def _cellwise(values, state, scheme, edges, batches=None):
    if state is None:
        e = mean_se(values, batches)
        return CellValues(np.array([e.value]), np.array([e.se]), np.array([e.n]), np.array([True]))
    t = conditional_expectation(state, values, scheme, edges=edges, batches=batches)
    return _from_table(t, t.estimate, t.se)


def _neg_log_mean_exp(values, state, scheme, edges):
    shift = float(np.min(values))
    cv = _cellwise(np.exp(-(values - shift)), state, scheme, edges)
    with np.errstate(divide="ignore", invalid="ignore"):
        est = shift - np.log(cv.estimate)
        se = cv.se / cv.estimate
    return CellValues(est, se, cv.count, cv.valid & np.isfinite(est), cv.edges, cv.lo, cv.hi)


def direct_value(model, f, tau, rng, grid, n_paths: int, scheme=Binning(), edges=None) -> CellValues:
    """Per-cell ``-log E[exp(-f) | F_tau]`` (single cell when ``tau`` is None)."""
    base = sample_base(model, rng, grid, n_paths)
    vals = f.value(base.w_path.values, grid)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("functional is not finite on every path")
    state = None if tau is None else _stopped_state(tau, base.w_path)
    return _neg_log_mean_exp(vals, state, scheme, edges)


def objective(model, f, policy, tau, rng, grid, n_paths: int, scheme=Binning(), edges=None,
              mode: str = "feedback", batches=None) -> CellValues:
    """Per-cell ``E[f o W^u + |u|_H^2 / 2 | F_tau]``."""
    pair = apply_shift(model, rng, grid, policy, n_paths, mode=mode)
    vals = f.value(pair.w_path.values, grid) + 0.5 * cm_norm_sq(pair.u)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("objective is not finite on every path")
    state = None if tau is None else _stopped_state(tau, pair.w_path)
    return _cellwise(vals, state, scheme, edges, batches)


@dataclass
class GapReport:
    direct: CellValues
    objective: CellValues
    gap: np.ndarray
    se: np.ndarray

    @property
    def min_z(self) -> float:
        ok = self.direct.valid & self.objective.valid
        z = np.where(self.se[ok] > 0, self.gap[ok] / np.where(self.se[ok] > 0, self.se[ok], 1.0),
                     np.where(self.gap[ok] >= 0, 0.0, -np.inf))
        return float(z.min()) if z.size else 0.0

    def relative(self) -> np.ndarray:
        return np.abs(self.gap) / np.abs(self.direct.estimate)


def duality_gap(model, f, policy, tau, rng, grid, n_paths: int, scheme=Binning(), mode: str = "feedback") -> GapReport:
    """``J(u) - direct`` per cell, both on the same base noise and cell layout."""
    d = direct_value(model, f, tau, rng, grid, n_paths, scheme)
    j = objective(model, f, policy, tau, rng, grid, n_paths, scheme, edges=d.edges, mode=mode)
    return GapReport(d, j, j.estimate - d.estimate, np.sqrt(d.se ** 2 + j.se ** 2))


@dataclass
class EntropyFormResult:
    value: CellValues
    excess: np.ndarray
    excess_se: np.ndarray
    unit_ok: bool


def entropy_form_value(model, f, v, tau, rng, grid, n_paths: int, scheme=Binning(), check_unit: bool = True):
    """``E_theta[f | F_tau] + E_theta[log L | F_tau]`` for ``L = rho(-delta_beta v)(1)``.

    ``v`` is evaluated on the unshifted paths. The measure is rejected unless
    ``E[L | F_tau] = 1`` passes cell by cell.
    """
    unit_ok = True
    if check_unit and tau is not None:
        rep = check_unit_conditional(model, v, tau, rng.child(7), grid, min(n_paths, 50_000), scheme)
        unit_ok = rep.passed
        if not unit_ok:
            raise ValueError(f"measure fails the unit conditional check (max |z| = {rep.max_abs_z:.2f})")
    base = sample_base(model, rng, grid, n_paths)
    w, beta = base.w_path.values, base.beta_path.values
    dot = v.drift_on(w, beta, grid)
    log_l = wick(CameronMartinPath(grid, dot), base.beta_path).terminal
    fv = f.value(w, grid)
    integrand = fv + log_l
    l = np.exp(log_l)
    if tau is None:
        state = np.zeros((n_paths, 1))
        table = bayes_conditional(integrand, l, state, scheme)
    else:
        state = _stopped_state(tau, base.w_path)
        table = bayes_conditional(integrand, l, state, scheme)
    se = np.maximum(table.se, SE_FLOOR)
    val = _from_table(table, table.estimate, se)
    d = _neg_log_mean_exp(fv, None if tau is None else state, scheme, table.edges)
    return EntropyFormResult(val, val.estimate - d.estimate, np.sqrt(se ** 2 + d.se ** 2), unit_ok)


# optimisation ----------------------------------------------------------------

def _unwrap(policy):
    """Split a template into (MarkovFeedback core, stopping rule or None)."""
    rule = None
    if isinstance(policy, VanishBefore):
        rule, policy = policy.rule, policy.inner
    if not isinstance(policy, MarkovFeedback):
        raise TypeError("optimisation needs a MarkovFeedback template (optionally inside VanishBefore)")
    return policy, rule


def _rewrap(core, rule):
    return core if rule is None else VanishBefore(rule, core)


def pathwise_gradient(model, f, policy, rng, grid, n_paths: int):
    """Sample mean of ``f o W^u + |u|^2/2`` and its gradient in the weights.

    The gradient is back-propagated through the scheme with the adjoint
    recursion; stopping times are held fixed (their derivative vanishes a.e.).
    """
    if not model.supports_gradient:
        raise NotImplementedError(f"{model.name} has no pathwise gradient")
    core, rule = _unwrap(policy)
    pair = simulate(model, rng, grid, n_paths, policy=policy)
    w = pair.w_path.values
    db = np.diff(pair.beta_path.values, axis=1)
    dot = pair.u.dot_u
    extra = pair.extra
    n, n1, m = w.shape
    dt = grid.dt
    loss = f.value(w, grid) + 0.5 * cm_norm_sq(pair.u)

    active = np.ones((n, grid.n_steps), dtype=bool)
    if rule is not None:
        started = np.zeros(n, dtype=bool)
        for k in range(grid.n_steps):
            started |= rule.hit(k, grid, w[:, k])
            active[:, k] = started

    lam = f.grad(w, grid)[:, -1].copy()
    dfdx = f.grad(w, grid)
    g_theta = np.zeros_like(core.weights)
    for k in range(grid.n_steps - 1, -1, -1):
        x = w[:, k]
        t = grid.times[k]
        a_k, b_k = model.step_jacobians(k, x, db[:, k], dot[:, k], None if extra is None else extra[:, k], grid)
        feats = core.basis.features(t, x)
        mask = active[:, k].astype(float)[:, None]
        if core.clip is not None:
            mask = mask * (np.abs(core.raw(t, x)) < core.clip)
        g = np.einsum("ni,nid->nd", lam, b_k) + dot[:, k] * dt
        gm = g * mask
        g_theta += feats.T @ gm
        jf = core.basis.jacobian(t, x)
        du_dx = np.einsum("nfm,fd->ndm", jf, core.weights)
        lam = dfdx[:, k] + np.einsum("ni,nij->nj", lam, a_k) + np.einsum("nd,ndm->nm", gm, du_dx)
    return float(loss.mean()), g_theta / n, loss


def fd_gradient(model, f, policy, rng, grid, n_paths: int, coords, h: float = 1e-4):
    """Central differences of the sample objective in selected weights, common noise."""
    core, rule = _unwrap(policy)
    flat = core.weights.ravel()
    out = []
    for c in coords:
        vals = []
        for sgn in (1, -1):
            wv = flat.copy()
            wv[c] += sgn * h
            p = _rewrap(core.with_weights(wv), rule)
            pair = simulate(model, rng, grid, n_paths, policy=p)
            vals.append(np.mean(f.value(pair.w_path.values, grid) + 0.5 * cm_norm_sq(pair.u)))
        out.append((vals[0] - vals[1]) / (2 * h))
    return np.array(out)


@dataclass
class OptConfig:
    lr: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    iterations: int = 500
    batch: int = 1024
    n_val: int = 100_000
    val_every: int = 50
    max_retries: int = 3


@dataclass
class OptResult:
    policy: object
    trace: list
    val_trace: list
    best_j: Estimate
    lr_used: float
    retries: int = 0
    extras: dict = field(default_factory=dict)


def _validate(model, f, policy, tau, rng, grid, n_val, scheme):
    return objective(model, f, policy, None, rng, grid, n_val, scheme).scalar


def optimize(model, f, template, tau=None, config: OptConfig = OptConfig(), rng: RngStream = RngStream(0),
             grid=None, scheme=Binning()) -> OptResult:
    """Fit the weights of ``template`` by Adam on minibatch pathwise gradients.

    With ``tau`` given the template is wrapped in ``VanishBefore(tau, .)`` and the
    minibatch objective averages the conditional objective over cells with
    their empirical weights, i.e. it is the unconditional mean. The best
    iterate by validation ``J`` is returned. A non-finite objective halves the
    step size and restarts, at most ``max_retries`` times.
    """
    core, rule = _unwrap(template)
    if tau is not None and rule is None:
        rule = tau
    lr = config.lr
    val_rng = rng.child(999_983)
    for attempt in range(config.max_retries + 1):
        theta = core.weights.astype(float).copy()
        m1 = np.zeros_like(theta)
        m2 = np.zeros_like(theta)
        b1, b2 = config.betas
        trace, val_trace = [], []
        best = None
        diverged = False
        for it in range(1, config.iterations + 1):
            pol = _rewrap(core.with_weights(theta), rule)
            j, g, loss = pathwise_gradient(model, f, pol, rng.child(it), grid, config.batch)
            if not (math.isfinite(j) and np.all(np.isfinite(g))):
                diverged = True
                break
            trace.append((it, j, float(loss.std(ddof=1) / np.sqrt(loss.size))))
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g ** 2
            theta = theta - lr * (m1 / (1 - b1 ** it)) / (np.sqrt(m2 / (1 - b2 ** it)) + config.eps)
            if it % config.val_every == 0 or it == config.iterations:
                cand = _rewrap(core.with_weights(theta), rule)
                est = _validate(model, f, cand, tau, val_rng, grid, config.n_val, scheme)
                if not math.isfinite(est.value):
                    diverged = True
                    break
                val_trace.append((it, est.value, est.se))
                if best is None or est.value < best[0].value:
                    best = (est, cand)
        if not diverged:
            return OptResult(best[1], trace, val_trace, best[0], lr, attempt)
        lr /= 2
    raise FloatingPointError(f"optimisation diverged after {config.max_retries} step-size halvings")
