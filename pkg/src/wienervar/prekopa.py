"""Conditional Prekopa-Leindler checks on the Wiener family.

Functionals are given through potentials ``phi`` with ``a = exp(-phi_a)`` and
so on. The hypothesis is checked in log form: for shifts ``h, k`` and
``r = s h + (1 - s) k``

    -phi_a(W + r) - |r|^2/2 >= s (-phi_b(W + h) - |h|^2/2) + (1-s) (-phi_c(W + k) - |k|^2/2)

and the conclusion compares conditional expectations under ``d theta = d d nu``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functionals as F
from . import stopping
from .conditioning import Binning, _layout, state_at
from .models import Wiener, sample_base
from .paths import RngStream, TimeGrid


@dataclass
class PLInstance:
    phi_a: F.PathFunctional
    phi_b: F.PathFunctional
    phi_c: F.PathFunctional
    s: float = 0.5
    tau: object = None
    density: object = None
    certificate: str = ""
    #: the hypothesis holds for every s, not only the instance's own
    s_free: bool = True

    def __post_init__(self):
        if not 0 <= self.s <= 1:
            raise ValueError("s must lie in [0, 1]")


def _quadratic(q, lin, center):
    return F.SumF((F.square_terminal(q, center), F.linear_terminal(lin)))


def quadratic_family(q: float, linear: float = 0.0, s: float = 0.5, tau=None, m_b: float = 0.0,
                     m_c: float = 0.0) -> PLInstance:
    """``phi(w) = q (w(1) - m)^2 + linear w(1)`` with ``m_a = s m_b + (1 - s) m_c``.

    With ``q >= 0`` the map ``h -> phi(W + h) + |h|^2/2`` is a convex quadratic
    in the shift, and the hypothesis follows from convexity.
    """
    if q < 0:
        raise ValueError("curvature must be nonnegative for the built-in family")
    m_a = s * m_b + (1 - s) * m_c
    cert = (f"phi(W+h) + |h|^2/2 = q (W(1) + h(1) - m)^2 + linear (W(1) + h(1)) + |h|^2/2 is convex "
            f"in h for q = {q} >= 0, and the centres satisfy m_a = s m_b + (1 - s) m_c")
    return PLInstance(_quadratic(q, linear, m_a), _quadratic(q, linear, m_b), _quadratic(q, linear, m_c),
                      s, tau, None, cert, m_b == m_c)


def unchecked_quadratic(q: float, linear: float = 0.0, s: float = 0.5, tau=None, m_b=0.0, m_c=0.0) -> PLInstance:
    """Same family without the curvature guard, for control experiments."""
    m_a = s * m_b + (1 - s) * m_c
    return PLInstance(_quadratic(q, linear, m_a), _quadratic(q, linear, m_b), _quadratic(q, linear, m_c),
                      s, tau, None, "", m_b == m_c)


@dataclass
class HypothesisReport:
    min_margin: float
    violations: int
    n_triples: int
    non_finite: int

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.non_finite == 0


def check_hypothesis(inst: PLInstance, n_triples: int, rng: RngStream, grid: TimeGrid = TimeGrid(64),
                     bound: float = 2.0, sample_s: bool = True, tol: float = 1e-12) -> HypothesisReport:
    """Sample paths and constant-density shifts ``h, k`` in ``[-bound, bound]``.

    ``s`` is drawn uniformly when ``sample_s`` is set and the instance allows
    any ``s``, otherwise the instance's ``s`` is used. A violation is a log-margin below ``-tol``.
    """
    gen = rng.generator(0, 17)
    w = sample_base(Wiener(), rng, grid, n_triples).w_path.values
    hd = gen.uniform(-bound, bound, n_triples)
    kd = gen.uniform(-bound, bound, n_triples)
    s = gen.uniform(0, 1, n_triples) if (sample_s and inst.s_free) else np.full(n_triples, inst.s)
    t = grid.times[None, :, None]
    rd = s * hd + (1 - s) * kd
    # constant densities on [0, 1]: h(t) = hd t and |h|_H^2 = hd^2
    la = -inst.phi_a.value(w + rd[:, None, None] * t, grid) - 0.5 * rd ** 2
    lb = -inst.phi_b.value(w + hd[:, None, None] * t, grid) - 0.5 * hd ** 2
    lc = -inst.phi_c.value(w + kd[:, None, None] * t, grid) - 0.5 * kd ** 2
    margin = la - s * lb - (1 - s) * lc
    bad = ~np.isfinite(margin)
    return HypothesisReport(float(np.min(margin[~bad])) if (~bad).any() else np.nan,
                            int(np.sum(margin[~bad] < -tol)), n_triples, int(bad.sum()))


@dataclass
class ConclusionReport:
    slack: np.ndarray
    se: np.ndarray
    count: np.ndarray
    valid: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    extras: dict = field(default_factory=dict)

    def min_z(self) -> float:
        ok = self.valid
        sl = np.where(np.abs(self.slack[ok]) <= 1e-12, 0.0, self.slack[ok])
        z = np.where(self.se[ok] > 0, sl / np.where(self.se[ok] > 0, self.se[ok], 1.0),
                     np.where(sl >= 0, 0.0, -np.inf))
        return float(z.min()) if z.size else 0.0

    def passed(self, n_se: float = 4.0) -> bool:
        return self.min_z() >= -n_se

    def rows(self):
        for c in range(self.slack.size):
            yield c, self.lo[c].tolist(), self.hi[c].tolist(), float(self.slack[c]), float(self.se[c]), \
                int(self.count[c]), bool(self.valid[c])


def slack_from_samples(a, b, c, d, s, state, scheme=Binning(), edges=None) -> ConclusionReport:
    """Per-cell ``E_theta[a] - E_theta[b]^s E_theta[c]^(1-s)`` with a delta-method error."""
    state, edges, cell, lo, hi = _layout(state, scheme, edges)
    n_cells = lo.shape[0]
    slack = np.full(n_cells, np.nan)
    se = np.full(n_cells, np.nan)
    count = np.bincount(cell, minlength=n_cells)
    defined = np.zeros(n_cells, dtype=bool)
    for j in range(n_cells):
        m = cell == j
        if count[j] < 2:
            continue
        dj = d[m]
        dm = dj.mean()
        defined[j] = dm > 5 * dj.std(ddof=1) / np.sqrt(count[j]) if dj.std() > 0 else dm > 0
        ea, eb, ec = (np.sum(x[m] * dj) / np.sum(dj) for x in (a, b, c))
        geo = eb ** s * ec ** (1 - s)
        slack[j] = ea - geo
        infl = ((a[m] - ea) - s * geo / eb * (b[m] - eb) - (1 - s) * geo / ec * (c[m] - ec)) * dj / dm
        se[j] = infl.std(ddof=1) / np.sqrt(count[j])
    valid = defined & (count >= scheme.min_count)
    return ConclusionReport(slack, se, count, valid, lo, hi, dict(edges=edges))


def check_conclusion(inst: PLInstance, rng: RngStream, grid: TimeGrid, n_paths: int, scheme=Binning(),
                     model=Wiener()) -> ConclusionReport:
    """Per-cell slack of the interpolation inequality at ``inst.tau``."""
    base = sample_base(model, rng, grid, n_paths)
    w = base.w_path.values
    a = np.exp(-inst.phi_a.value(w, grid))
    b = np.exp(-inst.phi_b.value(w, grid))
    c = np.exp(-inst.phi_c.value(w, grid))
    d = np.ones(n_paths) if inst.density is None else np.asarray(inst.density(w, grid), dtype=float)
    if np.any(d <= 0):
        raise ValueError("density must be positive on samples")
    if inst.tau is None:
        state = np.zeros((n_paths, 1))
    else:
        state = state_at(base.w_path, stopping.evaluate_stop(inst.tau, base.w_path))
    return slack_from_samples(a, b, c, d, inst.s, state, scheme)
