"""Approximation of a target density by retarded, bounded, invertible shifts.

The target is ``L = rho(-delta_beta v)(1)`` for a drift ``v``. Stages are
applied in a fixed order, each wrapping the previous policy:

    TruncateLevel(n) -> MixConstant(a) -> EnergyStop(n) -> ClipDrift(m) -> Retard(eta)

Every stage policy is evaluated on the same base Wiener paths, so distances
between consecutive densities are paired.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .entropy import wick
from .models import Wiener, sample_base
from .paths import CameronMartinPath, SamplePath, TimeGrid, cm_norm_sq
from .policies import Clipped, Delayed, EnergyStopped, Mixed, PathContext, TruncatedAtLevel, Zero, retard
from .stats import mean_se


@dataclass(frozen=True)
class TruncateLevel:
    n: float

    def wrap(self, policy, grid):
        if not self.n > 0:
            raise ValueError("truncation level must be positive")
        return TruncatedAtLevel(self.n, policy)


@dataclass(frozen=True)
class MixConstant:
    a: float

    def wrap(self, policy, grid):
        if not 0 <= self.a <= 1:
            raise ValueError("mixing constant must lie in [0, 1]")
        return Mixed(self.a, policy)


@dataclass(frozen=True)
class EnergyStop:
    n: float

    def wrap(self, policy, grid):
        if not self.n > 0:
            raise ValueError("energy level must be positive")
        return EnergyStopped(self.n, policy)


@dataclass(frozen=True)
class ClipDrift:
    m: float

    def wrap(self, policy, grid):
        if not self.m > 0:
            raise ValueError("clip bound must be positive")
        return Clipped(self.m, policy)


@dataclass(frozen=True)
class Retard:
    eta: float

    def wrap(self, policy, grid):
        return retard(policy, self.eta, grid)


ORDER = (TruncateLevel, MixConstant, EnergyStop, ClipDrift, Retard)


def default_stages(n=10.0, a=0.05, m=3.0, eta=1 / 64):
    return [TruncateLevel(n), MixConstant(a), EnergyStop(n), ClipDrift(m), Retard(eta)]


@dataclass
class StageRow:
    stage: str
    lp_distance: float
    se: float
    drift_distance: float
    drift_se: float


@dataclass
class PipelineResult:
    policy: object
    rows: list
    total: float
    total_se: float
    p: float
    extras: dict = field(default_factory=dict)

    @property
    def stage_sum(self) -> float:
        return float(sum(r.lp_distance for r in self.rows))

    def triangle_ok(self, n_se: float = 3.0) -> bool:
        return self.total <= self.stage_sum + n_se * self.total_se


def _lp(diff, p):
    e = mean_se(np.abs(diff) ** p)
    d = e.value ** (1 / p)
    se = 0.0 if d == 0 else e.se / (p * d ** (p - 1))
    return float(d), float(se)


def _check_order(stages):
    pos = [next(i for i, c in enumerate(ORDER) if isinstance(s, c)) for s in stages]
    if pos != sorted(pos):
        raise ValueError("stages must follow truncate, mix, energy stop, clip, retard")


def run_pipeline(v, stages, rng, grid: TimeGrid, n_paths: int, p: float = 2.0, model=Wiener()) -> PipelineResult:
    """Build the staged policy and measure consecutive L^p distances of densities."""
    _check_order(stages)
    base = sample_base(model, rng, grid, n_paths)
    w, beta = base.w_path.values, base.beta_path.values

    def density(pol):
        dot = pol.drift_on(w, beta, grid)
        u = CameronMartinPath(grid, dot)
        return np.exp(wick(u, base.beta_path).terminal), dot

    prev_l, prev_dot = density(v)
    target_l = prev_l
    rows = []
    pol = v
    for st in stages:
        pol = st.wrap(pol, grid)
        l, dot = density(pol)
        if not np.all(np.isfinite(l)):
            raise FloatingPointError(f"{st} produced a non-finite density; raise n or m")
        d, se = _lp(l - prev_l, p)
        hd, hse = _lp(np.sqrt(cm_norm_sq(CameronMartinPath(grid, dot - prev_dot))), 2.0)
        rows.append(StageRow(repr(st), d, se, hd, hse))
        prev_l, prev_dot = l, dot
    total, total_se = _lp(prev_l - target_l, p)
    return PipelineResult(pol, rows, total, total_se, p, dict(final_density=prev_l, target_density=target_l))


@dataclass
class MixBounds:
    lower: float
    upper: float
    min_seen: float
    max_seen: float
    overshoot: float

    @property
    def lower_ok(self) -> bool:
        return self.min_seen >= self.lower

    @property
    def upper_ok(self) -> bool:
        return self.max_seen <= self.upper * self.overshoot + 1e-12


def mix_bounds(v, n: float, a: float, rng, grid, n_paths: int) -> MixBounds:
    """Range of ``(L_T(t) + a) / (1 + a)`` for the level-``n`` truncated density.

    The truncation is detected at grid nodes, so ``L_T`` can exceed ``n`` by one
    step; ``overshoot`` is the largest single-step growth factor seen at the
    stopping node and is allowed on the upper bound.
    """
    base = sample_base(Wiener(), rng, grid, n_paths)
    pol = TruncatedAtLevel(n, v)
    dot = pol.drift_on(base.w_path.values, base.beta_path.values, grid)
    log_m = wick(CameronMartinPath(grid, dot), base.beta_path).log_m
    m = np.exp(log_m)
    mixed = (m + a) / (1 + a)
    steps = np.diff(log_m, axis=1)
    over = float(np.exp(max(0.0, steps.max()))) if np.isfinite(n) else 1.0
    return MixBounds(a / (1 + a), (n + a) / (1 + a), float(mixed.min()), float(mixed.max()), over)


@dataclass
class InverseCertificate:
    max_reconstruction_error: float
    blocks_used: int

    @property
    def passed(self) -> bool:
        return self.max_reconstruction_error <= 1e-8


def shifted_observation(gamma, beta: SamplePath) -> SamplePath:
    """``W^{-gamma} = beta - gamma(beta)`` on the Wiener family."""
    dot = gamma.drift_on(beta.values, beta.values, beta.grid)
    return SamplePath(beta.grid, beta.values - CameronMartinPath(beta.grid, dot).path())


def reconstruct_inverse(gamma, observed: SamplePath, truth: SamplePath | None = None):
    """Recover ``beta`` from ``beta - gamma(beta)`` block by block.

    On the first block of ``lag`` steps the drift is zero, so beta is read off
    directly. On each later block the drift only needs the previous block,
    which is already known.
    """
    if isinstance(gamma, Zero):
        est = observed.values.copy()
        cert = None if truth is None else InverseCertificate(float(np.max(np.abs(est - truth.values))), 1)
        return SamplePath(observed.grid, est), cert
    if not isinstance(gamma, Delayed):
        raise TypeError("only retarded (Delayed) drifts can be inverted block by block")
    grid = observed.grid
    j = gamma.lag
    obs = observed.values
    n, n1, d = obs.shape
    est = np.zeros_like(obs)
    ctx = PathContext(grid, est, est)
    inner = gamma.inner.evaluator(ctx)
    cum = np.zeros((n, d))
    inner_out = np.zeros((n, grid.n_steps, d))
    blocks = 0
    est[:, : min(j, grid.n_steps) + 1] = obs[:, : min(j, grid.n_steps) + 1]
    done_inner = 0
    for start in range(0, grid.n_steps, j):
        blocks += 1
        stop = min(start + j, grid.n_steps)
        # inner outputs for steps [start - j, stop - j) read nodes <= stop - j <= start
        while done_inner < stop - j:
            inner_out[:, done_inner] = inner(done_inner)
            done_inner += 1
        for k in range(start, stop):
            if k >= j:
                cum = cum + inner_out[:, k - j] * grid.dt
            est[:, k + 1] = obs[:, k + 1] + cum
    cert = None
    if truth is not None:
        cert = InverseCertificate(float(np.max(np.abs(est - truth.values))), blocks)
    return SamplePath(grid, est), cert
