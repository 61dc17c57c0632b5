"""Adapted drift policies.

A policy is an immutable description. Simulation code asks it for an
*evaluator* bound to a :class:`PathContext`; the evaluator is then called
once per step ``k = 0, 1, ...`` in increasing order and may keep running
state. At step ``k`` it may read ``ctx.w[:, :k+1]`` and ``ctx.beta[:, :k+1]``
only, which is what makes every policy adapted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .paths import TimeGrid
from .stopping import FirstLevelHit


@dataclass
class PathContext:
    """Path buffers a policy reads while they are being filled."""

    grid: TimeGrid
    w: np.ndarray
    beta: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.w.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.beta.shape[-1]


class DriftPolicy:
    #: open-loop shifts by this policy are known to be a.s. invertible
    certified_open_loop = False

    def evaluator(self, ctx: PathContext):
        raise NotImplementedError

    def drift_on(self, w: np.ndarray, beta: np.ndarray, grid: TimeGrid) -> np.ndarray:
        """Evaluate along fixed paths (no feedback); shape ``(N, n_steps, d)``."""
        ctx = PathContext(grid, w, beta)
        ev = self.evaluator(ctx)
        out = np.empty((w.shape[0], grid.n_steps, beta.shape[-1]))
        for k in range(grid.n_steps):
            out[:, k] = ev(k)
        return out


@dataclass(frozen=True)
class Zero(DriftPolicy):
    certified_open_loop = True

    def evaluator(self, ctx):
        z = np.zeros((ctx.n_paths, ctx.noise_dim))
        return lambda k: z


@dataclass(frozen=True)
class Deterministic(DriftPolicy):
    """A fixed drift density, one row per grid step."""

    dot: np.ndarray
    certified_open_loop = True

    @classmethod
    def constant(cls, grid: TimeGrid, value, dim: int = 1):
        value = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
        return cls(np.tile(value, (grid.n_steps, 1)))

    def evaluator(self, ctx):
        dot = np.asarray(self.dot, dtype=float)
        if dot.ndim == 1:
            dot = dot[:, None]
        if dot.shape[0] != ctx.grid.n_steps:
            raise ValueError("deterministic drift does not match the grid")
        shape = (ctx.n_paths, ctx.noise_dim)
        return lambda k: np.broadcast_to(dot[k], shape)


@dataclass(frozen=True)
class FeatureBasis:
    """Tensor basis: time hat functions times per-coordinate state powers.

    Features are ``hat_j(t) * x_i**p`` for ``p = 1..degree`` plus
    ``hat_j(t)`` itself, giving ``time_knots * (1 + state_dim * degree)``
    columns. ``time_knots=1`` means no time dependence.
    """

    state_dim: int = 1
    degree: int = 1
    time_knots: int = 5

    @property
    def size(self) -> int:
        return self.time_knots * (1 + self.state_dim * self.degree)

    def _hats(self, t: float) -> np.ndarray:
        if self.time_knots == 1:
            return np.ones(1)
        knots = np.linspace(0.0, 1.0, self.time_knots)
        h = knots[1] - knots[0]
        return np.clip(1.0 - np.abs(t - knots) / h, 0.0, None)

    def _monomials(self, x: np.ndarray) -> np.ndarray:
        cols = [np.ones((x.shape[0], 1))]
        for p in range(1, self.degree + 1):
            cols.append(x ** p)
        return np.concatenate(cols, axis=1)

    def features(self, t: float, x: np.ndarray) -> np.ndarray:
        hats = self._hats(t)
        mono = self._monomials(x)
        return (hats[:, None, None] * mono[None]).transpose(1, 0, 2).reshape(x.shape[0], -1)

    def jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        """d features / d x, shape ``(N, size, state_dim)``."""
        n, m = x.shape
        hats = self._hats(t)
        dmono = np.zeros((n, 1 + m * self.degree, m))
        for p in range(1, self.degree + 1):
            cols = slice(1 + (p - 1) * m, 1 + p * m)
            dmono[:, cols, :] = np.einsum("ni,ij->nij", p * x ** (p - 1), np.eye(m))
        out = hats[None, :, None, None] * dmono[:, None]
        return out.reshape(n, -1, m)


@dataclass(frozen=True)
class MarkovFeedback(DriftPolicy):
    """``clip(features(t, W(t)) @ weights, -clip, clip)``."""

    basis: FeatureBasis
    weights: np.ndarray
    clip: float | None = None

    @classmethod
    def zeros(cls, basis: FeatureBasis, out_dim: int = 1, clip=None):
        return cls(basis, np.zeros((basis.size, out_dim)), clip)

    def with_weights(self, weights):
        return MarkovFeedback(self.basis, np.asarray(weights, dtype=float).reshape(self.weights.shape), self.clip)

    def raw(self, t, x):
        return self.basis.features(t, x) @ self.weights

    def __call__(self, t, x):
        out = self.raw(t, x)
        if self.clip is not None:
            out = np.clip(out, -self.clip, self.clip)
        return out

    def evaluator(self, ctx):
        times = ctx.grid.times
        return lambda k: self(times[k], ctx.w[:, k])


@dataclass(frozen=True)
class StateFeedback(DriftPolicy):
    """Drift given by an arbitrary function ``fn(t, x) -> (N, d)``."""

    fn: object

    def evaluator(self, ctx):
        times = ctx.grid.times
        return lambda k: np.asarray(self.fn(times[k], ctx.w[:, k]), dtype=float).reshape(ctx.n_paths, -1)


@dataclass(frozen=True)
class Delayed(DriftPolicy):
    """Output at step ``k`` is the inner output at step ``k - lag``."""

    lag: int
    inner: DriftPolicy
    certified_open_loop = True

    def __post_init__(self):
        if int(self.lag) != self.lag or self.lag < 1:
            raise ValueError("lag must be a positive number of steps")

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        buf = np.zeros((ctx.n_paths, ctx.grid.n_steps, ctx.noise_dim))
        zero = np.zeros((ctx.n_paths, ctx.noise_dim))

        def ev(k):
            buf[:, k] = inner(k)
            return buf[:, k - self.lag] if k >= self.lag else zero

        return ev


def retard(policy: DriftPolicy, eta: float, grid: TimeGrid) -> Delayed:
    """Delay ``policy`` by ``eta``, which must be a positive multiple of ``dt``."""
    j = eta / grid.dt
    if abs(j - round(j)) > 1e-9 or round(j) < 1:
        raise ValueError(f"eta={eta} is not a positive multiple of dt={grid.dt}")
    return Delayed(int(round(j)), policy)


@dataclass(frozen=True)
class Clipped(DriftPolicy):
    m: float
    inner: DriftPolicy

    @property
    def certified_open_loop(self):
        return self.inner.certified_open_loop

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        return lambda k: np.clip(inner(k), -self.m, self.m)


@dataclass(frozen=True)
class Scaled(DriftPolicy):
    c: float
    inner: DriftPolicy

    @property
    def certified_open_loop(self):
        return self.inner.certified_open_loop

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        return lambda k: self.c * inner(k)


@dataclass(frozen=True)
class Sum(DriftPolicy):
    parts: tuple

    def evaluator(self, ctx):
        evs = [p.evaluator(ctx) for p in self.parts]
        return lambda k: sum(ev(k) for ev in evs)


@dataclass(frozen=True)
class EnergyStopped(DriftPolicy):
    """Zero from the first step whose inclusion would push the energy past ``n``."""

    n: float
    inner: DriftPolicy

    @property
    def certified_open_loop(self):
        return self.inner.certified_open_loop

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        dt = ctx.grid.dt
        energy = np.zeros(ctx.n_paths)
        alive = np.ones(ctx.n_paths, dtype=bool)

        def ev(k):
            out = inner(k)
            step = np.einsum("nd,nd->n", out, out) * dt
            alive[:] &= energy + step <= self.n
            energy[:] += np.where(alive, step, 0.0)
            return np.where(alive[:, None], out, 0.0)

        return ev


class _DensityTracker:
    """Running log of the Wick exponential ``rho(-delta_beta v)`` of a drift."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.log_m = np.zeros(ctx.n_paths)
        self.prev = None

    def advance(self, k):
        if k > 0 and self.prev is not None:
            db = self.ctx.beta[:, k] - self.ctx.beta[:, k - 1]
            v = self.prev
            self.log_m -= np.einsum("nd,nd->n", v, db) + 0.5 * np.einsum("nd,nd->n", v, v) * self.ctx.grid.dt
        return self.log_m


@dataclass(frozen=True)
class TruncatedAtLevel(DriftPolicy):
    """Zero from the first node where the density of ``inner`` reaches ``n``."""

    n: float
    inner: DriftPolicy

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        track = _DensityTracker(ctx)
        stopped = np.zeros(ctx.n_paths, dtype=bool)
        log_n = np.log(self.n) if np.isfinite(self.n) else np.inf

        def ev(k):
            log_m = track.advance(k)
            stopped[:] |= log_m >= log_n
            out = inner(k)
            track.prev = out
            return np.where(stopped[:, None], 0.0, out)

        return ev


@dataclass(frozen=True)
class Mixed(DriftPolicy):
    """Drift of the density ``(L + a) / (1 + a)`` where ``L`` is the density of ``inner``.

    With ``dL = -L v dbeta`` the mixture solves ``dM = -M (v L / (L + a)) dbeta``,
    so the drift is ``v`` scaled by ``L / (L + a)`` at the left grid point.
    """

    a: float
    inner: DriftPolicy

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        track = _DensityTracker(ctx)

        def ev(k):
            log_m = track.advance(k)
            out = inner(k)
            track.prev = out
            if self.a <= 0:
                return out
            return out * expit(log_m - np.log(self.a))[:, None]

        return ev


@dataclass(frozen=True)
class VanishBefore(DriftPolicy):
    """Zero on steps before the stopping time, ``inner`` afterwards."""

    rule: object
    inner: DriftPolicy

    def __post_init__(self):
        if isinstance(self.rule, FirstLevelHit):
            raise ValueError("VanishBefore needs a path-based stopping rule")

    @property
    def certified_open_loop(self):
        return self.inner.certified_open_loop

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        started = np.zeros(ctx.n_paths, dtype=bool)

        def ev(k):
            started[:] |= self.rule.hit(k, ctx.grid, ctx.w[:, k])
            out = inner(k)
            return np.where(started[:, None], out, 0.0)

        return ev


@dataclass(frozen=True)
class StoppedAt(DriftPolicy):
    """``inner`` on steps before the stopping time, zero afterwards."""

    rule: object
    inner: DriftPolicy

    @property
    def certified_open_loop(self):
        return self.inner.certified_open_loop

    def evaluator(self, ctx):
        inner = self.inner.evaluator(ctx)
        stopped = np.zeros(ctx.n_paths, dtype=bool)

        def ev(k):
            stopped[:] |= self.rule.hit(k, ctx.grid, ctx.w[:, k])
            out = inner(k)
            return np.where(stopped[:, None], 0.0, out)

        return ev
