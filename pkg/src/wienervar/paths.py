"""Time grids, Brownian sampling and pathwise stochastic calculus.

Every array that carries paths is laid out as ``(..., n_steps + 1, dim)``
(node values) and every drift density as ``(..., n_steps, dim)`` (one value
per step, constant on ``[t_k, t_{k+1})``). Leading axes index the ensemble.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

CHUNK = 8192

_THREADS = None


def set_threads(n: int | None) -> None:
    """Set the worker count used for chunked ensemble generation."""
    global _THREADS
    _THREADS = None if n is None else max(1, int(n))


def get_threads() -> int:
    if _THREADS is not None:
        return _THREADS
    env = os.environ.get("WIENERVAR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    horizon: float = 1.0
    dt: float = field(init=False)
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        dt = self.horizon / self.n_steps
        times = np.arange(self.n_steps + 1) * dt
        times.setflags(write=False)
        object.__setattr__(self, "dt", dt)
        object.__setattr__(self, "times", times)

    def index_of(self, t: float) -> int:
        """First node index with ``t_k >= t`` (ties resolved toward the node)."""
        k = int(np.ceil(t / self.dt - 1e-9))
        return min(max(k, 0), self.n_steps)


def make_grid(n_steps: int) -> TimeGrid:
    return TimeGrid(n_steps)


@dataclass(frozen=True)
class SamplePath:
    """Node values of one path or an ensemble of paths."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[-2] != self.grid.n_steps + 1:
            raise ValueError("values do not match the grid")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def at(self, k):
        """Values at node ``k`` (an int or one index per path)."""
        if np.ndim(k) == 0:
            return self.values[..., k, :]
        k = np.asarray(k)
        return np.take_along_axis(self.values, k[:, None, None], axis=-2)[:, 0, :]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=-2)


@dataclass(frozen=True)
class CameronMartinPath:
    """A Cameron-Martin element stored through its step-wise density."""

    grid: TimeGrid
    dot_u: np.ndarray

    def __post_init__(self):
        if self.dot_u.shape[-2] != self.grid.n_steps:
            raise ValueError("dot_u does not match the grid")

    @property
    def dim(self) -> int:
        return self.dot_u.shape[-1]

    def path(self) -> np.ndarray:
        """Node values ``u(t_k) = sum_{j<k} dot_u[j] dt``."""
        cum = np.cumsum(self.dot_u, axis=-2) * self.grid.dt
        zero = np.zeros(cum.shape[:-2] + (1, cum.shape[-1]))
        return np.concatenate([zero, cum], axis=-2)

    @classmethod
    def constant(cls, grid: TimeGrid, value, dim: int = 1):
        value = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
        return cls(grid, np.tile(value, (grid.n_steps, 1)))


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Draws are organised in chunks of ``CHUNK`` paths, each chunk keyed by its
    own Philox counter, so results do not depend on how many workers run.
    """

    seed: int
    stream_id: int = 0

    def generator(self, *sub: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),) + tuple(int(s) for s in sub))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id * 1_000_003 + int(offset) + 1)

    def normals(self, n_paths: int, shape: tuple, tag: int = 0) -> np.ndarray:
        """Standard normals of shape ``(n_paths,) + shape``, chunk-reproducible."""
        out = np.empty((n_paths,) + tuple(shape))
        for c, lo, hi in chunks(n_paths):
            out[lo:hi] = self.generator(c, tag).standard_normal((hi - lo,) + tuple(shape))
        return out


def chunks(n_paths: int, size: int = CHUNK):
    for c, lo in enumerate(range(0, n_paths, size)):
        yield c, lo, min(lo + size, n_paths)


def map_chunks(fn, n_paths: int, size: int = CHUNK):
    """Apply ``fn(chunk_id, lo, hi)`` to every chunk, in parallel, in order."""
    jobs = list(chunks(n_paths, size))
    threads = min(get_threads(), len(jobs))
    if threads <= 1:
        return [fn(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def sample_brownian(rng: RngStream, grid: TimeGrid, dim: int = 1, n_paths: int | None = None) -> SamplePath:
    """Brownian paths started at 0; one path if ``n_paths`` is None."""
    n = 1 if n_paths is None else n_paths
    z = rng.normals(n, (grid.n_steps, dim)) * np.sqrt(grid.dt)
    values = np.concatenate([np.zeros((n, 1, dim)), np.cumsum(z, axis=1)], axis=1)
    if n_paths is None:
        values = values[0]
    return SamplePath(grid, values)


def _check_pair(u: CameronMartinPath, driver: SamplePath):
    if u.grid != driver.grid:
        raise ValueError("integrand and driver live on different grids")
    if u.dim != driver.dim:
        raise ValueError(f"dimension mismatch: {u.dim} vs {driver.dim}")


def ito_integral(dot_v: CameronMartinPath, driver: SamplePath) -> np.ndarray:
    """Left-point sum ``sum_k dot_v[k] . (driver[k+1] - driver[k])``."""
    _check_pair(dot_v, driver)
    return np.einsum("...kd,...kd->...", dot_v.dot_u, driver.increments())


def cm_norm_sq(u: CameronMartinPath) -> np.ndarray:
    return np.einsum("...kd,...kd->...", u.dot_u, u.dot_u) * u.grid.dt


def pi_tau(u: CameronMartinPath, tau_index, post: bool = True) -> CameronMartinPath:
    """Split a drift at the grid index of a stopping time.

    ``post=True`` returns ``(I - pi_tau) u`` (steps ``k >= tau_index`` kept),
    ``post=False`` returns ``pi_tau u`` (steps ``k < tau_index`` kept).
    ``tau_index`` may be a scalar or one index per path.
    """
    tau_index = np.asarray(tau_index)
    if np.any(tau_index < 0) or np.any(tau_index > u.grid.n_steps):
        raise ValueError("tau_index out of range")
    k = np.arange(u.grid.n_steps)
    if tau_index.ndim == 0:
        keep = k >= tau_index
    else:
        keep = k[None, :] >= tau_index[:, None]
    if not post:
        keep = ~keep
    return CameronMartinPath(u.grid, np.where(keep[..., None], u.dot_u, 0.0))
