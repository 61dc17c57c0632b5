"""Grid-evaluable stopping times."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .paths import SamplePath, TimeGrid


@dataclass(frozen=True)
class Deterministic:
    t: float

    def hit(self, k, grid: TimeGrid, x=None, log_m=None):
        return grid.times[k] >= self.t - 1e-12

    def index(self, grid: TimeGrid) -> int:
        return grid.index_of(self.t)


@dataclass(frozen=True)
class FirstExit:
    """First node where ``|W| >= radius``; capped at the horizon."""

    radius: float

    def hit(self, k, grid, x=None, log_m=None):
        return np.linalg.norm(x, axis=-1) >= self.radius


@dataclass(frozen=True)
class FirstLevelHit:
    """First node where a density process reaches ``level``."""

    level: float

    def hit(self, k, grid, x=None, log_m=None):
        if log_m is None:
            raise ValueError("FirstLevelHit needs a density process")
        return log_m >= np.log(self.level)


StoppingRule = Deterministic | FirstExit | FirstLevelHit


def _first_true(mask: np.ndarray, n_steps: int) -> np.ndarray:
    hit_any = mask.any(axis=-1)
    first = np.argmax(mask, axis=-1)
    return np.where(hit_any, first, n_steps)


def evaluate_stop(rule, source, grid: TimeGrid | None = None):
    """Grid index of the stopping time on each path.

    ``source`` is a SamplePath for path rules and a DensityProcess for
    ``FirstLevelHit``. Returns an int for a single path, an array otherwise.
    """
    if isinstance(rule, FirstLevelHit):
        grid = source.grid
        mask = source.log_m >= np.log(rule.level)
        return _first_true(mask, grid.n_steps)
    if not isinstance(source, SamplePath):
        raise TypeError("path rules need a SamplePath")
    grid = source.grid
    if isinstance(rule, Deterministic):
        k = rule.index(grid)
        lead = source.values.shape[:-2]
        return k if not lead else np.full(lead, k)
    if isinstance(rule, FirstExit):
        if np.isinf(rule.radius):
            lead = source.values.shape[:-2]
            return grid.n_steps if not lead else np.full(lead, grid.n_steps)
        mask = np.linalg.norm(source.values, axis=-1) >= rule.radius
        return _first_true(mask, grid.n_steps)
    raise TypeError(f"unknown stopping rule {rule!r}")
