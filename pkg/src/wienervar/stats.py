"""Monte-Carlo means and standard errors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    n: int

    def z(self, target: float) -> float:
        """Signed deviation from ``target`` in standard errors."""
        if self.se == 0.0:
            return 0.0 if self.value == target else np.copysign(np.inf, self.value - target)
        return (self.value - target) / self.se

    def within(self, target: float, n_se: float, floor: float = 0.0) -> bool:
        return abs(self.value - target) <= n_se * self.se + floor


def mean_se(x, batches: int | None = None) -> Estimate:
    """Sample mean with a standard error.

    With ``batches`` set and enough samples, the error comes from the spread of
    contiguous batch means; otherwise the i.i.d. formula is used.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n == 0:
        return Estimate(np.nan, np.nan, 0)
    m = float(x.mean())
    if n == 1:
        return Estimate(m, np.inf, 1)
    if batches and n >= 10 * batches:
        usable = n - n % batches
        bm = x[:usable].reshape(batches, -1).mean(axis=1)
        se = float(bm.std(ddof=1) / np.sqrt(batches))
    else:
        se = float(x.std(ddof=1) / np.sqrt(n))
    return Estimate(m, se, n)


def ratio_se(num, den) -> Estimate:
    """Ratio of means ``mean(num) / mean(den)`` with a delta-method error."""
    num = np.asarray(num, dtype=float).ravel()
    den = np.asarray(den, dtype=float).ravel()
    n = num.size
    d = den.mean()
    r = num.mean() / d
    if n < 2:
        return Estimate(float(r), np.inf, n)
    resid = num - r * den
    se = resid.std(ddof=1) / np.sqrt(n) / abs(d)
    return Estimate(float(r), float(se), n)
