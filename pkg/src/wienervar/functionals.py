"""Path functionals ``f(w)`` with pathwise gradients.

A functional maps an ensemble ``(N, n_steps + 1, m)`` to ``(N,)`` and its
gradient is taken with respect to each node value, shape like the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PathFunctional:
    name = "f"

    def value(self, w, grid):
        raise NotImplementedError

    def grad(self, w, grid):
        raise NotImplementedError

    def __call__(self, w, grid):
        return self.value(w, grid)

    def __add__(self, other):
        return SumF((self, other))

    def __mul__(self, c):
        return ScaledF(float(c), self)

    __rmul__ = __mul__


@dataclass(frozen=True)
class Terminal(PathFunctional):
    """``g(W(1))`` where ``g`` acts on ``(N, m)`` and ``dg`` returns ``(N, m)``."""

    g: object
    dg: object
    name: str = "terminal"

    def value(self, w, grid):
        return self.g(w[:, -1])

    def grad(self, w, grid):
        out = np.zeros_like(w)
        out[:, -1] = self.dg(w[:, -1])
        return out


@dataclass(frozen=True)
class Integral(PathFunctional):
    """Left-point sum ``sum_k g(W(t_k)) dt``."""

    g: object
    dg: object
    name: str = "integral"

    def value(self, w, grid):
        n, k, m = w.shape
        vals = self.g(w[:, :-1].reshape(-1, m)).reshape(n, k - 1)
        return vals.sum(axis=1) * grid.dt

    def grad(self, w, grid):
        n, k, m = w.shape
        out = np.zeros_like(w)
        out[:, :-1] = self.dg(w[:, :-1].reshape(-1, m)).reshape(n, k - 1, m) * grid.dt
        return out


@dataclass(frozen=True)
class Constant(PathFunctional):
    c: float = 0.0
    name: str = "constant"

    def value(self, w, grid):
        return np.full(w.shape[0], float(self.c))

    def grad(self, w, grid):
        return np.zeros_like(w)


@dataclass(frozen=True)
class SumF(PathFunctional):
    parts: tuple
    name: str = "sum"

    def value(self, w, grid):
        return sum(p.value(w, grid) for p in self.parts)

    def grad(self, w, grid):
        return sum(p.grad(w, grid) for p in self.parts)


@dataclass(frozen=True)
class ScaledF(PathFunctional):
    c: float
    inner: PathFunctional
    name: str = "scaled"

    def value(self, w, grid):
        return self.c * self.inner.value(w, grid)

    def grad(self, w, grid):
        return self.c * self.inner.grad(w, grid)


def linear_terminal(lam=1.0, coord: int = 0):
    """``lam * W_coord(1)``."""

    def g(x):
        return lam * x[:, coord]

    def dg(x):
        out = np.zeros_like(x)
        out[:, coord] = lam
        return out

    return Terminal(g, dg, name=f"linear_terminal(lam={lam})")


def square_terminal(q=1.0, center=0.0):
    """``q |W(1) - center|^2``."""
    return Terminal(lambda x: q * ((x - center) ** 2).sum(axis=1), lambda x: 2 * q * (x - center),
                    name=f"square_terminal(q={q})")


def integral_square(q=1.0):
    """``q int_0^1 |W(t)|^2 dt``."""
    return Integral(lambda x: q * (x ** 2).sum(axis=1), lambda x: 2 * q * x, name=f"integral_square(q={q})")


def cos_terminal(amp=1.0, freq=1.0):
    """``amp cos(freq W_0(1))``, bounded."""

    def dg(x):
        out = np.zeros_like(x)
        out[:, 0] = -amp * freq * np.sin(freq * x[:, 0])
        return out

    return Terminal(lambda x: amp * np.cos(freq * x[:, 0]), dg, name=f"cos_terminal(amp={amp},freq={freq})")


def constant(c=0.0):
    return Constant(float(c))


REGISTRY = {
    "constant": constant,
    "linear_terminal": linear_terminal,
    "square_terminal": square_terminal,
    "integral_square": integral_square,
    "cos_terminal": cos_terminal,
}


def build(spec) -> PathFunctional:
    """Build from ``{"name": ..., **params}`` or a list of such dicts (summed)."""
    if isinstance(spec, (list, tuple)):
        parts = tuple(build(s) for s in spec)
        return parts[0] if len(parts) == 1 else SumF(parts)
    spec = dict(spec)
    name = spec.pop("name")
    if name not in REGISTRY:
        raise KeyError(f"unknown functional {name!r}")
    return REGISTRY[name](**spec)


def integrability(values, p=2.0, q=2.0, n_blocks=10):
    """Empirical proxies for ``E|f|^p`` and ``E exp(-q f)``.

    Returns the two means plus the largest relative change when the sample
    is grown block by block; large drift signals a heavy tail.
    """
    values = np.asarray(values, dtype=float)
    with np.errstate(over="ignore"):
        a = np.abs(values) ** p
        b = np.exp(-q * values)
    n = values.size
    sizes = np.linspace(n / n_blocks, n, n_blocks).astype(int)
    ma = np.array([a[:s].mean() for s in sizes])
    mb = np.array([b[:s].mean() for s in sizes])
    finite = bool(np.isfinite(ma[-1]) and np.isfinite(mb[-1]))
    if finite:
        drift = max(np.abs(ma / ma[-1] - 1).max() if ma[-1] else 0.0, np.abs(mb / mb[-1] - 1).max())
    else:
        drift = np.inf
    return dict(moment_p=float(ma[-1]), exp_moment_q=float(mb[-1]), drift=float(drift), finite=finite)
