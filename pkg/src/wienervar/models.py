"""Base measures on path space and their adapted shifts.

Each family describes a path ``W`` driven by a Brownian motion ``beta``.
Shifting by a drift ``u`` means driving the same dynamics with ``beta + u``;
the resulting :class:`ShiftedPair` keeps the driving noise, the realised drift
and the log Girsanov weight ``log rho(-delta_beta u)``.

Two shift modes are supported. In ``"feedback"`` mode the policy reads the
shifted path as it is built (a strong solution, invertible by construction).
In ``"open_loop"`` mode it reads the unshifted base path, i.e. ``u = u(W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import stopping
from .paths import CameronMartinPath, RngStream, SamplePath, TimeGrid, map_chunks
from .policies import Deterministic, DriftPolicy, PathContext, StoppedAt


class CollisionError(RuntimeError):
    pass


class MeasureModel:
    name = "model"
    supports_gradient = True

    state_dim: int
    noise_dim: int

    def x0(self) -> np.ndarray:
        return np.zeros(self.state_dim)

    def draw_noise(self, rng: RngStream, chunk: int, n: int, grid: TimeGrid):
        """Brownian increments ``(n, n_steps, d)`` plus family-specific extras."""
        gen = rng.generator(chunk, 0)
        db = gen.standard_normal((n, grid.n_steps, self.noise_dim)) * np.sqrt(grid.dt)
        return db, None

    def step(self, k, x, db, udot, extra, grid, gen=None):
        raise NotImplementedError

    def step_jacobians(self, k, x, db, udot, extra, grid):
        """``(d x_{k+1} / d x_k, d x_{k+1} / d udot_k)``."""
        raise NotImplementedError(f"{self.name} does not expose step jacobians")

    def recover_beta(self, w: np.ndarray, grid: TimeGrid) -> np.ndarray | None:
        """Exact inverse of the discrete scheme, when the path determines it."""
        return None

    def _extra_at(self, extra, k):
        return None if extra is None else extra[:, k]

    def drive(self, db, udot, extra, grid, x_start=None, gen=None):
        """Integrate the scheme for given noise and drift arrays."""
        n = db.shape[0]
        w = np.empty((n, grid.n_steps + 1, self.state_dim))
        w[:, 0] = self.x0() if x_start is None else x_start
        for k in range(grid.n_steps):
            w[:, k + 1] = self.step(k, w[:, k], db[:, k], udot[:, k], self._extra_at(extra, k), grid, gen)
        return w


@dataclass(frozen=True)
class Wiener(MeasureModel):
    dim: int = 1
    name = "wiener"

    @property
    def state_dim(self):
        return self.dim

    @property
    def noise_dim(self):
        return self.dim

    def step(self, k, x, db, udot, extra, grid, gen=None):
        return x + db + udot * grid.dt

    def step_jacobians(self, k, x, db, udot, extra, grid):
        n, m = x.shape
        eye = np.broadcast_to(np.eye(m), (n, m, m))
        return eye, eye * grid.dt

    def recover_beta(self, w, grid):
        return w - w[:, :1]


@dataclass(frozen=True)
class BrownianBridge(MeasureModel):
    """Bridge from 0 to ``a`` through ``W(t) = a t + (1 - t) int_0^t dbeta / (1 - s)``.

    The kernel integral over each step is drawn jointly with the Brownian
    increment (exact Gaussian pair), so no singular drift is integrated.
    """

    a: tuple = (0.0,)
    name = "bridge"

    @property
    def endpoint(self):
        return np.asarray(self.a, dtype=float).reshape(-1)

    @property
    def state_dim(self):
        return self.endpoint.size

    @property
    def noise_dim(self):
        return self.endpoint.size

    @staticmethod
    def _step_moments(grid):
        t0, t1 = grid.times[:-1], grid.times[1:]
        with np.errstate(divide="ignore"):
            c = np.log((1.0 - t0) / (1.0 - t1))
            v = 1.0 / (1.0 - t1) - 1.0 / (1.0 - t0)
        c[-1] = v[-1] = 0.0
        s = np.sqrt(np.maximum(v - c ** 2 / grid.dt, 0.0))
        return c, s

    def draw_noise(self, rng, chunk, n, grid):
        db, _ = MeasureModel.draw_noise(self, rng, chunk, n, grid)
        z2 = rng.generator(chunk, 1).standard_normal(db.shape)
        c, s = self._step_moments(grid)
        kernel = db * (c / grid.dt)[None, :, None] + z2 * s[None, :, None]
        return db, kernel

    def step(self, k, x, db, udot, extra, grid, gen=None):
        a = self.endpoint
        t0, t1 = grid.times[k], grid.times[k + 1]
        if k == grid.n_steps - 1:
            return np.broadcast_to(a, x.shape).copy()
        c = np.log((1.0 - t0) / (1.0 - t1))
        y = (x - a * t0) / (1.0 - t0)
        y = y + extra + udot * c
        return a * t1 + (1.0 - t1) * y

    def step_jacobians(self, k, x, db, udot, extra, grid):
        n, m = x.shape
        eye = np.broadcast_to(np.eye(m), (n, m, m))
        if k == grid.n_steps - 1:
            return eye * 0.0, eye * 0.0
        t0, t1 = grid.times[k], grid.times[k + 1]
        c = np.log((1.0 - t0) / (1.0 - t1))
        return eye * ((1.0 - t1) / (1.0 - t0)), eye * ((1.0 - t1) * c)


def sphere_nodes(dim: int) -> np.ndarray:
    """Fixed equal-weight node sets on the unit sphere of ``R^dim``."""
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        ang = 2 * np.pi * np.arange(64) / 64
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if dim == 3:
        n = 128
        i = np.arange(n) + 0.5
        z = 1 - 2 * i / n
        r = np.sqrt(1 - z ** 2)
        phi = np.pi * (3 - np.sqrt(5)) * i
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    g = np.random.Generator(np.random.Philox(20240917)).standard_normal((256, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class LoopMeasure(MeasureModel):
    """Mixture of bridges from 0 to endpoints on the unit sphere, weight ``alpha``.

    ``alpha`` is a nonnegative function on the sphere evaluated at a fixed
    node set and renormalised. ``nodes``/``weights`` override the quadrature
    (e.g. a single atom, which reduces to the bridge).
    """

    dim: int = 1
    alpha: object = None
    nodes: np.ndarray | None = field(default=None, compare=False)
    weights: np.ndarray | None = field(default=None, compare=False)
    name = "loop"

    def __post_init__(self):
        nodes = sphere_nodes(self.dim) if self.nodes is None else np.asarray(self.nodes, dtype=float).reshape(-1, self.dim)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
        elif self.alpha is not None:
            w = np.asarray([self.alpha(a) for a in nodes], dtype=float)
        else:
            w = np.ones(len(nodes))
        if w.shape[0] != nodes.shape[0]:
            raise ValueError("one weight per node required")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("sphere weight must be nonnegative with positive mass")
        object.__setattr__(self, "_nodes", nodes)
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "_log_w", np.log(w / w.sum()))

    @property
    def state_dim(self):
        return self.dim

    @property
    def noise_dim(self):
        return self.dim

    def _posterior(self, t, x):
        if np.any(np.asarray(t) >= 1.0 - 1e-12):
            raise ValueError("loop drift is singular at the terminal time")
        d2 = ((x[:, None, :] - self._nodes[None]) ** 2).sum(axis=-1)
        logits = self._log_w[None] - d2 / (2 * (1 - t))
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def log_density(self, t, x):
        """``log h(t, x)`` with the kernel ``(pi (1-t))^{-n/2} exp(-|x-a|^2 / (2 (1-t)))``."""
        x = np.atleast_2d(x)
        d2 = ((x[:, None, :] - self._nodes[None]) ** 2).sum(axis=-1)
        pref = -0.5 * self.dim * np.log(np.pi * (1 - t))
        return pref + logsumexp(self._log_w[None] - d2 / (2 * (1 - t)), axis=1)

    def drift(self, t, x):
        p = self._posterior(t, x)
        return (p @ self._nodes - x) / (1 - t)

    def drift_jacobian(self, t, x):
        p = self._posterior(t, x)
        mean = p @ self._nodes
        second = np.einsum("nk,ki,kj->nij", p, self._nodes, self._nodes)
        cov = second - np.einsum("ni,nj->nij", mean, mean)
        eye = np.eye(self.dim)
        return (cov / (1 - t) - eye) / (1 - t)

    def step(self, k, x, db, udot, extra, grid, gen=None):
        t = grid.times[k]
        return x + self.drift(t, x) * grid.dt + db + udot * grid.dt

    def step_jacobians(self, k, x, db, udot, extra, grid):
        n, m = x.shape
        eye = np.broadcast_to(np.eye(m), (n, m, m))
        return eye + self.drift_jacobian(grid.times[k], x) * grid.dt, eye * grid.dt

    def recover_beta(self, w, grid):
        drift = np.stack([self.drift(grid.times[k], w[:, k]) for k in range(grid.n_steps)], axis=1)
        inc = np.diff(w, axis=1) - drift * grid.dt
        return np.concatenate([np.zeros_like(w[:, :1]), np.cumsum(inc, axis=1)], axis=1)


def loop_drift(model: LoopMeasure, t: float, x) -> np.ndarray:
    """Gradient in ``x`` of ``log h(t, x)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = model.drift(t, np.atleast_2d(x))
    return out[0] if single else out


def _fd_jacobian(fn, x, eps=1e-6):
    """Central differences of ``fn: (N, m) -> (N, ...)`` in each coordinate of x."""
    cols = []
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = eps
        cols.append((fn(x + e) - fn(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class Diffusion(MeasureModel):
    """Euler-Maruyama scheme for ``dX = b(X) dt + sigma(X) dbeta``.

    ``sigma`` maps ``(N, m) -> (N, m, d)`` and ``b`` maps ``(N, m) -> (N, m)``.
    Both should be bounded and Lipschitz.
    """

    sigma: object
    b: object
    c: tuple = (0.0,)
    noise_dim: int = 1
    name = "diffusion"

    @property
    def state_dim(self):
        return np.asarray(self.c).reshape(-1).size

    def x0(self):
        return np.asarray(self.c, dtype=float).reshape(-1)

    def step(self, k, x, db, udot, extra, grid, gen=None):
        dw = db + udot * grid.dt
        return x + self.b(x) * grid.dt + np.einsum("nij,nj->ni", self.sigma(x), dw)

    def step_jacobians(self, k, x, db, udot, extra, grid):
        n, m = x.shape
        dw = db + udot * grid.dt
        jb = _fd_jacobian(self.b, x)
        jsig = _fd_jacobian(self.sigma, x)  # (N, m, d, m)
        a = np.eye(m)[None] + jb * grid.dt + np.einsum("nijk,nj->nik", jsig, dw)
        return a, self.sigma(x) * grid.dt

    def recover_beta(self, w, grid):
        if self.state_dim != self.noise_dim:
            return None
        inc = np.empty((w.shape[0], grid.n_steps, self.noise_dim))
        for k in range(grid.n_steps):
            x = w[:, k]
            rhs = w[:, k + 1] - x - self.b(x) * grid.dt
            inc[:, k] = np.linalg.solve(self.sigma(x), rhs[..., None])[..., 0]
        return np.concatenate([np.zeros((w.shape[0], 1, self.noise_dim)), np.cumsum(inc, axis=1)], axis=1)


MAX_REFINE = 8


@dataclass(frozen=True)
class Particles(MeasureModel):
    """Repelling particles ``dZ_i = (b Z_i + c + gamma sum_j 1/(Z_i - Z_j)) dt + sigma dbeta_i``.

    Steps that would shrink a gap below ``10 sigma sqrt(h)`` are halved
    recursively (Brownian-bridge refinement of the increment), at most
    ``MAX_REFINE`` times. A crossing that survives full refinement is retried
    with the interaction taken implicitly (which keeps the order for any
    noise); with ``implicit_fallback=False``, or if that solve fails, it
    raises :class:`CollisionError`.
    """

    sigma: float = 1.0
    b: float = 0.0
    c: float = 0.0
    gamma: float = 1.0
    z0: tuple = (-1.0, 1.0)
    implicit_fallback: bool = True
    name = "particles"
    supports_gradient = False

    def __post_init__(self):
        z0 = np.asarray(self.z0, dtype=float)
        if self.sigma ** 2 > 2 * self.gamma:
            raise ValueError("need sigma^2 <= 2 gamma for the non-colliding regime")
        if np.any(np.diff(z0) <= 0):
            raise ValueError("initial positions must be strictly increasing")

    @property
    def state_dim(self):
        return len(self.z0)

    @property
    def noise_dim(self):
        return len(self.z0)

    def x0(self):
        return np.asarray(self.z0, dtype=float)

    def drift(self, x):
        diff = x[:, :, None] - x[:, None, :]
        n = x.shape[1]
        with np.errstate(divide="ignore"):
            inv = np.where(np.eye(n, dtype=bool)[None], 0.0, 1.0 / diff)
        return self.b * x + self.c + self.gamma * inv.sum(axis=2)

    def _advance(self, x, db, udot, h, depth, gen):
        prop = x + self.drift(x) * h + self.sigma * (db + udot * h)
        g_new = np.diff(prop, axis=1)
        if depth >= MAX_REFINE:
            bad = np.any(g_new <= 0, axis=1)
            if bad.any():
                if not self.implicit_fallback:
                    raise CollisionError("collision at desk scale, refine grid")
                xb = x[bad]
                target = xb + (self.b * xb + self.c) * h + self.sigma * (db[bad] + udot[bad] * h)
                prop[bad] = self._implicit(xb, target, h)
            return prop
        g_old = np.diff(x, axis=1)
        risky = np.any((g_new < 10 * self.sigma * np.sqrt(h)) & (g_new < g_old), axis=1)
        if risky.any():
            idx = np.nonzero(risky)[0]
            dbr = db[idx]
            if gen is None:
                raise CollisionError("refinement needs a random generator")
            mid = 0.5 * dbr + np.sqrt(h / 4) * gen.standard_normal(dbr.shape)
            xm = self._advance(x[idx], mid, udot[idx], h / 2, depth + 1, gen)
            prop[idx] = self._advance(xm, dbr - mid, udot[idx], h / 2, depth + 1, gen)
        return prop

    def _implicit(self, x, target, h, iters=60):
        """Solve ``y = target + h gamma sum_j 1/(y_i - y_j)`` on the ordered cone.

        This is the minimiser of the strictly convex
        ``|y - target|^2 / (2h) - gamma sum_{i<j} log(y_j - y_i)``, found by
        damped Newton from the (ordered) current positions.
        """
        n = x.shape[1]
        off = ~np.eye(n, dtype=bool)[None]

        def parts(y):
            d = y[:, :, None] - y[:, None, :]
            with np.errstate(divide="ignore"):
                inv = np.where(off, 1.0 / d, 0.0)
            grad = (y - target) / h - self.gamma * inv.sum(axis=2)
            return grad, inv

        def energy(y):
            gaps = y[:, None, :] - y[:, :, None]
            iu = np.triu_indices(n, 1)
            return np.sum((y - target) ** 2, axis=1) / (2 * h) - self.gamma * np.log(gaps[:, iu[0], iu[1]]).sum(axis=1)

        y = x.copy()
        for _ in range(iters):
            grad, inv = parts(y)
            if np.max(np.abs(grad)) * h < 1e-14 * (1 + np.max(np.abs(y))):
                break
            hess = self.gamma * inv ** 2
            hess = -hess + np.eye(n)[None] * (1 / h + hess.sum(axis=2))[:, :, None]
            step = np.linalg.solve(hess, grad[..., None])[..., 0]
            t = np.ones(y.shape[0])
            e0 = energy(y)
            for _ in range(60):
                cand = y - t[:, None] * step
                ok = np.all(np.diff(cand, axis=1) > 0, axis=1)
                with np.errstate(invalid="ignore", divide="ignore"):
                    ok &= np.where(ok, energy(np.where(ok[:, None], cand, y)) <= e0 + 1e-12 * np.abs(e0), False)
                if ok.all():
                    break
                t = np.where(ok, t, t / 2)
            y = np.where(ok[:, None], cand, y)
        if not np.all(np.diff(y, axis=1) > 0) or not np.all(np.isfinite(y)):
            raise CollisionError("collision at desk scale, refine grid")
        return y

    def step(self, k, x, db, udot, extra, grid, gen=None):
        return self._advance(x, db, udot, grid.dt, 0, gen)


@dataclass
class ShiftedPair:
    """Ensemble of shifted paths with their driving noise."""

    w_path: SamplePath
    beta_path: SamplePath
    u: CameronMartinPath
    log_wick: np.ndarray
    base_path: SamplePath | None = None
    mode: str = "feedback"
    certified: bool = True
    extra: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.log_wick.shape[0]

    @property
    def beta_shifted(self) -> np.ndarray:
        return self.beta_path.values + self.u.path()


def simulate(model: MeasureModel, rng: RngStream, grid: TimeGrid, n_paths: int,
             policy: DriftPolicy | None = None, mode: str = "feedback",
             prefix: np.ndarray | None = None, keep_base: bool = False) -> ShiftedPair:
    """Sample the family and, optionally, its shift by an adapted policy.

    ``prefix`` (``(n_paths, k0 + 1, m)``) restarts every path from node ``k0``
    with the given history; earlier steps carry no drift and no noise.
    """
    if mode not in ("feedback", "open_loop"):
        raise ValueError(f"unknown mode {mode!r}")
    m, d = model.state_dim, model.noise_dim
    k0 = 0 if prefix is None else prefix.shape[1] - 1
    open_loop = policy is not None and mode == "open_loop"

    def run(chunk, lo, hi):
        n = hi - lo
        db, extra = model.draw_noise(rng, chunk, n, grid)
        if k0:
            db[:, :k0] = 0.0
        gen = rng.generator(chunk, 2)
        w = np.empty((n, grid.n_steps + 1, m))
        beta = np.zeros((n, grid.n_steps + 1, d))
        beta[:, 1:] = np.cumsum(db, axis=1)
        beta_u = beta.copy()
        dot = np.zeros((n, grid.n_steps, d))
        if prefix is None:
            w[:, 0] = model.x0()
        else:
            w[:, : k0 + 1] = prefix[lo:hi]
        wb = w.copy() if (open_loop or keep_base) else None
        ev = None
        if policy is not None:
            ctx = PathContext(grid, wb, beta) if open_loop else PathContext(grid, w, beta_u)
            ev = policy.evaluator(ctx)
        for k in range(k0, grid.n_steps):
            ex = model._extra_at(extra, k)
            if ev is not None:
                u_k = np.asarray(ev(k), dtype=float)
                if not np.all(np.isfinite(u_k)):
                    raise FloatingPointError("policy produced a non-finite drift")
                dot[:, k] = u_k
            if wb is not None:
                wb[:, k + 1] = model.step(k, wb[:, k], db[:, k], np.zeros((n, d)), ex, grid, gen)
            w[:, k + 1] = model.step(k, w[:, k], db[:, k], dot[:, k], ex, grid, gen)
            beta_u[:, k + 1] = beta_u[:, k] + db[:, k] + dot[:, k] * grid.dt
        ito = np.einsum("nkd,nkd->n", dot, db)
        energy = np.einsum("nkd,nkd->n", dot, dot) * grid.dt
        return w, beta, dot, -ito - 0.5 * energy, wb, extra

    parts = map_chunks(run, n_paths)
    w = np.concatenate([p[0] for p in parts])
    beta = np.concatenate([p[1] for p in parts])
    dot = np.concatenate([p[2] for p in parts])
    log_wick = np.concatenate([p[3] for p in parts])
    base = None
    if parts[0][4] is not None:
        base = SamplePath(grid, np.concatenate([p[4] for p in parts]))
    extra = None if parts[0][5] is None else np.concatenate([p[5] for p in parts])
    certified = policy is None or mode == "feedback" or policy.certified_open_loop
    return ShiftedPair(SamplePath(grid, w), SamplePath(grid, beta), CameronMartinPath(grid, dot),
                       log_wick, base, mode, certified, extra)


def sample_base(model, rng, grid, n_paths: int) -> ShiftedPair:
    """Unshifted paths (``W^0 = W``)."""
    return simulate(model, rng, grid, n_paths)


def apply_shift(model, rng, grid, policy, n_paths: int, mode: str = "feedback", keep_base: bool = False) -> ShiftedPair:
    return simulate(model, rng, grid, n_paths, policy=policy, mode=mode, keep_base=keep_base)


@dataclass
class FlowReport:
    beta_shift: float
    beta_recovered: float | None
    composition: float
    pre_tau: float
    n_paths: int

    def as_dict(self):
        return dict(beta_shift=self.beta_shift, beta_recovered=self.beta_recovered,
                    composition=self.composition, pre_tau=self.pre_tau, n_paths=self.n_paths)


def _drift_array(policy, grid, d):
    dot = np.asarray(policy.dot, dtype=float)
    return dot[:, None] if dot.ndim == 1 else dot.reshape(grid.n_steps, d)


def verify_flow_conditions(model: MeasureModel, u: Deterministic, v: Deterministic, tau, rng: RngStream,
                           grid: TimeGrid, n_paths: int = 1000, feedback: DriftPolicy | None = None) -> FlowReport:
    """Sup-norm discrepancies of the shift identities on sampled paths.

    * ``beta_shift``: stored ``beta o W^u`` against ``beta + u``.
    * ``beta_recovered``: the same, with ``beta`` re-read from the path by the
      inverse of the scheme (families where the path determines it).
    * ``composition``: ``W^u o W^v`` against ``W^{v + u}`` for deterministic drifts.
    * ``pre_tau``: ``W^u`` against ``W^{pi_tau u}`` on nodes up to ``tau``
      (for ``feedback`` if given, else ``u``).
    """
    d = model.noise_dim
    pair_u = apply_shift(model, rng, grid, u, n_paths)
    target = pair_u.beta_path.values + pair_u.u.path()
    beta_shift = float(np.max(np.abs(pair_u.beta_shifted - target)))
    rec = model.recover_beta(pair_u.w_path.values, grid)
    beta_rec = None if rec is None else float(np.max(np.abs(rec - target)))

    # composition on one chunk of noise, drawn the same way simulate() does
    n = min(n_paths, 4096)
    db, extra = model.draw_noise(rng, 0, n, grid)
    gen_a, gen_b = rng.generator(0, 2), rng.generator(0, 2)
    du = np.broadcast_to(_drift_array(u, grid, d), db.shape)
    dv = np.broadcast_to(_drift_array(v, grid, d), db.shape)
    direct = model.drive(db, du + dv, extra, grid, gen=gen_a)
    w_v = model.drive(db, dv, extra, grid, gen=gen_b)
    rec_v = model.recover_beta(w_v, grid)
    if rec_v is not None and not isinstance(model, Particles):
        db_v = np.diff(rec_v, axis=1)
        extra_v = extra
    else:
        db_v = db + dv * grid.dt
        extra_v = extra
    if isinstance(model, BrownianBridge):
        c, _ = BrownianBridge._step_moments(grid)
        db_v = db + dv * grid.dt
        extra_v = extra + dv * c[None, :, None]
    composed = model.drive(db_v, du, extra_v, grid, gen=rng.generator(0, 2))
    composition = float(np.max(np.abs(composed - direct)))

    shift = feedback if feedback is not None else u
    full = apply_shift(model, rng, grid, shift, n_paths)
    cut = apply_shift(model, rng, grid, StoppedAt(tau, shift), n_paths)
    k_tau = stopping.evaluate_stop(tau, full.w_path)
    nodes = np.arange(grid.n_steps + 1)
    mask = nodes[None, :] <= np.broadcast_to(k_tau, (n_paths,))[:, None]
    diff = np.abs(full.w_path.values - cut.w_path.values).max(axis=-1)
    pre_tau = float(np.max(np.where(mask, diff, 0.0)))
    return FlowReport(beta_shift, beta_rec, composition, pre_tau, n_paths)
