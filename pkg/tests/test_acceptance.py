"""Fourteen end-to-end acceptance criteria, each printing one verdict line.

Run with ``pytest tests/test_acceptance.py -v`` (the verdicts are repeated in
the terminal summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import filecmp
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from wienervar import functionals as F
from wienervar import models as M
from wienervar import policies as P
from wienervar import stopping as S
from wienervar.cli import run as cli_run
from wienervar.conditioning import assign_cells, check_unit_conditional, state_at
from wienervar.entropy import anticipative_fold, grid_density_oracle, increment_drift, relative_entropy
from wienervar.models import apply_shift, sample_base
from wienervar.paths import RngStream, TimeGrid, sample_brownian
from wienervar.pipeline import default_stages, reconstruct_inverse, run_pipeline, shifted_observation
from wienervar.prekopa import check_conclusion, check_hypothesis, quadratic_family
from wienervar.stats import mean_se
from wienervar.variational import (OptConfig, direct_value, duality_gap, fd_gradient, objective, optimize,
                                   pathwise_gradient)

pytestmark = pytest.mark.slow

N = 100_000
GRID = TimeGrid(256)
CONFIG = Path(__file__).resolve().parents[1] / "src" / "wienervar" / "configs" / "acceptance.yaml"


def linear_template(knots=5):
    return P.MarkovFeedback.zeros(P.FeatureBasis(1, 1, knots))


def test_c01_gaussian_direct_value(record):
    est = direct_value(M.Wiener(), F.linear_terminal(1.0), None, RngStream(101), GRID, N).scalar
    z = est.z(-0.5)
    record("CRITERION 1", abs(z) <= 3, f"direct={est.value:.5f} se={est.se:.5f} target=-0.5 z={z:+.2f}")
    assert abs(z) <= 3


def test_c02_conditional_direct_value(record):
    rng, tau = RngStream(102), S.Deterministic(0.5)
    f = F.linear_terminal(1.0)
    res = direct_value(M.Wiener(), f, tau, rng, GRID, N)
    base = sample_base(M.Wiener(), rng, GRID, N)
    state = state_at(base.w_path, tau.index(GRID))
    cell = assign_cells(state, res.edges)
    x = state[:, 1]
    # pointwise conditional value x - 1/4 aggregated exactly as the estimator aggregates
    target = np.array([-np.log(np.mean(np.exp(-(x[cell == c] - 0.25)))) for c in range(res.estimate.size)])
    ok = res.valid
    z = (res.estimate[ok] - target[ok]) / res.se[ok]
    passed = ok.sum() >= 10 and np.all(np.abs(z) <= 4)
    record("CRITERION 2", passed, f"cells={ok.sum()} max|z|={np.abs(z).max():.2f}")
    assert passed


def test_c03_variational_attainment_linear(record):
    f = F.linear_terminal(1.0)
    res = optimize(M.Wiener(), f, linear_template(), None, OptConfig(iterations=500), RngStream(103), GRID)
    gap = duality_gap(M.Wiener(), f, res.policy, None, RngStream(1103), GRID, N)
    j, d = gap.objective.scalar, gap.direct.scalar
    rel_target = abs(j.value + 0.5) / 0.5
    rel_gap = abs(j.value - d.value) / abs(d.value)
    passed = rel_target <= 0.02 and rel_gap <= 0.02 and len(res.trace) <= 500
    record("CRITERION 3", passed, f"J={j.value:.5f} direct={d.value:.5f} rel_target={rel_target:.4f} "
                                  f"rel_gap={rel_gap:.4f} iters={len(res.trace)}")
    assert passed


def test_c04_variational_attainment_square(record):
    f = F.square_terminal(1.0)
    target = 0.5 * np.log(3.0)
    res = optimize(M.Wiener(), f, linear_template(), None, OptConfig(iterations=500), RngStream(104), GRID)
    j = objective(M.Wiener(), f, res.policy, None, RngStream(1104), GRID, N).scalar
    rel = abs(j.value - target) / target
    record("CRITERION 4", rel <= 0.02, f"J={j.value:.5f} target={target:.5f} rel={rel:.4f}")
    assert rel <= 0.02


def test_c05_weak_duality_panel(record):
    grid, n = TimeGrid(64), 20_000
    tau = S.Deterministic(0.5)
    objectives = [F.linear_terminal(1.0), F.square_terminal(1.0), F.integral_square(1.0),
                  F.cos_terminal(1.0, 2.0), F.linear_terminal(-0.5) + F.square_terminal(0.5)]
    gen = np.random.default_rng(105)
    basis = P.FeatureBasis(1, 2, 4)
    policies = [P.VanishBefore(tau, P.MarkovFeedback(basis, gen.normal(scale=1.0, size=(basis.size, 1)), clip=3.0))
                for _ in range(50)]
    worst, n_cells, bad = np.inf, 0, 0
    for i, f in enumerate(objectives):
        rng = RngStream(1105, i)
        d = direct_value(M.Wiener(), f, tau, rng, grid, n)
        for pol in policies:
            j = objective(M.Wiener(), f, pol, tau, rng, grid, n, edges=d.edges)
            ok = d.valid & j.valid
            z = (j.estimate[ok] - d.estimate[ok]) / np.sqrt(j.se[ok] ** 2 + d.se[ok] ** 2)
            worst = min(worst, z.min())
            n_cells += ok.sum()
            bad += int(np.sum(z < -4))
    record("CRITERION 5", bad == 0, f"cells={n_cells} violations={bad} min z={worst:.2f}")
    assert bad == 0


def _mc_entropy(policy, grid, n, seed):
    pair = apply_shift(M.Wiener(), RngStream(seed), grid, policy, n)
    return mean_se(-pair.log_wick, 20)


def test_c06_entropy_equality_invertible(record):
    lines, passed = [], True
    det = P.Deterministic.constant(GRID, 1.0)
    delayed = P.Delayed(4, P.StateFeedback(lambda t, x: np.tanh(2 * x) + 0.2))
    for name, pol in [("deterministic", det), ("delayed", delayed)]:
        rep = relative_entropy(M.Wiener(), pol, None, RngStream(106), GRID, N)
        z = rep.gap / rep.se["gap"]
        passed &= abs(z) <= 4
        lines.append(f"{name} gap z={z:+.2f}")
    g2, g3 = TimeGrid(2), TimeGrid(3)
    coarse = [("det2", P.Deterministic(np.array([[1.5], [0.0]])), g2),
              ("delayed3", P.Delayed(1, P.StateFeedback(lambda t, x: 1.5 * np.tanh(2 * x) + 0.5)), g3)]
    for name, pol, g in coarse:
        orc = grid_density_oracle(increment_drift(pol, g), g.n_steps)
        mc = _mc_entropy(pol, g, 400_000, 1106)
        rel = abs(mc.value - orc.entropy) / orc.entropy
        passed &= rel <= 0.02
        lines.append(f"{name} oracle={orc.entropy:.5f} mc={mc.value:.5f} rel={rel:.4f}")
    record("CRITERION 6", passed, "; ".join(lines))
    assert passed


def test_c07_entropy_strict_inequality(record):
    orc = grid_density_oracle(anticipative_fold(), 2, n_nodes=42)
    margin = orc.half_energy - orc.entropy
    passed = (not orc.injective) and margin > 10 * orc.quad_error
    record("CRITERION 7", passed, f"entropy={orc.entropy:.5f} half_energy={orc.half_energy:.5f} "
                                  f"margin={margin:.4f} quad_err={orc.quad_error:.2e} [{orc.message}]")
    assert passed


def test_c08_unit_conditional(record):
    tau = S.Deterministic(0.5)
    k = GRID.index_of(0.5)
    late = np.zeros((GRID.n_steps, 1))
    late[k:] = 1.0
    good = [P.Deterministic(late), P.VanishBefore(tau, P.StateFeedback(lambda t, x: np.tanh(x) + 0.5))]
    reps = [check_unit_conditional(M.Wiener(), v, tau, RngStream(108, i), GRID, N) for i, v in enumerate(good)]
    control = check_unit_conditional(M.Wiener(), P.Deterministic.constant(GRID, 1.0), tau, RngStream(1108), GRID, N)
    passed = all(r.passed and r.syntactic for r in reps) and not control.passed and not control.syntactic
    record("CRITERION 8", passed, f"in-class max|z|={[round(r.max_abs_z, 2) for r in reps]} "
                                  f"control max|z|={control.max_abs_z:.1f}")
    assert passed


def test_c09_pipeline_inversion(record):
    gen = np.random.default_rng(109)
    worst = 0.0
    for lag in (1, 2, 4):
        inner = P.MarkovFeedback(P.FeatureBasis(1, 2, 5), gen.normal(size=(15, 1)), clip=2.0)
        gam = P.Delayed(lag, inner)
        beta = sample_brownian(RngStream(109, lag), GRID, 1, 1000)
        _, cert = reconstruct_inverse(gam, shifted_observation(gam, beta), beta)
        worst = max(worst, cert.max_reconstruction_error)
    record("CRITERION 9", worst <= 1e-8, f"max sup error={worst:.2e} over 3 lags x 1000 paths")
    assert worst <= 1e-8


def test_c10_pipeline_approximation(record):
    target = P.Clipped(3.0, P.StateFeedback(lambda t, x: x))
    rng, n = RngStream(110), 20_000
    dt = GRID.dt
    sweeps = {
        "joint": [(1.05, 0.5, 16), (1.3, 1.0, 4), (4.0, 2.0, 1)],
        "n": [(1.05, 2.0, 1), (1.3, 2.0, 1), (4.0, 2.0, 1)],
        "m": [(4.0, 0.5, 1), (4.0, 1.0, 1), (4.0, 2.0, 1)],
        "1/eta": [(4.0, 2.0, 16), (4.0, 2.0, 4), (4.0, 2.0, 1)],
    }
    lines, passed = [], True
    for name, settings in sweeps.items():
        tot = [run_pipeline(target, default_stages(nn, 0.05, m, j * dt), rng, GRID, n) for nn, m, j in settings]
        vals = [r.total for r in tot]
        mono = all(a > b for a, b in zip(vals, vals[1:]))
        tri = all(r.triangle_ok() for r in tot)
        passed &= mono and tri
        lines.append(f"{name}: " + ">".join(f"{v:.4f}" for v in vals))
    record("CRITERION 10", passed, "; ".join(lines))
    assert passed


def test_c11_measure_family_statistics(record):
    lines, passed = [], True
    for a in (0.0, 0.7):
        w = sample_base(M.BrownianBridge((a,)), RngStream(111), GRID, N).w_path.values[:, :, 0]
        i, j = GRID.index_of(0.25), GRID.index_of(0.75)
        zs = []
        for k in (i, GRID.index_of(0.5), j):
            zs.append(mean_se(w[:, k]).z(a * GRID.times[k]))
        xi, xj = w[:, i] - w[:, i].mean(), w[:, j] - w[:, j].mean()
        zs.append(mean_se(xi * xj).z(0.25 - 0.25 * 0.75))
        zs.append(mean_se(xi * xi).z(0.25 - 0.25 ** 2))
        passed &= max(abs(z) for z in zs) <= 3
        lines.append(f"bridge a={a} max|z|={max(abs(z) for z in zs):.2f}")
    pw = sample_base(M.Particles(1.0, 0.0, 0.0, 1.0, (-1.0, 1.0)), RngStream(1111), GRID, 20_000).w_path.values
    ordered = np.all(np.diff(pw, axis=2) > 0, axis=(1, 2)).mean()
    passed &= ordered == 1.0
    lines.append(f"particles ordered fraction={ordered}")
    atom = M.LoopMeasure(1, nodes=np.array([[1.0]]), weights=np.ones(1))
    xs = np.linspace(-3, 3, 13)[:, None]
    rel = 0.0
    for t in (0.0, 0.3, 0.5, 0.9, 0.99):
        ref = (1.0 - xs) / (1 - t)
        rel = max(rel, float(np.max(np.abs(M.loop_drift(atom, t, xs) - ref) / np.maximum(np.abs(ref), 1e-300))))
    passed &= rel <= 1e-10
    lines.append(f"loop atom rel err={rel:.1e}")
    record("CRITERION 11", passed, "; ".join(lines))
    assert passed


def test_c12_conditional_prekopa_leindler(record):
    tau = S.Deterministic(0.5)
    lines, passed = [], True
    for mb, mc in [(0.0, 0.0), (0.5, -0.5)]:
        inst = quadratic_family(0.3, s=0.5, tau=tau, m_b=mb, m_c=mc)
        hyp = check_hypothesis(inst, 1000, RngStream(112))
        con = check_conclusion(inst, RngStream(1112), GRID, N)
        ok = hyp.min_margin >= -1e-12 and con.passed(4.0)
        passed &= ok
        lines.append(f"centres=({mb},{mc}) margin={hyp.min_margin:.2e} min slack z={con.min_z():.2f}")
    record("CRITERION 12", passed, "; ".join(lines))
    assert passed


def test_c13_gradient_check(record):
    gen = np.random.default_rng(113)
    basis = P.FeatureBasis(1, 2, 5)
    pol = P.MarkovFeedback(basis, gen.normal(scale=0.3, size=(basis.size, 1)))
    worst, lines = 0.0, []
    for f in (F.square_terminal(1.0), F.integral_square(1.0), F.cos_terminal(1.0, 1.0)):
        coords = gen.choice(basis.size, 5, replace=False)
        _, g, _ = pathwise_gradient(M.Wiener(), f, pol, RngStream(113), GRID, 4000)
        fd = fd_gradient(M.Wiener(), f, pol, RngStream(113), GRID, 4000, coords, h=1e-4)
        rel = float(np.max(np.abs(g.ravel()[coords] - fd) / np.maximum(np.abs(fd), 1e-12)))
        worst = max(worst, rel)
        lines.append(f"{f.name}: {rel:.1e}")
    record("CRITERION 13", worst <= 1e-3, "; ".join(lines))
    assert worst <= 1e-3


def _csv_bodies(root):
    return {p.relative_to(root): p.read_text() for p in sorted(root.rglob("*.csv"))}


def test_c14_bundled_config(record, tmp_path, capsys):
    t0 = time.perf_counter()
    code1 = cli_run(CONFIG, out=tmp_path / "a")
    elapsed = time.perf_counter() - t0
    code2 = cli_run(CONFIG, out=tmp_path / "b")
    a, b = _csv_bodies(tmp_path / "a"), _csv_bodies(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a) and len(a) > 0
    passed = code1 == 0 and code2 == 0 and same and elapsed <= 1800
    with capsys.disabled():
        pass
    record("CRITERION 14", passed, f"exit={code1},{code2} identical_csv={same} files={len(a)} runtime={elapsed:.0f}s")
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
