import numpy as np
import pytest

from wienervar import RngStream, TimeGrid, sample_brownian
from wienervar import models as M
from wienervar import policies as P
from wienervar import stopping as S
from wienervar.stats import mean_se


def sigma_tanh(x):
    return (1.0 + 0.1 * np.tanh(x))[:, :, None]


def no_drift(x):
    return np.zeros_like(x)


FAMILIES = {
    "wiener": M.Wiener(),
    "bridge": M.BrownianBridge((0.4,)),
    "loop": M.LoopMeasure(1),
    "diffusion": M.Diffusion(sigma_tanh, lambda x: -0.5 * np.tanh(x), (0.2,)),
    "particles": M.Particles(1.0, 0.0, 0.0, 1.0, (-1.0, 1.0)),
}


def test_wiener_base_is_brownian():
    g = TimeGrid(32)
    a = M.sample_base(M.Wiener(), RngStream(4), g, 1000).w_path.values
    b = sample_brownian(RngStream(4), g, 1, 1000).values
    np.testing.assert_array_equal(a, b)


def test_bridge_moments_zero_endpoint():
    g = TimeGrid(256)
    w = M.sample_base(M.BrownianBridge((0.0,)), RngStream(5), g, 100_000).w_path.values[:, :, 0]
    assert abs(mean_se(w[:, 128]).z(0.0)) <= 3
    cov = mean_se((w[:, 64] - w[:, 64].mean()) * (w[:, 192] - w[:, 192].mean()))
    assert abs(cov.z(0.0625)) <= 3


@pytest.mark.parametrize("a", [0.0, -1.3, 2.0])
def test_bridge_hits_endpoint(a):
    g = TimeGrid(64)
    w = M.sample_base(M.BrownianBridge((a,)), RngStream(6), g, 500).w_path.values
    assert np.max(np.abs(w[:, -1, 0] - a)) <= 1e-8


def test_bridge_zero_shift_matches_base():
    g = TimeGrid(32)
    fam = M.BrownianBridge((0.0,))
    a = M.sample_base(fam, RngStream(8), g, 200).w_path.values
    b = M.apply_shift(fam, RngStream(8), g, P.Zero(), 200).w_path.values
    np.testing.assert_array_equal(a, b)


def test_wiener_constant_shift():
    g = TimeGrid(32)
    pair = M.apply_shift(M.Wiener(), RngStream(9), g, P.Deterministic.constant(g, 0.7), 100)
    np.testing.assert_allclose(pair.w_path.values[:, -1, 0], pair.beta_path.values[:, -1, 0] + 0.7, atol=1e-12)
    # log_wick = -ito - energy/2
    expect = -0.7 * pair.beta_path.values[:, -1, 0] - 0.5 * 0.49
    np.testing.assert_allclose(pair.log_wick, expect, atol=1e-12)


def test_particles_ordered():
    g = TimeGrid(256)
    w = M.sample_base(FAMILIES["particles"], RngStream(10), g, 20_000).w_path.values
    assert np.min(w[:, :, 1] - w[:, :, 0]) > 0


def test_particles_preconditions():
    with pytest.raises(ValueError):
        M.Particles(sigma=2.0, gamma=1.0)
    with pytest.raises(ValueError):
        M.Particles(z0=(1.0, 0.0))


def test_particles_collision_error_without_fallback():
    # a huge converging drift crosses even after full refinement
    drift = P.Deterministic(np.array([[5e3, -5e3], [0.0, 0.0]]))
    strict = M.Particles(1.0, 0.0, 0.0, 1.0, (-1e-3, 1e-3), implicit_fallback=False)
    with pytest.raises(M.CollisionError, match="refine grid"):
        M.apply_shift(strict, RngStream(1), TimeGrid(2), drift, 50)
    w = M.apply_shift(M.Particles(1.0, 0.0, 0.0, 1.0, (-1e-3, 1e-3)), RngStream(1), TimeGrid(2), drift, 50)
    assert np.all(np.diff(w.w_path.values, axis=2) > 0)


def test_particles_implicit_step_two_body_closed_form():
    fam = M.Particles()
    x = np.array([[-0.07, -0.06], [0.0, 1.0]])
    target = x + np.array([[0.012, -0.009], [0.0, 0.0]])
    h = 3e-5
    y = fam._implicit(x, target, h)
    g0 = np.diff(target, axis=1)[:, 0]
    # the gap solves g^2 - g0 g - 2 (2 gamma) h / 2 = 0
    np.testing.assert_allclose(np.diff(y, axis=1)[:, 0], (g0 + np.sqrt(g0 ** 2 + 8 * h)) / 2, rtol=1e-12)


def test_loop_drift_examples():
    uni = M.LoopMeasure(1)
    for t in (0.0, 0.3, 0.9):
        assert M.loop_drift(uni, t, np.zeros((1, 1)))[0, 0] == pytest.approx(0.0, abs=1e-14)
    atom = M.LoopMeasure(1, nodes=np.array([[1.0]]), weights=np.ones(1))
    assert M.loop_drift(atom, 0.5, np.zeros((1, 1)))[0, 0] == pytest.approx(2.0, rel=1e-12)
    far = M.loop_drift(uni, 0.5, np.array([[10.0]]))[0, 0]
    assert far == pytest.approx((1 - 10.0) / 0.5, rel=1e-8)
    with pytest.raises(ValueError):
        M.loop_drift(uni, 1.0, np.zeros((1, 1)))


@pytest.mark.parametrize("dim", [2, 3])
def test_loop_sphere_nodes(dim):
    nodes = M.sphere_nodes(dim)
    assert nodes.shape[0] >= 64
    np.testing.assert_allclose(np.linalg.norm(nodes, axis=1), 1.0, atol=1e-12)
    fam = M.LoopMeasure(dim)
    w = M.sample_base(fam, RngStream(11), TimeGrid(64), 64).w_path.values
    assert np.all(np.isfinite(w))


@pytest.mark.parametrize("name", list(FAMILIES))
def test_girsanov_unbiased(name):
    """Reweighting shifted paths by the Wick density recovers the base law."""
    fam = FAMILIES[name]
    # the particle scheme needs the finer grid to stay clear of the collision guard
    g = TimeGrid(64) if name != "particles" else TimeGrid(256)
    n = 100_000 if name != "particles" else 20_000
    d = fam.noise_dim
    pol = P.Clipped(1.0, P.StateFeedback(lambda t, x: np.sin(3 * x[:, :d]) + 0.5))
    base = M.sample_base(fam, RngStream(12), g, n).w_path.values
    pair = M.apply_shift(fam, RngStream(13), g, pol, n)
    wt = np.exp(pair.log_wick)
    w = pair.w_path.values
    panel = [lambda p: p[:, p.shape[1] // 2, 0], lambda p: p[:, -1, -1] ** 2,
             lambda p: np.cos(p[:, p.shape[1] // 4, 0])]
    for f in panel:
        a, b = mean_se(f(w) * wt), mean_se(f(base))
        z = (a.value - b.value) / np.hypot(a.se, b.se)
        assert abs(z) <= 4, (name, z)


def test_girsanov_second_moment_constant_shift():
    g = TimeGrid(64)
    c = 0.8
    pair = M.apply_shift(M.Wiener(), RngStream(14), g, P.Deterministic.constant(g, c), 100_000)
    assert abs(mean_se(pair.w_path.values[:, -1, 0] ** 2 * np.exp(pair.log_wick)).z(1.0)) <= 3


@pytest.mark.parametrize("name", ["wiener", "bridge", "loop", "diffusion"])
def test_flow_conditions(name):
    g = TimeGrid(64)
    u = P.Deterministic.constant(g, 0.3)
    v = P.Deterministic.constant(g, -0.2)
    rep = M.verify_flow_conditions(FAMILIES[name], u, v, S.Deterministic(0.5), RngStream(15), g, 500)
    assert rep.beta_shift <= 1e-12
    if name == "bridge":
        # the exact bridge kernel mixes in a second Gaussian, so the path alone does not determine beta
        assert rep.beta_recovered is None
    else:
        assert rep.beta_recovered <= 1e-10
    assert rep.composition <= 1e-10
    assert rep.pre_tau == 0.0


def test_bridge_pre_tau_agreement_unit_drift():
    g = TimeGrid(128)
    u = P.Deterministic.constant(g, 1.0)
    rep = M.verify_flow_conditions(FAMILIES["bridge"], u, u, S.Deterministic(0.5), RngStream(16), g, 500)
    assert rep.pre_tau == 0.0


@pytest.mark.parametrize("n_steps", [64, 128, 256])
def test_diffusion_composition_across_grids(n_steps):
    g = TimeGrid(n_steps)
    fam = M.Diffusion(sigma_tanh, no_drift)
    rep = M.verify_flow_conditions(fam, P.Deterministic.constant(g, 0.3), P.Deterministic.constant(g, -0.2),
                                   S.Deterministic(0.5), RngStream(17), g, 300)
    assert rep.composition <= 1e-10


def test_particles_flow_without_recovery():
    g = TimeGrid(64)
    fam = FAMILIES["particles"]
    u = P.Deterministic(np.full((64, 2), 0.3))
    rep = M.verify_flow_conditions(fam, u, u, S.Deterministic(0.5), RngStream(18), g, 200)
    assert rep.beta_recovered is None
    assert rep.beta_shift <= 1e-12 and rep.pre_tau == 0.0


def test_open_loop_certification_flag():
    g = TimeGrid(16)
    fb = P.StateFeedback(lambda t, x: x)
    assert M.apply_shift(M.Wiener(), RngStream(1), g, fb, 10).certified
    assert not M.apply_shift(M.Wiener(), RngStream(1), g, fb, 10, mode="open_loop").certified
    assert M.apply_shift(M.Wiener(), RngStream(1), g, P.Delayed(1, fb), 10, mode="open_loop").certified


def test_non_finite_policy_raises():
    g = TimeGrid(8)
    with pytest.raises(FloatingPointError):
        M.apply_shift(M.Wiener(), RngStream(1), g, P.StateFeedback(lambda t, x: np.full_like(x, np.nan)), 4)
