import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wienervar import RngStream, TimeGrid
from wienervar import models as M
from wienervar import stopping as S
from wienervar.conditioning import state_at
from wienervar.prekopa import (check_conclusion, check_hypothesis, quadratic_family, slack_from_samples,
                               unchecked_quadratic)

G = TimeGrid(64)
TAU = S.Deterministic(0.5)


def test_flat_instance():
    inst = quadratic_family(0.0)
    hyp = check_hypothesis(inst, 1000, RngStream(91))
    assert hyp.passed and hyp.min_margin >= -1e-12
    con = check_conclusion(inst, RngStream(92), G, 20_000)
    assert np.all(con.slack[con.valid] == 0)


@pytest.mark.parametrize("q", [0.3, 1.0, 5.0])
def test_convex_instances_satisfy_hypothesis(q):
    for centres in [(0.0, 0.0), (0.5, -0.5)]:
        hyp = check_hypothesis(quadratic_family(q, 0.2, 0.5, TAU, *centres), 1000, RngStream(93))
        assert hyp.passed and hyp.min_margin >= -1e-12


def test_curvature_guard():
    with pytest.raises(ValueError):
        quadratic_family(-0.3)


def test_mild_negative_curvature_is_still_convex():
    # q (x + h)^2 + h^2 / 2 has curvature 2 q + 1 in the shift, positive for q > -1/2
    hyp = check_hypothesis(unchecked_quadratic(-0.3), 1000, RngStream(94))
    assert hyp.violations == 0


def test_concave_control_is_detected():
    hyp = check_hypothesis(unchecked_quadratic(-0.8), 1000, RngStream(95))
    assert hyp.violations > 0 and hyp.min_margin < -1e-6


def test_conclusion_quadratic():
    con = check_conclusion(quadratic_family(0.3, 0.0, 0.5, TAU, 0.5, -0.5), RngStream(96), G, 100_000)
    assert con.valid.sum() >= 10 and con.passed(4.0)
    # distinct centres make the inequality strict
    assert con.min_z() > 4


def test_degenerate_interpolation():
    inst = quadratic_family(0.3, 0.0, 1.0, TAU)
    con = check_conclusion(inst, RngStream(97), G, 20_000)
    np.testing.assert_allclose(con.slack[con.valid], 0.0, atol=1e-12)
    assert con.passed()


@pytest.mark.parametrize("s", [0.0, 1.0])
def test_endpoint_s_compares_single_functional(s):
    # with s at an end point a coincides with the surviving functional, so the slack vanishes
    inst = quadratic_family(0.3, 0.0, s, TAU, 0.5, -0.5)
    con = check_conclusion(inst, RngStream(98), G, 20_000)
    np.testing.assert_allclose(con.slack[con.valid], 0.0, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(1.0, 3.0), st.floats(0.05, 0.95))
def test_enlarging_a_never_lowers_slack(factor, s):
    gen = np.random.default_rng(99)
    n = 5000
    x = gen.normal(size=n)
    state = np.column_stack([np.full(n, 0.5), x])
    a = np.exp(-0.3 * (x + gen.normal(size=n)) ** 2)
    b = np.exp(-0.3 * (x - 1) ** 2)
    c = np.exp(-0.3 * (x + 1) ** 2)
    d = np.ones(n)
    lo = slack_from_samples(a, b, c, d, s, state)
    hi = slack_from_samples(a * factor, b, c, d, s, state, edges=lo.extras["edges"])
    assert np.all(hi.slack[lo.valid] >= lo.slack[lo.valid])


def test_tilted_density():
    inst = quadratic_family(0.3, 0.0, 0.5, TAU, 0.5, -0.5)
    inst.density = lambda w, g: np.exp(0.5 * w[:, -1, 0] - 0.125)
    con = check_conclusion(inst, RngStream(100), G, 100_000)
    assert con.passed(4.0)


def test_density_must_be_positive():
    inst = quadratic_family(0.3)
    inst.density = lambda w, g: w[:, -1, 0]
    with pytest.raises(ValueError, match="positive"):
        check_conclusion(inst, RngStream(101), G, 100)


def test_invalid_s():
    with pytest.raises(ValueError):
        quadratic_family(0.3, s=1.5)


def test_bridge_family_runs():
    con = check_conclusion(quadratic_family(0.3, 0.0, 0.5, TAU, 0.5, -0.5), RngStream(102), G, 20_000,
                           model=M.BrownianBridge((0.0,)))
    assert con.passed(4.0)


def test_state_layout_shared():
    base = M.sample_base(M.Wiener(), RngStream(103), G, 1000)
    st_ = state_at(base.w_path, G.index_of(0.5))
    assert st_.shape == (1000, 2) and np.all(st_[:, 0] == 0.5)
