import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wienervar import RngStream, TimeGrid, sample_brownian
from wienervar import functionals as F

G = TimeGrid(16)


def fd(f, w, eps=1e-6):
    out = np.zeros_like(w)
    for k in range(w.shape[1]):
        for j in range(w.shape[2]):
            e = np.zeros_like(w)
            e[:, k, j] = eps
            out[:, k, j] = (f.value(w + e, G) - f.value(w - e, G)) / (2 * eps)
    return out


@pytest.mark.parametrize("name", sorted(F.REGISTRY))
def test_registry_gradients_match_fd(name):
    f = F.REGISTRY[name]()
    w = sample_brownian(RngStream(111), G, 2, 20).values
    np.testing.assert_allclose(f.grad(w, G), fd(f, w), atol=1e-6)
    assert f.value(w, G).shape == (20,)


def test_examples():
    w = np.zeros((1, G.n_steps + 1, 1))
    w[0, :, 0] = np.linspace(0, 1, G.n_steps + 1)
    assert F.linear_terminal(2.0).value(w, G)[0] == 2.0
    assert F.square_terminal(1.0, 0.5).value(w, G)[0] == 0.25
    # left-point sum of t^2
    t = G.times[:-1]
    assert F.integral_square(1.0).value(w, G)[0] == pytest.approx(np.sum(t ** 2) * G.dt)
    assert F.cos_terminal(1.0, np.pi).value(w, G)[0] == pytest.approx(-1.0)
    assert F.constant(3.0)(w, G)[0] == 3.0


def test_build_and_operators():
    spec = [{"name": "linear_terminal", "lam": 0.5}, {"name": "square_terminal", "q": 2.0}]
    f = F.build(spec)
    g = F.linear_terminal(0.5) + 2.0 * F.square_terminal(1.0)
    w = sample_brownian(RngStream(112), G, 1, 50).values
    np.testing.assert_allclose(f.value(w, G), g.value(w, G), rtol=1e-12)
    np.testing.assert_allclose(f.grad(w, G), g.grad(w, G), rtol=1e-12)
    assert isinstance(F.build({"name": "constant", "c": 1.0}), F.Constant)
    with pytest.raises(KeyError):
        F.build({"name": "mystery"})


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(a, b):
    w = sample_brownian(RngStream(113), G, 1, 10).values
    f, g = F.cos_terminal(1.0, 2.0), F.integral_square(0.7)
    h = a * f + b * g
    np.testing.assert_allclose(h.value(w, G), a * f.value(w, G) + b * g.value(w, G), atol=1e-12)
    np.testing.assert_allclose(h.grad(w, G), a * f.grad(w, G) + b * g.grad(w, G), atol=1e-12)


def test_integrability_proxies():
    gen = np.random.default_rng(114)
    x = gen.normal(size=200_000)
    r = F.integrability(x, p=2, q=1)
    assert r["finite"] and r["moment_p"] == pytest.approx(1.0, rel=0.02)
    assert r["exp_moment_q"] == pytest.approx(np.exp(0.5), rel=0.02)
    heavy = F.integrability(gen.standard_t(3, size=200_000), p=2, q=0.0)
    assert heavy["finite"] and heavy["drift"] > r["drift"]
    blown = F.integrability(-gen.standard_cauchy(size=200_000), p=2, q=1)
    assert not blown["finite"] and blown["drift"] == np.inf
