import logging
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm
from scipy.stats import multivariate_normal

from synchvfp.dynamics import Ensemble
from synchvfp.model import GridSpec, ModelParams, gaussian_grid, grid_integral, grid_mass
from synchvfp.propagator import (det_sigma_closed_form, eval_B, eval_G, eval_Sigma,
                                 linear_step_grid, linear_step_particles, make_propagator,
                                 sigma_factor)


def drift_matrix(p):
    return np.array([[0.0, 1.0], [-p.alpha, -2 * p.nu]])


def van_loan_sigma(p, tau):
    """Covariance of ``dz = A z dt + sqrt(4 nu theta) dW_v`` via one matrix exponential.

    Evaluated with 40 digits: the block exponential grows like ``e^{2 nu tau}``
    and loses that many digits to cancellation in double precision.
    """
    with mpmath.workdps(40):
        a = [[0, 1], [-mpmath.mpf(p.alpha), -2 * mpmath.mpf(p.nu)]]
        m = mpmath.zeros(4, 4)
        for i in range(2):
            for j in range(2):
                m[i, j] = -a[i][j]
                m[i + 2, j + 2] = a[j][i]
        m[1, 3] = 4 * mpmath.mpf(p.nu) * mpmath.mpf(p.theta)
        e = mpmath.expm(m * mpmath.mpf(tau))
        s = e[2:4, 2:4].T * e[0:2, 2:4]
        return np.array(s.tolist(), dtype=float)


params_st = st.builds(ModelParams, alpha=st.floats(0.05, 5), nu=st.floats(0.05, 3),
                      theta=st.floats(0.1, 3))


def regime_params(rng):
    a = rng.uniform(0.1, 4)
    kind = rng.integers(3)
    nu = [0.5 * math.sqrt(a), math.sqrt(a), 2 * math.sqrt(a)][kind] * rng.uniform(0.7, 1.0)
    if kind == 1:
        nu = math.sqrt(a)
    return ModelParams(alpha=a, nu=nu, theta=rng.uniform(0.2, 2))


@settings(max_examples=100, deadline=None)
@given(params_st, st.floats(0, 6))
def test_B_matches_matrix_exponential(p, tau):
    assert np.allclose(eval_B(p, tau), expm(drift_matrix(p) * tau), rtol=1e-11, atol=1e-13)
    assert np.linalg.det(eval_B(p, tau)) == pytest.approx(math.exp(-2 * p.nu * tau), rel=1e-11)


def test_B_at_zero_and_critical():
    p = ModelParams(alpha=0.49, nu=0.7)
    assert np.array_equal(eval_B(p, 0.0), np.eye(2))
    tau, nu = 1.3, 0.7
    closed = math.exp(-nu * tau) * np.array([[1 + nu * tau, tau], [-nu * nu * tau, 1 - nu * tau]])
    assert np.allclose(eval_B(p, tau), closed, rtol=1e-13)
    # oracle: underdamped formula with omega = 1e-6
    near = ModelParams(alpha=nu * nu + 1e-12, nu=nu)
    assert np.allclose(eval_B(near, tau), closed, rtol=1e-9)


@settings(max_examples=60, deadline=None)
@given(params_st, st.floats(1e-3, 8))
def test_sigma_matches_van_loan(p, tau):
    ref = van_loan_sigma(p, tau)
    got = eval_Sigma(p, tau)
    assert np.allclose(got, ref, rtol=1e-11, atol=1e-13 * np.max(np.abs(ref)))
    assert got[0, 1] == got[1, 0]


def test_sigma_limits():
    p = ModelParams(alpha=2.0, nu=0.5, theta=0.7)
    assert not eval_Sigma(p, 0.0).any()
    big = eval_Sigma(p, 40 / p.nu)
    assert np.allclose(big, np.diag([p.theta / p.alpha, p.theta]), rtol=0, atol=1e-15)


def test_det_sigma_small_tau_taylor():
    # det Sigma = (4 theta^2 nu^2 / 3) tau^4 (1 - 2 nu tau) + O(tau^6); the tau^5 term
    # is the leading correction, so the bare tau^4 ratio is 1 - 2 nu tau, not 1
    p = ModelParams(alpha=1.3, nu=0.8, theta=0.9)
    tau = 1e-3
    lead = 4 * p.theta ** 2 * p.nu ** 2 / 3 * tau ** 4
    for det in (det_sigma_closed_form(p, tau), make_propagator(p, tau).det_sigma):
        assert det / lead == pytest.approx(1 - 2 * p.nu * tau, abs=1e-4)
    ref = van_loan_sigma(p, tau)
    ref_det = ref[0, 0] * ref[1, 1] - ref[0, 1] ** 2
    assert det_sigma_closed_form(p, tau) == pytest.approx(ref_det, rel=1e-6)


def test_acceptance_style_identities():
    rng = np.random.default_rng(20240)
    for _ in range(100):
        p = regime_params(rng)
        t1, t2 = rng.uniform(0.01, 3, size=2)
        b1, b2 = eval_B(p, t1), eval_B(p, t2)
        assert np.allclose(eval_B(p, t1 + t2), b2 @ b1, rtol=1e-11, atol=1e-14)
        s1, s2 = eval_Sigma(p, t1), eval_Sigma(p, t2)
        comp = b2 @ s1 @ b2.T + s2
        assert np.allclose(eval_Sigma(p, t1 + t2), comp, rtol=1e-11, atol=1e-14)
        prop = make_propagator(p, t1)
        assert prop.det_sigma == pytest.approx(det_sigma_closed_form(p, t1), rel=1e-11)


@settings(max_examples=50, deadline=None)
@given(params_st, st.floats(1e-3, 5))
def test_cholesky_factor(p, tau):
    s = eval_Sigma(p, tau)
    lo = sigma_factor(s)
    assert np.allclose(lo @ lo.T, s, rtol=0, atol=1e-14 * np.max(np.abs(s)))


def test_G_matches_scipy_pdf_and_is_positive():
    p = ModelParams(alpha=1.7, nu=0.4, theta=0.8)
    prop = make_propagator(p, 0.9)
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 4))
    for x, y, v, w in pts:
        mean = prop.b_matrix @ np.array([y, w])
        ref = multivariate_normal(mean, prop.sigma).pdf([x, v])
        assert eval_G(prop, x, y, v, w) == pytest.approx(ref, rel=1e-12)
    vals = eval_G(prop, *pts.T)
    assert np.all(vals > 0)


def test_G_long_time_limit():
    p = ModelParams(alpha=1.5, nu=0.5, theta=0.6)
    prop = make_propagator(p, 40 / p.nu)
    x, v = np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9))
    lim = math.sqrt(p.alpha) / (2 * math.pi * p.theta) * np.exp(
        -p.alpha * x ** 2 / (2 * p.theta) - v ** 2 / (2 * p.theta))
    assert np.max(np.abs(eval_G(prop, x, 0.0, v, 0.0) - lim)) < 1e-10


def test_G_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        make_propagator(ModelParams(), 0.0)


# --- grid action -----------------------------------------------------------

def test_stationary_gaussian_is_fixed():
    p = ModelParams(alpha=1.3, nu=0.6, theta=0.8, mass=1.7)
    spec = GridSpec.centered(p, 128, 128)
    g = gaussian_grid(spec, p)
    out = linear_step_grid(g, make_propagator(p, 0.37))
    assert np.max(np.abs(out.values - g.values)) < 1e-12
    assert grid_mass(out) == pytest.approx(grid_mass(g), rel=1e-9)


def _means(g):
    m = grid_mass(g)
    X, V = g.x[:, None], g.v[None, :]
    return np.array([grid_integral(g, X * g.values), grid_integral(g, V * g.values)]) / m


def test_linear_step_moments_follow_B_and_Sigma():
    p = ModelParams(alpha=1.0, nu=0.3, theta=1.0)
    spec = GridSpec.centered(p, 128, 128, box_x=10, box_v=10)
    g = gaussian_grid(spec, p, x0=0.8, v0=-0.5, var_x=0.6, var_v=1.4)
    prop = make_propagator(p, 0.5)
    out = linear_step_grid(g, prop)
    assert np.allclose(_means(out), prop.b_matrix @ np.array([0.8, -0.5]), rtol=0, atol=1e-7)
    m = grid_mass(out)
    X, V = out.x[:, None], out.v[None, :]
    mu = _means(out)
    cov = np.array([[grid_integral(out, (X - mu[0]) ** 2 * out.values),
                     grid_integral(out, (X - mu[0]) * (V - mu[1]) * out.values)],
                    [0, grid_integral(out, (V - mu[1]) ** 2 * out.values)]]) / m
    cov[1, 0] = cov[0, 1]
    expect = prop.b_matrix @ np.diag([0.6, 1.4]) @ prop.b_matrix.T + prop.sigma
    assert np.allclose(cov, expect, atol=1e-7)


def test_two_half_steps_equal_one_full_step():
    p = ModelParams(alpha=2.0, nu=0.2, theta=0.5)
    spec = GridSpec.centered(p, 128, 128)
    g = gaussian_grid(spec, p, x0=0.4, v0=0.3, var_x=0.3, var_v=0.6)
    half = make_propagator(p, 0.25)
    twice = linear_step_grid(linear_step_grid(g, half), half)
    once = linear_step_grid(g, make_propagator(p, 0.5))
    assert np.max(np.abs(twice.values - once.values)) < 1e-6


def test_padded_step_agrees():
    p = ModelParams()
    spec = GridSpec.centered(p, 64, 64)
    g = gaussian_grid(spec, p, x0=0.5, var_x=0.7)
    prop = make_propagator(p, 0.3)
    a = linear_step_grid(g, prop)
    b = linear_step_grid(g, prop, pad=True)
    assert np.max(np.abs(a.values - b.values)) < 1e-9


def test_boundary_warning(caplog):
    p = ModelParams()
    spec = GridSpec.centered(p, 64, 64, box_x=3, box_v=3)
    g = gaussian_grid(spec, p)
    with caplog.at_level(logging.WARNING):
        linear_step_grid(g, make_propagator(p, 0.1))
    assert "boundary mass" in caplog.text


# --- particles -------------------------------------------------------------

def test_particles_relax_to_equilibrium():
    p = ModelParams(alpha=2.0, nu=0.7, theta=0.5)
    n = 200_000
    ens = Ensemble(np.full(n, 1.0), np.full(n, -1.0), seed=1, weight=1 / n)
    prop = make_propagator(p, 0.5)
    rng = np.random.default_rng(11)
    for _ in range(60):
        ens = linear_step_particles(ens, prop, rng)
    tol = 5 / math.sqrt(n)
    assert np.var(ens.xs) == pytest.approx(p.theta / p.alpha, rel=tol)
    assert np.var(ens.vs) == pytest.approx(p.theta, rel=tol)


def test_particles_single_step_matches_transition():
    p = ModelParams(alpha=1.2, nu=0.9, theta=0.7)
    n = 400_000
    prop = make_propagator(p, 0.4)
    ens = Ensemble(np.full(n, 0.5), np.full(n, 0.2), seed=0, weight=1 / n)
    out = linear_step_particles(ens, prop, np.random.default_rng(5))
    z = np.stack([out.xs, out.vs])
    assert np.allclose(z.mean(axis=1), prop.b_matrix @ [0.5, 0.2], atol=5 * 0.6 / math.sqrt(n))
    assert np.allclose(np.cov(z), prop.sigma, rtol=5 * math.sqrt(2 / n), atol=1e-4)


def test_particles_noiseless_rotation_conserves_energy():
    # nu is required > 0; take it tiny and compare against the damping e^{-2 nu t}
    p = ModelParams(alpha=1.0, nu=1e-300)
    prop = make_propagator(p, 0.1)
    rng = np.random.default_rng(0)
    ens = Ensemble(rng.normal(size=100), rng.normal(size=100), seed=0, weight=0.01)
    e0 = ens.xs ** 2 + ens.vs ** 2
    for _ in range(10):
        nxt = linear_step_particles(ens, prop, noise=False)
        e1 = nxt.xs ** 2 + nxt.vs ** 2
        assert np.max(np.abs(e1 - e0) / e0) < 1e-12
        ens, e0 = nxt, e1


def test_particles_deterministic_given_rng():
    p = ModelParams()
    prop = make_propagator(p, 0.2)
    ens = Ensemble(np.zeros(1000), np.zeros(1000), seed=0, weight=1e-3)
    a = linear_step_particles(ens, prop, np.random.default_rng(9))
    b = linear_step_particles(ens, prop, np.random.default_rng(9))
    assert a.xs.tobytes() == b.xs.tobytes()
    with pytest.raises(ValueError):
        linear_step_particles(ens, prop, None)
