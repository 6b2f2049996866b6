import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import lambertw

from synchvfp.haissinski import (UNIQUENESS_CONSTANT, HaissinskiNotConverged, apply_T,
                                 contraction_bound, default_lattice, lambert_w,
                                 solve_haissinski, stability_constants, steady_state_2d,
                                 uniqueness_threshold)
from synchvfp.model import GridSpec, ModelParams, Profile1D, grid_mass, trapezoid_1d
from synchvfp.wakefield import analytic_even_kernel, free_space_kernel, tabulated_kernel

FS = free_space_kernel()


def gaussian_profile(p, lattice):
    vals = np.exp(-p.alpha * lattice.x ** 2 / (2 * p.theta))
    out = lattice.with_values(vals)
    return out.with_values(vals / trapezoid_1d(out))


def test_lambert_w():
    w = lambert_w(1.5)
    assert abs(w * math.exp(w) - 1.5) < 1e-14
    assert w == pytest.approx(lambertw(1.5).real, rel=1e-15)
    for z in (0.0, 0.1, 3.0, 50.0):
        assert lambert_w(z) == pytest.approx(lambertw(z).real, rel=1e-14, abs=1e-300)
    with pytest.raises(ValueError):
        lambert_w(-0.1)


def test_uniqueness_constant():
    assert round(UNIQUENESS_CONSTANT, 2) == 0.24
    assert UNIQUENESS_CONSTANT == pytest.approx(lambertw(1.5).real / 3, rel=1e-15)


def test_threshold_homogeneity():
    a = uniqueness_threshold(ModelParams(theta=0.7), FS)
    b = uniqueness_threshold(ModelParams(theta=1.4), FS)
    assert b == pytest.approx(2 * a, rel=1e-15)
    assert uniqueness_threshold(ModelParams(mass=2), FS) == pytest.approx(
        UNIQUENESS_CONSTANT / (2 * FS.k_inf_norm), rel=1e-15)


def test_apply_T_zero_current_is_gaussian():
    p = ModelParams(alpha=1.5, theta=0.8)
    lat = default_lattice(p, 257)
    rng = np.random.default_rng(0)
    out = apply_T(lat.with_values(rng.random(lat.n)), p, FS)
    assert np.max(np.abs(out.values - gaussian_profile(p, lat).values)) < 1e-14


def test_apply_T_constant_kernel():
    p = ModelParams(current=0.7)
    lat = default_lattice(p, 129)
    const = tabulated_kernel(Profile1D(-40, 40, np.full(11, 0.3)), Profile1D(-40, 40, np.zeros(11)))
    sig = apply_T(lat.with_values(np.exp(-(lat.x - 1) ** 2)), p, const)
    assert np.max(np.abs(sig.values - gaussian_profile(p, lat).values)) < 1e-13


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 2), st.integers(0, 2 ** 32 - 1))
def test_apply_T_normalised_and_parity(current, seed):
    p = ModelParams(current=current)
    lat = default_lattice(p, 101)
    half = np.random.default_rng(seed).random(51)
    sym = np.concatenate([half, half[-2::-1]])
    out = apply_T(lat.with_values(sym), p, analytic_even_kernel("lorentzian"))
    assert abs(trapezoid_1d(out) - 1) < 1e-14
    assert np.max(np.abs(out.values - out.values[::-1])) < 1e-14 * np.max(out.values)
    out_fs = apply_T(lat.with_values(sym), p, FS)
    assert abs(trapezoid_1d(out_fs) - 1) < 1e-14


def test_solve_zero_current():
    p = ModelParams()
    sol = solve_haissinski(p, FS)
    assert sol.iterations == 1
    assert np.max(np.abs(sol.sigma.values - gaussian_profile(p, sol.sigma).values)) < 1e-15


def test_solve_subthreshold_contraction_and_uniqueness():
    base = ModelParams()
    p = ModelParams(current=0.5 * uniqueness_threshold(base, FS))
    lat = GridSpec.centered(p, 256, 16).x_lattice()
    sol = solve_haissinski(p, FS, lat, tol=1e-10)
    # independent re-application of the map
    again = apply_T(sol.sigma, p, FS)
    assert lat.dx * np.sum(np.abs(again.values - sol.sigma.values)) < 1e-10
    assert sol.contraction_estimate <= contraction_bound(p, FS)
    assert abs(trapezoid_1d(sol.sigma) - 1) < 1e-10
    assert np.all(sol.sigma.values[1:-1] > 0)
    rng = np.random.default_rng(5)
    for _ in range(2):
        other = solve_haissinski(p, FS, lat, tol=1e-10, start=rng.random(lat.n) + 0.01)
        assert lat.dx * np.sum(np.abs(other.sigma.values - sol.sigma.values)) < 1e-9
    assert sol.centroid != 0  # sign is reported, not asserted


def test_gaussian_envelope_class():
    p = ModelParams(current=0.25)
    sol = solve_haissinski(p, FS)
    beta = 0.9 * p.alpha / p.theta
    weighted = sol.sigma.values * np.exp(beta * sol.sigma.x ** 2 / 2)
    assert np.all(np.isfinite(weighted))
    k = int(np.argmax(weighted))
    assert 0.1 * sol.sigma.n < k < 0.9 * sol.sigma.n


def test_not_converged_carries_residual():
    p = ModelParams(current=0.3)
    with pytest.raises(HaissinskiNotConverged) as err:
        solve_haissinski(p, FS, max_iter=1, tol=1e-14)
    assert err.value.residual > 0
    with pytest.raises(ValueError):
        solve_haissinski(p, FS, mixing=1.5)
    with pytest.raises(ValueError):
        solve_haissinski(p, FS, tol=0)


def test_above_threshold_damped_iteration_runs():
    # no claim about uniqueness here: only that the damped scheme is usable
    p = ModelParams(current=2 * uniqueness_threshold(ModelParams(), FS))
    sol = solve_haissinski(p, FS, max_iter=2000)
    assert sol.residual_l1 < 1e-10


def test_stability_constants_examples():
    c = stability_constants(ModelParams(nu=0.5), FS)
    assert c.lambda_m == 1.0
    p0 = ModelParams(alpha=1.7, theta=0.4)
    assert stability_constants(p0, FS).lambda_M == 1.7 / 0.4
    p = ModelParams(current=0.1)
    assert stability_constants(p, FS).C_inf == pytest.approx(2 + (0.1 * 8 / 9) ** 2, abs=1e-10)
    assert stability_constants(p, FS).C_inf == pytest.approx(2.00790, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0, 2),
       st.floats(0.1, 5))
def test_stability_constants_plugin(alpha, nu, theta, current, mass):
    p = ModelParams(alpha, nu, theta, current, mass)
    c = stability_constants(p, FS)
    k, dk = FS.k_inf_norm, FS.dk_inf_norm
    assert c.lambda_m == 2 * nu
    assert c.lambda_M == pytest.approx(alpha / theta * math.exp(-4 * current * mass / theta * k),
                                       rel=1e-14)
    assert c.C_M == pytest.approx(nu + 4 * theta ** 2 + 4 * alpha * theta
                                  + 2 * (current * mass * dk) ** 2, rel=1e-14)
    assert c.C_inf == pytest.approx(2 * alpha / theta + (current * mass / theta) ** 2 * dk ** 2,
                                    rel=1e-14)
    assert min(c.lambda_m, c.lambda_M, c.C_M, c.C_inf, c.I_thres) > 0


def test_steady_state_2d():
    p = ModelParams(current=0.1, mass=1.7, theta=0.8)
    spec = GridSpec.centered(p, 128, 96)
    sol = solve_haissinski(p, FS, spec.x_lattice())
    f = steady_state_2d(sol, spec)
    assert grid_mass(f) == pytest.approx(p.mass, rel=1e-8)
    mv = np.exp(-spec.v ** 2 / (2 * p.theta))
    ratio = f.values[40] / mv
    assert np.ptp(ratio) < 1e-12 * ratio.mean()
    # interpolated path on a different lattice
    coarse = GridSpec.centered(p, 100, 64)
    g = steady_state_2d(sol, coarse)
    assert grid_mass(g) == pytest.approx(p.mass, rel=1e-5)
    with pytest.raises(ValueError):
        steady_state_2d(sol, GridSpec.centered(p, 64, 64, box_x=12))
