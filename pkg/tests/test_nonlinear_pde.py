import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbm_localtime.nonlinear_pde import (INF, CFLError, ConvergenceError, ProfileF, VSolution,
                                         f2, f2_direct, fit_rate_exponent, shoot_F0, solve_F,
                                         v_point, v_point_value, v_two_point, w_factor,
                                         z_factor, z_tail_bound, z_tail_constant)

# reported reference values (collocation, cross-checked by shooting to 1.5e-12)
F0_REF = 1.3796872218546712
C1_REF = 1.1577706553381184


def test_profile_residual_and_reference(profile):
    assert profile.residual_norm <= 1e-6
    assert abs(profile.F0 - F0_REF) < 1e-9
    assert abs(profile.c1 - C1_REF) < 1e-9


def test_profile_matches_shooting_oracle(profile):
    assert abs(shoot_F0() - profile.F0) < 1e-5


def test_profile_invariants(profile):
    x = profile.grid
    F = profile.values
    assert np.all(F > 0)
    assert np.max(np.abs(F - F[::-1])) < 1e-8
    h = x[1] - x[0]
    assert abs(profile(h) - profile(-h)) / (2 * h) < 1e-6
    assert np.max(np.abs(profile.residual(x[1:-1]))) <= 1e-6


def test_profile_tail_constant(profile):
    x = profile.grid
    outer = np.abs(x) >= 0.75 * profile.L
    ratio = profile.values[outer] / (profile.c1 * np.abs(x[outer]) * np.exp(-x[outer] ** 2 / 2))
    assert np.all(np.abs(ratio - 1) <= 0.01)


def test_profile_rejects_small_domain():
    with pytest.raises(ValueError):
        solve_F(L=4.0)


def test_profile_csv_roundtrip(profile, tmp_path):
    path = tmp_path / "f.csv"
    profile.to_csv(path)
    back = ProfileF.from_csv(path, c1=profile.c1)
    x = np.linspace(-6, 6, 49)
    assert np.max(np.abs(back(x) - profile(x))) < 1e-8


def test_profile_mass_positive_and_finite(profile):
    from scipy.integrate import quad
    ref = quad(lambda x: float(profile(x)), -30, 30, limit=200)[0]
    assert abs(profile.mass() - ref) < 1e-8


def test_infinite_mass_solution_is_self_similar(profile):
    t = np.array([0.25, 1.0, 4.0])
    x = np.linspace(-3, 3, 13)
    sol = VSolution.from_profile(profile, t, x)
    for i, ti in enumerate(t):
        assert np.allclose(ti * sol.values[i], profile(x / math.sqrt(ti)), rtol=1e-14)
    sol.check_bounds()


def test_scaling_identity():
    # V^{2}_{1/4}(1/2) = 4 V^{1}_{1}(1), solved on meshes of different resolution
    lhs = v_point_value(0.25, 2.0, [0.5], kappa=16)[0]
    rhs = 4.0 * v_point_value(1.0, 1.0, [1.0], kappa=24)[0]
    assert abs(lhs - rhs) / rhs <= 1e-3


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 4.0), st.floats(0.3, 3.0), st.floats(-1.5, 1.5))
def test_scaling_identity_property(c, lam, x):
    lhs = v_point_value(c * c, lam, [c * x])[0]
    rhs = v_point_value(1.0, c * lam, [x], kappa=20)[0] / (c * c)
    assert abs(lhs - rhs) <= 2e-3 * rhs + 1e-12


def test_small_mass_linearisation():
    lam = 0.01
    x = np.linspace(-3, 3, 25)
    V = v_point_value(1.0, lam, x)
    p = np.exp(-x * x / 2) / math.sqrt(2 * math.pi)
    assert np.max(np.abs(V - lam * p)) <= 0.02 * lam * p[12]


def test_large_mass_rate_exponent(profile, model):
    slope, gaps = fit_rate_exponent(profile, (10, 20, 40, 80))
    assert np.all(np.diff(gaps) < 0)
    assert abs(slope - (1 - 2 * model.lambda0)) <= 0.1


def test_grid_convergence():
    a = v_point_value(1.0, 10.0, [0.0], kappa=16)[0]
    b = v_point_value(1.0, 10.0, [0.0], kappa=32)[0]
    assert abs(a - b) / b < 5e-4


def test_monotone_in_mass_and_bounded(profile):
    x = np.linspace(-5, 5, 81)
    t = np.array([0.1, 0.5, 1.0])
    prev = np.zeros((t.size, x.size))
    for lam in (0.5, 2.0, 8.0, 32.0):
        sol = v_point(1.0, lam, x, t)
        sol.check_bounds()
        assert np.all(sol.values >= prev - 1e-12)
        prev = sol.values
    inf = VSolution.from_profile(profile, t, x).values
    assert np.all(prev <= inf + 1e-6)


def test_tangent_matches_finite_difference():
    x = np.linspace(-3, 3, 13)
    sol = v_point(1.0, 5.0, x, tangent=True)
    h = 1e-3
    fd = (v_point_value(1.0, 5.0 + h, x) - v_point_value(1.0, 5.0 - h, x)) / (2 * h)
    assert np.max(np.abs(sol.dmass[-1] - fd)) < 1e-5


def test_point_rejects_bad_input():
    with pytest.raises(ValueError):
        v_point(1.0, 0.0, [0.0])
    with pytest.raises(ValueError):
        v_point(1.0, 1.0, [0.0], t_grid=[2.0])


def test_two_point_coincident_equals_summed_mass():
    y = np.linspace(-3, 3, 25)
    a = v_two_point(1.0, 2.0, 3.0, 0.4, 0.4, y).values[-1]
    b = v_point_value(1.0, 5.0, y - 0.4)
    assert np.max(np.abs(a - b)) < 1e-6


def test_two_point_subadditive():
    y = np.linspace(-4, 4, 33)
    two = v_two_point(1.0, 4.0, 6.0, 0.0, 1.5, y).values[-1]
    one = v_point_value(1.0, 4.0, y) + v_point_value(1.0, 6.0, y - 1.5)
    assert np.all(two <= one + 1e-10)
    assert np.all(two >= np.maximum(v_point_value(1.0, 4.0, y), v_point_value(1.0, 6.0, y - 1.5)) - 1e-10)


def test_two_point_rate_exponent(profile, model):
    y = np.linspace(-4, 5, 181)
    full = f2_direct(0.0, 1.0, profile, y)
    lams = np.array([10.0, 20.0, 40.0, 80.0])
    gaps = [np.max(full - v_two_point(1.0, lam, lam, 0.0, 1.0, y).values[-1]) for lam in lams]
    slope = np.polyfit(np.log(lams), np.log(gaps), 1)[0]
    assert abs(slope - (1 - 2 * model.lambda0)) <= 0.1


@pytest.mark.parametrize("x", [0.0, 1.0, 2.0])
def test_f2_diagonal(profile, model, x):
    assert abs(f2(x, x, profile, model.lambda0) - float(profile(x))) <= 1e-3


def test_f2_subadditive_and_far_limit(profile, model):
    v = f2(0.0, 1.0, profile, model.lambda0)
    assert v <= float(profile(0.0) + profile(1.0))
    assert v >= float(profile(0.0))
    far = f2(0.0, 8.0, profile, model.lambda0)
    assert abs(far - (float(profile(0.0)) + float(profile(8.0)))) <= 2e-3


def test_f2_routes_agree(profile, model):
    # Richardson ladder against two infinite-mass sources
    y = np.array([0.0, -0.5])
    lad = [f2(-yy, 1.0 - yy, profile, model.lambda0) for yy in y]
    direct = f2_direct(0.0, 1.0, profile, y)
    assert np.max(np.abs(np.array(lad) - direct)) < 2e-3


def test_f2_table(f2table, profile):
    a = np.linspace(-3, 3, 13)
    assert np.max(np.abs(f2table(a, a) - profile(a))) < 1e-3
    assert np.all(f2table(a, a + 0.7) <= profile(a) + profile(a + 0.7) + 1e-9)
    assert np.max(f2table.spread) < 1e-2


def test_z_factor_basic(ladder, profile, model):
    from sbm_localtime.spectral_ou import ImmortalDiffusion
    paths = ImmortalDiffusion(model).sample(np.zeros(100), 20.0, 0.01, 3)
    Z = z_factor(paths, 0.01, profile, ladder, cumulative=True)
    assert np.all(Z[:, 0] == 1.0)
    assert np.all(np.diff(Z, axis=1) >= 0)
    # tail control: log Z_20 - log Z_T is below the integrated rate bound from T
    K = z_tail_constant(ladder, profile, model.lambda0)
    logZ = np.log(Z)
    for T in (6.0, 10.0, 14.0):
        k = int(round(T / 0.01))
        assert np.all(logZ[:, -1] - logZ[:, k] <= z_tail_bound(T, K, model.lambda0))
    with pytest.raises(ValueError):
        z_factor(np.zeros(3001), 0.01, profile, ladder)


def test_w_factor_properties(f2table, profile, model):
    from sbm_localtime.spectral_ou import ImmortalDiffusion
    paths = ImmortalDiffusion(model).sample(np.full(200, 0.5), 20.0, 0.01, 5)
    W = w_factor(paths, 0.01, 0.5, profile, f2table, cumulative=True)
    # partner coincides with the path at u = 0
    assert np.all(W[:, 0] == 1.0)
    assert np.all((W > 0) & (W <= 1))
    assert np.all(np.diff(W, axis=1) <= 0)
    far = w_factor(paths, 0.01, 4.5, profile, f2table)
    assert np.all(np.abs(far - 1) <= 5e-3)
    # subadditivity F2(a, b) - F(a) <= F(b) bounds -log W by the partner's F integral
    u = 0.01 * np.arange(paths.shape[1])
    partner = paths + np.exp(u / 2) * (4.5 - paths[:, :1])
    bound = np.trapezoid(profile(partner), u, axis=1)
    assert np.all(-np.log(far) <= bound + 1e-4)


def test_inf_marker():
    assert INF == math.inf
    assert issubclass(CFLError, ValueError)
    assert issubclass(ConvergenceError, RuntimeError)
