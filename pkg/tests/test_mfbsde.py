from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fmbsde.errors import ConfigurationError, NumericalError, PreconditionError
from fmbsde.fbm import sample_paths
from fmbsde.kernel import Coefficient
from fmbsde.mfbsde import (
    MfBsdeProblem,
    apriori_check,
    check_comparison_preconditions,
    compare_solutions,
    contraction_report,
    discrete_residual,
    monotone_iteration_solve,
    picard_constants,
    picard_solve,
    weighted_distance,
)
from fmbsde.pde import Driver, SpaceGrid, ValueSurface

from problems import E2, example_pair, forward, linear_mean_field, ordered_pair, random_lipschitz_problem


def ode_y0(rhs, T=1.0):
    """Backward scalar ODE ``Y' = -rhs(Y)``, ``Y(T) = 0``, solved forward in reversed time."""
    sol = solve_ivp(lambda s, y: rhs(y), (0, T), [0.0], rtol=1e-12, atol=1e-12)
    return float(sol.y[0, -1])


# -- weighted distance -------------------------------------------------------


def surfaces(sp, u1, u2):
    space = SpaceGrid(-5, 5, 101)
    shape = (len(sp.grid), space.n_x)
    sig = sp.sigma_values()
    return (ValueSurface(sp.grid, space, np.broadcast_to(u1, shape), sigma=sig),
            ValueSurface(sp.grid, space, np.broadcast_to(u2, shape), sigma=sig))


def test_distance_identical_is_zero():
    sp = forward(32)
    a, b = surfaces(sp, np.sin(np.linspace(-5, 5, 101)), np.sin(np.linspace(-5, 5, 101)))
    assert weighted_distance(a, b, sp, 3.0) == (0.0, 0.0)


def test_distance_constant_offset():
    sp = forward(32, T=2.0)
    a, b = surfaces(sp, 1.0, 0.0)
    dy, dz = weighted_distance(a, b, sp, 0.0)
    assert dy == pytest.approx(np.sqrt(2.0), rel=1e-12)
    assert dz == 0.0


def test_distance_z_weight():
    sp = forward(32)
    xs = np.linspace(-5, 5, 101)
    a, b = surfaces(sp, xs, 0.0)
    dy, dz = weighted_distance(a, b, sp, 0.0)
    assert dz == pytest.approx(np.sqrt(2 / 3), rel=1e-12)


def test_distance_normalization():
    sp = forward(32)
    a, b = surfaces(sp, 1.0, 0.0)
    raw = weighted_distance(a, b, sp, 2.0)
    norm = weighted_distance(a, b, sp, 2.0, normalize=True)
    assert norm[0] == pytest.approx(raw[0] * np.exp(-1.0), rel=1e-12)
    with pytest.raises(ConfigurationError):
        weighted_distance(a, surfaces(forward(16), 0.0, 0.0)[0], sp, 0.0)


# -- Picard ------------------------------------------------------------------


def test_driver_free_single_solve():
    sp = forward(64, b=1.0)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x))
    sol = picard_solve(p)
    assert sol.iterations == 1 and sol.distances == []
    assert sol.y0(0.0) == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(sol.w, 1.0, atol=1e-10)
    assert contraction_report(sol).ratios == []


def test_linear_mean_field_matches_ode():
    p = linear_mean_field(n_t=128, n_x=300)
    sol = picard_solve(p)
    assert sol.y0(1.0) == pytest.approx(np.e, rel=1e-3)
    assert sol.iterations <= 15
    assert contraction_report(sol).ok
    m, c, beta = picard_constants(p)
    assert (m, c) == (pytest.approx(4 / 3), 1.0)
    assert beta == pytest.approx(16 * 4 / 3 + 3, rel=1e-12)


def test_example_pair_matches_ode():
    lo, hi = example_pair(n_t=128, n_x=200)
    for p, sign in ((lo, -1.0), (hi, 1.0)):
        sol = picard_solve(p)
        want = ode_y0(lambda y: 2 * y + sign)
        assert abs(want) == pytest.approx(E2, rel=1e-10)
        assert sol.y0(0.0) == pytest.approx(want, rel=1e-3)
        assert np.max(np.abs(sol.w)) < 1e-6


def test_doubling_lipschitz_at_fixed_beta_slows_contraction():
    base = picard_solve(linear_mean_field(64, 200, 1.0))
    doubled = picard_solve(linear_mean_field(64, 200, 2.0), beta=base.beta_used)
    r1 = contraction_report(base).ratios
    r2 = contraction_report(doubled).ratios
    assert np.mean(r2[1:4]) > np.mean(r1[1:4])


def test_max_iter_error_reports_trace():
    with pytest.raises(NumericalError, match="distances"):
        picard_solve(linear_mean_field(32, 100), max_iter=2)


def test_non_contraction_detected():
    # a huge slope declared as 0 makes beta tiny and the map expansive on coarse grids
    p = linear_mean_field(16, 60, 40.0)
    p.lipschitz = 1e-9
    with pytest.warns(UserWarning), pytest.raises(NumericalError):
        picard_solve(p, max_iter=30)


def test_audit_flags_understated_lipschitz():
    p = linear_mean_field(16, 60, 3.0)
    p.lipschitz = 1.0
    with pytest.warns(UserWarning, match="Lipschitz"):
        try:
            picard_solve(p, max_iter=40)
        except NumericalError:
            pass


def test_audit_marks_z_driver_as_h2_only():
    lo, _ = example_pair(32, 100)
    audit = lo.lipschitz_audit()
    assert audit["h2_only"] and not audit["violations"]


# -- a priori ----------------------------------------------------------------


def test_apriori_zero_problem():
    sp = forward(32)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.constant(0.0))
    rep = apriori_check(p, picard_solve(p), beta=1.0)
    assert rep.ratio == 0.0 and not rep.inconsistent


def test_apriori_identity_terminal():
    sp = forward(64)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x))
    beta = 2.0
    rep = apriori_check(p, picard_solve(p), beta=beta)
    # Theta(0) = e^(bT) T^(2H), scaled by e^(-bT)
    assert rep.theta[0] == pytest.approx(1.0, rel=1e-10)
    # LHS(0) = int_0^1 e^(b(s-1)) s^(2H-1) ds since Y_0 = 0 and Z = 1
    from scipy.integrate import quad
    want = quad(lambda s: np.exp(beta * (s - 1)) * s ** 0.5, 0, 1)[0]
    assert rep.lhs[0] == pytest.approx(want, rel=1e-3)
    assert rep.finite


def test_apriori_example_driver():
    _, hi = example_pair(64, 150)
    rep = apriori_check(hi, picard_solve(hi))
    assert rep.finite and not rep.inconsistent


def test_apriori_flags_inconsistency():
    sp = forward(16)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.constant(0.0))
    sol = picard_solve(MfBsdeProblem(sp, Driver.zero(), Coefficient.constant(1.0), space=p.space))
    rep = apriori_check(p, sol, beta=1.0)
    assert rep.inconsistent and rep.ratio == np.inf


# -- residual ----------------------------------------------------------------


def test_residual_vanishes_for_affine_terminal():
    sp = forward(32)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x))
    rep = discrete_residual(p, picard_solve(p), sample_paths(sp.grid, 0.75, 500, seed=1))
    assert rep.total_rms < 1e-10


def test_residual_rejects_grid_mismatch():
    sp = forward(32)
    p = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x))
    with pytest.raises(ConfigurationError):
        discrete_residual(p, picard_solve(p), sample_paths(forward(16).grid, 0.75, 5))


def test_example_residual_mean_shrinks():
    means = []
    for n in (32, 64):
        lo, _ = example_pair(n, 150)
        rep = discrete_residual(lo, picard_solve(lo), sample_paths(lo.spec.grid, 0.75, 2000, seed=3))
        means.append(rep.max_abs_mean)
    assert means[1] < means[0] / 1.7


# -- comparison --------------------------------------------------------------


def test_compare_example_pair():
    lo, hi = example_pair(64, 150)
    res = compare_solutions(lo, hi, workers=2)
    assert res.verdict == "ordered"
    assert res.first.y0(0.0) == pytest.approx(-E2, rel=2e-3)
    assert res.second.y0(0.0) == pytest.approx(E2, rel=2e-3)
    d = res.to_dict(0.0)
    assert d["verdict"] == "ordered" and d["Y1_0"] < d["Y2_0"]


def test_compare_identical_problems():
    p = random_lipschitz_problem(np.random.default_rng(0), 32, 100)
    res = compare_solutions(p, p)
    assert res.max_violation <= 1e-12


def test_compare_shifted_terminal():
    sp = forward(32)
    space = SpaceGrid.auto(sp, 120)
    p1 = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x - 1), True, True, space)
    p2 = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x), 0.0, True, space)
    res = compare_solutions(p1, p2)
    assert np.allclose(res.second.u - res.first.u, 1.0, atol=1e-10)


def test_preconditions_report_witness():
    lo, hi = example_pair(16, 60)
    with pytest.raises(PreconditionError) as err:
        check_comparison_preconditions(hi, lo)
    assert err.value.witness["f1"] > err.value.witness["f2"]
    sp = forward(16)
    dec = MfBsdeProblem(sp, Driver(lambda t, x, yp, zp, y, z: -yp, 1.0, {"yp"}), Coefficient.constant(0.0),
                        monotone_in_yprime=True, space=lo.space)
    big = MfBsdeProblem(sp, Driver(lambda t, x, yp, zp, y, z: 100.0 + 0 * yp, 0.0, {"yp"}), Coefficient.constant(0.0),
                        space=lo.space)
    with pytest.raises(PreconditionError, match="increasing"):
        check_comparison_preconditions(dec, big)
    with pytest.raises(PreconditionError, match="flagged"):
        check_comparison_preconditions(MfBsdeProblem(sp, Driver.zero(), Coefficient.constant(0.0)), big)


@pytest.mark.parametrize("seed", range(3))
def test_random_pairs_ordered(seed):
    p1, p2 = ordered_pair(np.random.default_rng(seed), 48, 150)
    res = compare_solutions(p1, p2)
    dt = 1 / 48
    assert res.max_violation <= 10 * dt * p1.lipschitz


# -- monotone iteration ------------------------------------------------------


def test_monotone_iteration_from_upper_solution():
    lo, hi = example_pair(64, 150)
    upper = picard_solve(hi)
    sol, trace = monotone_iteration_solve(lo, upper)
    assert trace.non_increasing(1e-8)
    assert sol.y0(0.0) == pytest.approx(-E2, rel=2e-3)


def test_monotone_iteration_fixed_point_is_stationary():
    p = linear_mean_field(64, 200)
    fixed = picard_solve(p, tol=1e-12)
    sol, trace = monotone_iteration_solve(p, fixed)
    assert sol.iterations <= 2
    assert max(abs(v) for v in trace.increments) < 1e-8


def test_monotone_iteration_without_yprime():
    sp = forward(32)
    f = Driver(lambda t, x, yp, zp, y, z: -y, 1.0, {"y"})
    p = MfBsdeProblem(sp, f, Coefficient.from_callable(np.tanh), monotone_in_yprime=True)
    ref = picard_solve(p)
    start = ValueSurface.constant_in_time(Coefficient.constant(10.0), sp.grid, p.space, sigma=sp.sigma_values())
    sol, trace = monotone_iteration_solve(p, start)
    assert sol.iterations == 1
    assert np.allclose(sol.u, ref.u, atol=1e-12)


def test_monotone_iteration_detects_increase():
    lo, _ = example_pair(32, 100)
    below = ValueSurface.constant_in_time(Coefficient.constant(-50.0), lo.spec.grid, lo.space,
                                          sigma=lo.spec.sigma_values())
    with pytest.raises(NumericalError, match="increased"):
        monotone_iteration_solve(lo, below)
