"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import numpy as np
import pytest

from acceptance_log import criterion
from problems import E2, example_pair, forward, linear_mean_field, ordered_pair, random_lipschitz_problem

from fmbsde.fbm import PathSource, covariance_matrix, sample_paths
from fmbsde.forward import ForwardSpec
from fmbsde.kernel import Coefficient, TimeGrid, cell_mass, norm_sq, sigma_hat
from fmbsde.mfbsde import (
    MfBsdeProblem,
    apriori_check,
    compare_solutions,
    contraction_report,
    discrete_residual,
    monotone_iteration_solve,
    picard_solve,
)
from fmbsde.pde import Driver, SpaceGrid, gaussian_smoothing_oracle, solve_backward_pde
from fmbsde.verify import (
    isometry_check,
    isometry_checks,
    ito_mean_check,
    ito_mean_rhs,
    TestFunction,
    product_rule_check,
    product_rule_rhs,
    random_step_coefficient,
)

HURSTS = (0.6, 0.75, 0.9)
ONE = Coefficient.constant(1.0)
ZERO = Coefficient.constant(0.0)

pytestmark = pytest.mark.acceptance


def test_criterion_01_kernel_closed_forms():
    with criterion(1, "kernel closed forms exact to 1e-12 over 100 random (t, H, c)", budget=1.0) as info:
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            t, h, c = rng.uniform(0.01, 3.0), rng.uniform(0.51, 0.99), rng.uniform(-5, 5)
            want = t ** (2 * h)
            worst = max(worst, abs(norm_sq(ONE, t, h) - want) / max(1.0, want))
            cut = rng.uniform(0, t)
            split = sum(cell_mass(a, b, p, q, h) for a, b in ((0, cut), (cut, t)) for p, q in ((0, cut), (cut, t)))
            worst = max(worst, abs(split - want) / max(1.0, want))
            sh = c * h * t ** (2 * h - 1)
            worst = max(worst, abs(sigma_hat(Coefficient.constant(c), t, h) - sh) / max(1.0, abs(sh)))
        info["max_rel_err"] = f"{worst:.2e}"
        assert worst <= 1e-12


def test_criterion_02_fbm_sample_covariance():
    with criterion(2, "fBm sample covariance within 4 SE, N=5e4, 16-point grid", budget=30.0) as info:
        grid = TimeGrid.uniform(1.0, 16)
        worst = 0.0
        for j, h in enumerate(HURSTS):
            x = sample_paths(grid, h, 50_000, seed=200 + j).paths[:, 1:]
            n = x.shape[0]
            prod = x[:, :, None] * x[:, None, :]
            emp = prod.mean(axis=0)
            se = prod.std(axis=0, ddof=1) / np.sqrt(n)
            z = np.abs(emp - covariance_matrix(grid, h)) / se
            worst = max(worst, float(z.max()))
        info["max_z"] = f"{worst:.2f}"
        assert worst <= 4.0


def test_criterion_03_isometry():
    with criterion(3, "isometry: F in {1, t, step} within 3 SE; F = B within 1e-6 + 3 SE", budget=60.0) as info:
        lin = Coefficient.from_callable(lambda t: t)
        step = Coefficient.piecewise_constant([0, 0.3, 0.7, 1.0], [1.0, -0.5, 2.0])
        zmax, gap = 0.0, 0.0
        for j, h in enumerate(HURSTS):
            fine = PathSource(TimeGrid.uniform(1.0, 1024), h, 100_000, seed=300 + j)
            for r in isometry_checks([ONE, lin, step], fine):
                zmax = max(zmax, r.max_abs_z)
            rb = isometry_check("B", sample_paths(TimeGrid.uniform(1.0, 16), h, 100_000, seed=310 + j))
            gap = max(gap, abs(rb.lhs - rb.rhs))
            zmax = max(zmax, rb.max_abs_z)
        info["max_z"] = f"{zmax:.2f}"
        info["B_quadrature_gap"] = f"{gap:.1e}"
        assert gap <= 1e-6
        assert zmax <= 3.0


def test_criterion_04_ito_mean():
    with criterion(4, "Ito mean check for x^2, x^4, cos x: |z| <= 3 at every grid time", budget=60.0) as info:
        grid = TimeGrid.uniform(1.0, 16)
        t = grid.points
        zmax, exact = 0.0, 0.0
        for j, h in enumerate(HURSTS):
            spec = ForwardSpec(0.0, ZERO, ONE, h, grid)
            batch = sample_paths(grid, h, 100_000, seed=400 + j)
            for name in ("x2", "x4", "cos"):
                zmax = max(zmax, ito_mean_check(name, spec, batch).max_abs_z)
            exact = max(exact, np.max(np.abs(ito_mean_rhs(TestFunction.named("x2"), spec) - t ** (2 * h))))
            exact = max(exact, np.max(np.abs(ito_mean_rhs(TestFunction.named("x4"), spec) - 3 * t ** (4 * h))))
        info["max_z"] = f"{zmax:.2f}"
        info["moment_identity_err"] = f"{exact:.1e}"
        assert exact <= 1e-12
        assert zmax <= 3.0


def test_criterion_05_product_rule():
    with criterion(5, "product rule: unit case and random pairs within 3 SE", budget=60.0) as info:
        grid = TimeGrid.uniform(1.0, 16)
        zmax, unit_err = 0.0, 0.0
        for j, h in enumerate(HURSTS):
            batch = sample_paths(grid, h, 100_000, seed=500 + j)
            unit_err = max(unit_err, np.max(np.abs(product_rule_rhs(ONE, ONE, ZERO, ZERO, grid, h) - grid.points ** (2 * h))))
            zmax = max(zmax, product_rule_check(ONE, ONE, ZERO, ZERO, batch).max_abs_z)
            rng = np.random.default_rng([5, j])
            for _ in range(3):
                fs = [random_step_coefficient(grid, rng) for _ in range(4)]
                zmax = max(zmax, product_rule_check(*fs, batch).max_abs_z)
        info["max_z"] = f"{zmax:.2f}"
        info["unit_rhs_err"] = f"{unit_err:.1e}"
        assert unit_err <= 1e-12
        assert zmax <= 3.0


def test_criterion_06_pde_solver():
    with criterion(6, "PDE with f = 0: affine exact, x^2 to rel 1e-3, cos error falls >= 3x", budget=60.0) as info:
        # g = x with b = 1
        sp = forward(256, b=1.0)
        s = solve_backward_pde(sp, Coefficient.from_callable(lambda x: x))
        affine = np.max(np.abs(s.v - (s.space.points[None, :] + 1 - sp.grid.points[:, None])))
        # g = x^2 against x^2 + T^2H - t^2H on the region holding the law of eta
        sp = forward(256)
        s = solve_backward_pde(sp, Coefficient.from_callable(lambda x: x ** 2), space=SpaceGrid.auto(sp, 400))
        xs, t = s.space.points, sp.grid.points
        exact = xs[None, :] ** 2 + 1.0 - t[:, None] ** 1.5
        core = np.abs(xs) <= 4.0
        rel = float(np.max(np.abs(s.v[:, core] - exact[:, core]) / exact[:, core]))
        # g = cos x: error under (dt, dx) halving
        errs = []
        for n_t, n_x in ((64, 100), (128, 199)):
            sp = forward(n_t)
            s = solve_backward_pde(sp, Coefficient.from_callable(np.cos), space=SpaceGrid(-6, 6, n_x))
            xs = s.space.points
            mask = np.abs(xs) <= 2
            errs.append(np.max(np.abs(s.v[0, mask] - gaussian_smoothing_oracle(np.cos, sp, 0, xs[mask]))))
        info["affine_err"] = f"{affine:.1e}"
        info["x2_rel_err(|x|<=4sd)"] = f"{rel:.1e}"
        info["cos_ratio"] = f"{errs[0] / errs[1]:.2f}"
        assert affine <= 1e-6
        assert rel <= 1e-3
        assert errs[0] / errs[1] >= 3.0


_SOLVED = {}


def solved(key):
    if key not in _SOLVED:
        if key == "c7":
            p = linear_mean_field()
            _SOLVED[key] = (p, picard_solve(p))
        else:
            lo, hi = example_pair()
            _SOLVED["c8"] = ((lo, hi), (picard_solve(lo), picard_solve(hi)))
    return _SOLVED[key]


def test_criterion_07_mean_field_fixed_point():
    with criterion(7, "f = E[Y], g = x, eta0 = 1: |Y0 - e| <= 1e-3 e in <= 15 iterations", budget=120.0) as info:
        p, sol = solved("c7")
        y0 = sol.y0(1.0)
        info["Y0"] = f"{y0:.8f}"
        info["rel_err"] = f"{abs(y0 - np.e) / np.e:.1e}"
        info["iterations"] = sol.iterations
        assert abs(y0 - np.e) <= 1e-3 * np.e
        assert sol.iterations <= 15


def test_criterion_08_example_pair():
    with criterion(8, "drivers y + E[y] + z -/+ 1: Y0 = -/+ (e^2 - 1)/2, Z = 0, ordered", budget=120.0) as info:
        _, (s1, s2) = solved("c8")
        y1, y2 = s1.y0(0.0), s2.y0(0.0)
        zmax = max(np.max(np.abs(s1.w)), np.max(np.abs(s2.w)))
        gap = float(np.max(s1.u - s2.u))
        info["Y1_0"] = f"{y1:.7f}"
        info["Y2_0"] = f"{y2:.7f}"
        info["max|Z|"] = f"{zmax:.1e}"
        info["max(u1-u2)"] = f"{gap:.1e}"
        assert abs(y1 + E2) <= 1e-3 * E2
        assert abs(y2 - E2) <= 1e-3 * E2
        assert zmax <= 1e-6
        assert gap <= 1e-8


def test_criterion_09_contraction():
    with criterion(9, "contraction ratios r_k <= 0.6 for k >= 2 on criteria 7 and 8") as info:
        _, c7 = solved("c7")
        _, (s1, s2) = solved("c8")
        worst = 0.0
        for sol in (c7, s1, s2):
            rep = contraction_report(sol, 0.6)
            worst = max([worst] + rep.ratios[1:])
            assert rep.ok, rep.flagged
        info["max_ratio"] = f"{worst:.3f}"
        info["beta"] = f"{c7.beta_used:.2f}"


def test_criterion_10_apriori():
    with criterion(10, "a priori estimate finite on 20 random Lipschitz problems") as info:
        rng = np.random.default_rng(10)
        ratios = []
        for _ in range(20):
            p = random_lipschitz_problem(rng, 64, 200)
            rep = apriori_check(p, picard_solve(p))
            assert rep.finite and not rep.inconsistent
            assert np.all(rep.lhs <= rep.ratio * rep.theta * (1 + 1e-12) + 1e-300)
            ratios.append(rep.ratio)
        info["max_ratio"] = f"{max(ratios):.3g}"


def test_criterion_11_comparison_suite():
    with criterion(11, "20 ordered pairs: max(u1 - u2) <= 10 dt C; monotone traces non-increasing") as info:
        rng = np.random.default_rng(11)
        n_t = 128
        dt = 1.0 / n_t
        worst_gap, worst_inc = -np.inf, -np.inf
        for _ in range(20):
            p1, p2 = ordered_pair(rng, n_t, 250)
            bound = 10 * dt * p1.lipschitz
            res = compare_solutions(p1, p2, tol=bound)
            _, trace = monotone_iteration_solve(p1, res.second, mono_tol=bound)
            worst_gap = max(worst_gap, res.max_violation / bound)
            worst_inc = max(worst_inc, max(trace.increments) / bound)
            assert res.max_violation <= bound
            assert trace.non_increasing(bound)
        info["max_gap/bound"] = f"{worst_gap:.2e}"
        info["max_increment/bound"] = f"{worst_inc:.2e}"


def test_criterion_12_residual_refinement():
    with criterion(12, "residual RMS falls by >= 1.7 when dt halves (x^2 with f = 0, and the example pair)") as info:
        def rms(n_t, which):
            sp = forward(n_t)
            if which == "x2":
                p = MfBsdeProblem(sp, Driver.zero(), Coefficient.from_callable(lambda x: x ** 2))
            else:
                p = example_pair(n_t, 400)[0 if which == "minus" else 1]
            batch = sample_paths(p.spec.grid, 0.75, 4000, seed=12)
            return discrete_residual(p, picard_solve(p), batch).total_rms

        for which in ("x2", "minus", "plus"):
            coarse, fine = rms(64, which), rms(128, which)
            info[which] = f"{coarse / fine:.2f}"
            assert coarse / fine >= 1.7
