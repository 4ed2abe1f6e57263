from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from fmbsde.errors import DomainError
from fmbsde.fbm import PathSource, sample_paths
from fmbsde.forward import ForwardSpec
from fmbsde.kernel import Coefficient, TimeGrid, inner_product, inner_product_on_grid
from fmbsde.verify import (
    PolynomialFunctional,
    TestFunction,
    dh_derivative,
    duality_check,
    fbm_cross_term,
    fbm_norm_expectation,
    isometry_check,
    isometry_checks,
    ito_mean_check,
    ito_mean_rhs,
    malliavin_derivative,
    product_rule_check,
    product_rule_rhs,
    random_polynomial,
    random_step_coefficient,
    run_battery,
)

ONE = Coefficient.constant(1.0)
ZERO = Coefficient.constant(0.0)
GRID = TimeGrid.uniform(1.0, 16)


@pytest.fixture(scope="module")
def batch():
    return sample_paths(GRID, 0.75, 40_000, seed=10)


def test_derivative_of_linear_functional_is_deterministic():
    xi = Coefficient.from_callable(lambda s: 1 + s)
    d = malliavin_derivative(PolynomialFunctional.power(xi, 1))
    assert d.is_deterministic
    [(poly, val)] = malliavin_derivative(PolynomialFunctional.power(xi, 1), 0.5)
    assert val == 1.5 and poly.terms == {(0,): 1.0}


def test_derivative_chain_and_product_rules(batch):
    xi1 = Coefficient.from_callable(lambda s: 1 + s)
    xi2 = Coefficient.from_callable(np.cos)
    x1 = PolynomialFunctional.power(xi1, 1).evaluate(batch)
    x2 = PolynomialFunctional.power(xi2, 1).evaluate(batch)
    sq = malliavin_derivative(PolynomialFunctional.power(xi1, 2)).evaluate(batch, 0.3)
    assert np.allclose(sq, 2 * x1 * 1.3, atol=1e-12)
    prod = malliavin_derivative(PolynomialFunctional([xi1, xi2], {(1, 1): 1.0})).evaluate(batch, 0.3)
    assert np.allclose(prod, x2 * 1.3 + x1 * np.cos(0.3), atol=1e-12)
    assert not malliavin_derivative(PolynomialFunctional.power(xi1, 2)).is_deterministic


def test_dh_derivative_of_terminal_value(batch):
    t, h = 0.4, 0.75
    got = dh_derivative(PolynomialFunctional.power(ONE, 1), t, batch)
    assert np.allclose(got, h * (t ** 0.5 + 0.6 ** 0.5), rtol=1e-12)


def test_polynomial_functional_validation():
    with pytest.raises(DomainError):
        PolynomialFunctional([ONE], {(1, 1): 1.0})
    p = PolynomialFunctional([ONE, ONE], {(2, 1): 3.0})
    assert p.degree == 3 and p.partial(0).terms == {(1, 1): 6.0}
    assert (p + p.scaled(-1)).terms == {}


@pytest.mark.parametrize("k", [1, 2, 3])
def test_duality_powers_of_terminal_value(batch, k):
    r = duality_check(PolynomialFunctional.power(ONE, k), ONE, batch)
    assert r.passed(3.0)
    # the right side is 1, 2 B_T and 3 B_T^2 per path
    want, se = {1: (1.0, 0.0), 2: (0.0, 2.0), 3: (3.0, 3 * np.sqrt(2))}[k]
    assert abs(r.rhs - want) <= 4 * se / np.sqrt(batch.n_paths) + 1e-12


def test_duality_random_functionals(batch):
    rng = np.random.default_rng(2)
    for _ in range(3):
        ks = [random_step_coefficient(GRID, rng) for _ in range(2)]
        r = duality_check(random_polynomial(ks, rng), random_step_coefficient(GRID, rng), batch)
        assert r.passed(3.5)


def test_isometry_deterministic_integrands():
    src = PathSource(TimeGrid.uniform(1.0, 1024), 0.75, 20_000, seed=4)
    step = Coefficient.piecewise_constant([0, 0.3, 0.7, 1], [1.0, -0.5, 2.0])
    lin = Coefficient.from_callable(lambda t: t)
    res = isometry_checks([ONE, lin, step], src)
    assert res[0].rhs == pytest.approx(1.0, rel=1e-14)
    assert res[1].rhs == pytest.approx(inner_product(lin, lin, 1.0, 0.75), rel=1e-12)
    assert all(r.passed(3.0) for r in res)


def test_isometry_step_kernels_on_coarse_grid(batch):
    lin = Coefficient.from_callable(lambda t: t)
    r = isometry_check(lin, batch, kernels="step")
    assert r.passed(3.0)
    assert r.extra["norm_step"] < r.extra["norm_exact"]


def closed_cross(h, T=1.0):
    a = T ** (4 * h)
    return h * h * (a / (4 * h * h) + (2 * a / (4 * h)) * (1 / (2 * h) - special.beta(2 * h, 2 * h))
                    - 2 * a / ((4 * h - 1) * 4 * h))


@pytest.mark.parametrize("h", [0.6, 0.75, 0.9])
def test_fbm_branch_quadrature(h):
    cross, err = fbm_cross_term(h)
    assert cross == pytest.approx(closed_cross(h), abs=1e-9)
    assert fbm_norm_expectation(h) + cross == pytest.approx(0.5, abs=1e-6)


def test_fbm_branch_check(batch):
    r = isometry_check("B", batch)
    assert r.lhs == pytest.approx(0.5, rel=1e-14)
    assert abs(r.lhs - r.rhs) <= 1e-6
    assert r.passed(3.0)
    with pytest.raises(DomainError):
        isometry_check("B2", batch)


def test_ito_exact_moments():
    spec = ForwardSpec(0.0, ZERO, ONE, 0.75, GRID)
    t = GRID.points
    assert np.allclose(ito_mean_rhs(TestFunction.named("x2"), spec), t ** 1.5, atol=1e-12)
    assert np.allclose(ito_mean_rhs(TestFunction.named("x4"), spec), 3 * t ** 3, atol=1e-12)
    assert np.allclose(ito_mean_rhs(TestFunction.named("cos"), spec), np.exp(-0.5 * t ** 1.5), atol=1e-6)


def test_ito_with_drift_against_gaussian_law():
    spec = ForwardSpec(0.5, Coefficient.constant(1.0), Coefficient.constant(0.8), 0.7, GRID)
    mean, var = spec.marginals()
    assert np.allclose(ito_mean_rhs(TestFunction.named("x2"), spec), mean ** 2 + var, atol=1e-8)


@pytest.mark.parametrize("name", ["x2", "x4", "cos"])
def test_ito_mean_check(batch, name):
    spec = ForwardSpec(0.0, ZERO, ONE, 0.75, GRID)
    assert ito_mean_check(name, spec, batch).passed(3.0)


def test_test_function_limits():
    with pytest.raises(DomainError):
        TestFunction.polynomial([0] * 8 + [1])
    with pytest.raises(DomainError):
        TestFunction.named("sinh")


def test_product_rule_unit_case(batch):
    rhs = product_rule_rhs(ONE, ONE, ZERO, ZERO, GRID, 0.75)
    assert np.allclose(rhs, GRID.points ** 1.5, atol=1e-13)
    assert product_rule_check(ONE, ONE, ZERO, ZERO, batch).passed(3.0)


def test_product_rule_deterministic_factor(batch):
    r = product_rule_check(ONE, ZERO, ZERO, ONE, batch)
    assert np.allclose(r.rhs, 0.0) and r.passed(3.0)


def test_product_rule_exact_kernels_match_inner_product():
    lin = Coefficient.from_callable(lambda t: t)
    rhs = product_rule_rhs(ONE, lin, ZERO, ZERO, GRID, 0.75, kernels="exact")
    assert np.allclose(rhs, inner_product_on_grid(ONE, lin, GRID, 0.75), atol=1e-14)


def test_product_rule_random_pairs(batch):
    rng = np.random.default_rng(5)
    for _ in range(3):
        fs = [random_step_coefficient(GRID, rng) for _ in range(4)]
        assert product_rule_check(*fs, batch).passed(3.5)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), h=st.floats(0.55, 0.95))
def test_product_rule_rhs_bilinear(a, b, h):
    grid = TimeGrid.uniform(1.0, 8)
    f1 = Coefficient.piecewise_constant(grid.points, np.linspace(a, b, 8))
    f2 = Coefficient.piecewise_constant(grid.points, np.linspace(b, -a, 8))
    base = product_rule_rhs(f1, f2, ZERO, ZERO, grid, h)
    twice = product_rule_rhs(f1.scaled(2.0), f2, ZERO, ZERO, grid, h)
    swap = product_rule_rhs(f2, f1, ZERO, ZERO, grid, h)
    assert np.allclose(twice, 2 * base, atol=1e-12)
    assert np.allclose(swap, base, atol=1e-12)


def test_small_battery_runs():
    res = run_battery(hursts=(0.7,), n_paths=5000, n_steps=8, fine_steps=64)
    assert len(res) == 13
    assert all(r.max_abs_z <= 4.0 for r in res)
    assert all("hurst" in r.to_dict()["params"] for r in res)
