"""Monte Carlo and quadrature checks of the fractional stochastic-calculus identities.

Every check returns a :class:`CheckResult` with the two sides, a standard
error and a z-score.  Stochastic integrals with random integrands enter only
through closed forms; nothing here approximates them by Riemann sums.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError, DomainError
from .fbm import FbmPathBatch, PathSource, batch_wiener_integrals, sample_paths
from .forward import ForwardSpec, simulate_eta
from .kernel import (
    Coefficient,
    Hurst,
    TimeGrid,
    inner_product,
    inner_product_on_grid,
    kernel_accumulator,
    norm_sq,
    phi_transform,
)
from .pde import gauss_hermite


@dataclass
class CheckResult:
    name: str
    params: dict
    lhs: float | list
    rhs: float | list
    se: float | list
    z: float | list
    extra: dict = field(default_factory=dict)

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(np.atleast_1d(self.z))))

    def passed(self, bound: float = 3.0) -> bool:
        return self.max_abs_z <= bound

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return [float(a) for a in v]
            if isinstance(v, (np.floating, np.integer)):
                return float(v)
            if isinstance(v, dict):
                return {k: clean(a) for k, a in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(a) for a in v]
            return v

        return clean(asdict(self))


def _z(diff_mean, se):
    diff_mean = np.asarray(diff_mean, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff_mean / np.where(se > 0, se, 1.0), np.where(np.abs(diff_mean) < 1e-12, 0.0, np.inf))
    return float(z) if z.ndim == 0 else z


# ---------------------------------------------------------------------------
# polynomial functionals


@dataclass
class PolynomialFunctional:
    """``h(int xi_1 dB, ..., int xi_n dB)`` for a polynomial ``h``.

    ``terms`` maps exponent tuples to coefficients, e.g. ``{(2,): 1.0}`` is
    ``(int xi_1 dB)^2`` and ``{(1, 1): 1.0}`` the product of two integrals.
    """

    kernels: list
    terms: dict

    def __post_init__(self):
        n = len(self.kernels)
        clean = {}
        for e, c in self.terms.items():
            e = tuple(int(v) for v in e)
            if len(e) != n or min(e, default=0) < 0:
                raise DomainError(f"exponent {e} does not match {n} kernels")
            if c != 0:
                clean[e] = clean.get(e, 0.0) + float(c)
        self.terms = clean

    @classmethod
    def power(cls, xi: Coefficient, k: int, coef: float = 1.0) -> "PolynomialFunctional":
        return cls([xi], {(k,): coef})

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def evaluate_at(self, x: np.ndarray) -> np.ndarray:
        """``h`` at per-path values ``x`` of shape ``(N, n)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for e, c in self.terms.items():
            out += c * np.prod(x ** np.asarray(e)[None, :], axis=1)
        return out

    def integrals(self, batch) -> np.ndarray:
        return batch_wiener_integrals(batch, self.kernels)

    def evaluate(self, batch) -> np.ndarray:
        return self.evaluate_at(self.integrals(batch))

    def partial(self, i: int) -> "PolynomialFunctional":
        """``d h / d x_i`` as a functional over the same kernels."""
        out = {}
        for e, c in self.terms.items():
            if e[i] > 0:
                f = list(e)
                f[i] -= 1
                out[tuple(f)] = out.get(tuple(f), 0.0) + c * e[i]
        return PolynomialFunctional(self.kernels, out)

    def __add__(self, other: "PolynomialFunctional") -> "PolynomialFunctional":
        if other.kernels is not self.kernels and other.kernels != self.kernels:
            raise ConfigurationError("functionals must share their kernels")
        terms = dict(self.terms)
        for e, c in other.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return PolynomialFunctional(self.kernels, terms)

    def scaled(self, c: float) -> "PolynomialFunctional":
        return PolynomialFunctional(self.kernels, {e: c * v for e, v in self.terms.items()})


@dataclass
class DerivativeExpression:
    """``D_s Phi = sum_i (d_i h)(X) xi_i(s)`` kept in factored form."""

    terms: list  # [(PolynomialFunctional, Coefficient)]

    def evaluate(self, batch, s) -> np.ndarray:
        """Per-path values, shape ``(N,)`` for scalar ``s`` or ``(N, len(s))``."""
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        total = 0.0
        for poly, xi in self.terms:
            total = total + poly.evaluate(batch)[:, None] * np.asarray(xi(s_arr))[None, :]
        total = np.broadcast_to(total, (batch.n_paths, s_arr.size))
        return total[:, 0] if np.ndim(s) == 0 else total

    @property
    def is_deterministic(self) -> bool:
        return all(poly.degree == 0 for poly, _ in self.terms)


def malliavin_derivative(phi: PolynomialFunctional, s=None):
    """Chain rule ``D_s Phi = sum_i d_i h(int xi dB) xi_i(s)``.

    Without ``s`` the factored expression is returned; with ``s`` the
    list of ``(polynomial factor, xi_i(s))`` pairs.
    """
    expr = DerivativeExpression([(phi.partial(i), xi) for i, xi in enumerate(phi.kernels) if phi.partial(i).terms])
    if s is None:
        return expr
    if s < 0:
        raise DomainError("s must be >= 0")
    return [(poly, float(xi(s))) for poly, xi in expr.terms]


def dh_derivative(phi: PolynomialFunctional, t: float, batch, horizon: float | None = None) -> np.ndarray:
    """Per-path ``int_0^T phi(t - s) D_s Phi ds``.

    The path factors ``d_i h`` are carried through and the deterministic
    ``s``-dependence is integrated in closed form.
    """
    T = batch.grid.horizon if horizon is None else float(horizon)
    h = batch.hurst
    out = np.zeros(batch.n_paths)
    for poly, xi in malliavin_derivative(phi).terms:
        out += poly.evaluate(batch) * phi_transform(xi, t, T, h, batch.grid)
    return out


# ---------------------------------------------------------------------------
# duality and isometry


def _mc(samples):
    samples = np.asarray(samples, dtype=float)
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))


def duality_check(phi: PolynomialFunctional, u: Coefficient, batch, kernels: str = "step") -> CheckResult:
    """``E[Phi delta(u)]`` against ``E[<D Phi, u>_T]`` for deterministic ``u``.

    With ``kernels="step"`` (default) the inner products use the left-point
    step versions of every kernel on the batch grid, which are exactly what
    the sampled sums integrate, so the identity holds with no bias.
    ``kernels="exact"`` uses the continuous coefficients instead.
    """
    grid = batch.grid
    h = batch.hurst
    T = grid.horizon
    cols = batch_wiener_integrals(batch, list(phi.kernels) + [u])
    x, du = cols[:, :-1], cols[:, -1]
    lhs = phi.evaluate_at(x) * du
    rhs = np.zeros(batch.n_paths)
    for i, xi in enumerate(phi.kernels):
        dpoly = phi.partial(i)
        if not dpoly.terms:
            continue
        if kernels == "step":
            acc = kernel_accumulator(grid, h)
            ip = acc.inner(xi(grid.points[:-1]), u(grid.points[:-1]))
        elif kernels == "exact":
            ip = inner_product(xi, u, T, h, grid)
        else:
            raise DomainError(f"unknown kernels mode {kernels!r}")
        rhs += dpoly.evaluate_at(x) * ip
    lm, _ = _mc(lhs)
    rm, _ = _mc(rhs)
    dm, dse = _mc(lhs - rhs)
    return CheckResult("duality", {"hurst": h, "T": T, "n_paths": batch.n_paths, "degree": phi.degree, "kernels": kernels},
                       lm, rm, dse, _z(dm, dse))


def fbm_norm_expectation(h, T: float = 1.0) -> float:
    """``E ||B||_T^2 = int int phi(u - v) E[B_u B_v] du dv`` in closed form."""
    h = Hurst(h)
    a = T ** (4 * h)
    return h * (a / (4 * h) + special.beta(2 * h + 1, 2 * h) * a) - (2 * h - 1) * a / (4 * (4 * h - 1))


def dh_of_fbm(s, t, h):
    """``D-tilde_s B_t = int_0^t phi(s - r) dr = H (s^(2H-1) + sgn(t - s)|t - s|^(2H-1))``."""
    h = Hurst(h)
    d = t - s
    return h * (s ** (2 * h - 1) + np.sign(d) * np.abs(d) ** (2 * h - 1))


def fbm_cross_term(h, T: float = 1.0, epsabs: float = 1e-12) -> tuple[float, float]:
    """``int int D_s B_t D_t B_s ds dt`` by adaptive quadrature on the two triangles."""
    h = Hurst(h)

    def f(s, t):
        return dh_of_fbm(s, t, h) * dh_of_fbm(t, s, h)

    lower, e1 = integrate.dblquad(f, 0.0, T, 0.0, lambda t: t, epsabs=epsabs, epsrel=1e-12)
    upper, e2 = integrate.dblquad(f, 0.0, T, lambda t: t, T, epsabs=epsabs, epsrel=1e-12)
    return lower + upper, e1 + e2


def isometry_check(F, batch, kernels: str = "exact") -> CheckResult:
    """Second moment of ``int F dB`` against its norm.

    Deterministic ``F``: the MC second moment of the sampled sums against
    ``||F||_T^2`` (``kernels="exact"``) or against the exact variance of
    the left-point sums (``kernels="step"``).

    ``F = "B"``: the closed form ``delta(B) = (B_T^2 - T^(2H)) / 2`` gives
    the left side ``T^(4H) / 2``; the right side is ``E||B||^2`` plus the
    cross term by 2-D quadrature.  The MC second moment of the closed form
    is reported as well.
    """
    grid = batch.grid
    h = batch.hurst
    T = grid.horizon
    if isinstance(F, str):
        if F != "B":
            raise DomainError("the only stochastic integrand supported is F = 'B'")
        lhs_exact = 0.5 * T ** (4 * h)
        norm = fbm_norm_expectation(h, T)
        cross, qerr = fbm_cross_term(h, T)
        rhs = norm + cross
        bt = batch_wiener_integrals(batch, [Coefficient.constant(1.0)])[:, 0]
        delta = 0.5 * (bt ** 2 - T ** (2 * h))
        m, se = _mc(delta ** 2)
        return CheckResult("isometry_B", {"hurst": h, "T": T, "n_paths": batch.n_paths}, lhs_exact, rhs, se,
                           _z(m - rhs, se),
                           {"lhs_mc": m, "quadrature_gap": abs(lhs_exact - rhs), "quadrature_error": qerr,
                            "norm_term": norm, "cross_term": cross})
    return isometry_checks([F], batch, kernels)[0]


def isometry_checks(Fs, batch, kernels: str = "exact") -> list[CheckResult]:
    """:func:`isometry_check` for several deterministic ``F`` sharing one pass over the paths."""
    for F in Fs:
        if not isinstance(F, Coefficient):
            raise DomainError("F must be a Coefficient or 'B'")
    grid = batch.grid
    h = batch.hurst
    T = grid.horizon
    cols = batch_wiener_integrals(batch, list(Fs))
    out = []
    for F, x in zip(Fs, cols.T):
        m, se = _mc(x ** 2)
        exact = norm_sq(F, T, h)
        step = kernel_accumulator(grid, h).inner(F(grid.points[:-1]))
        rhs = exact if kernels == "exact" else step
        out.append(CheckResult("isometry", {"hurst": h, "T": T, "n_paths": batch.n_paths, "kernels": kernels,
                                            "F": repr(F)},
                               m, rhs, se, _z(m - rhs, se),
                               {"norm_exact": exact, "norm_step": step, "mean": float(x.mean())}))
    return out


# ---------------------------------------------------------------------------
# Ito formula and product rule at the level of means


@dataclass
class TestFunction:
    """Time-independent ``F(x)`` with its first two derivatives (``F_t = 0``)."""

    __test__ = False

    name: str
    f: Callable
    fx: Callable
    fxx: Callable

    @classmethod
    def polynomial(cls, coeffs, name: str | None = None) -> "TestFunction":
        p = np.polynomial.Polynomial(coeffs)
        if p.degree() > 6:
            raise DomainError("polynomial test functions are limited to degree 6")
        d1, d2 = p.deriv(1), p.deriv(2)
        return cls(name or f"poly{list(coeffs)}", p, d1, d2)

    @classmethod
    def named(cls, name: str) -> "TestFunction":
        if name == "x2":
            return cls.polynomial([0, 0, 1], "x2")
        if name == "x4":
            return cls.polynomial([0, 0, 0, 0, 1], "x4")
        if name == "cos":
            return cls("cos", np.cos, lambda x: -np.sin(x), lambda x: -np.cos(x))
        raise DomainError(f"unknown test function {name!r}")


def _gauss_mean(func, mean, var, n=64):
    r = gauss_hermite(n)
    x = mean[:, None] + np.sqrt(var)[:, None] * r.nodes[None, :]
    return np.asarray(func(x), dtype=float) @ r.weights


def ito_mean_rhs(F: TestFunction, spec: ForwardSpec, refine: int = 8) -> np.ndarray:
    """``F(X_0) + int_0^t E[F_x g] ds + 1/2 int_0^t E[F_xx] d||f||_s^2`` at every grid time.

    Expectations are Gauss-Hermite integrals over the exact Gaussian law of
    ``X_s``; the time integrals use the trapezoid rule on a refined grid,
    in the variance clock for the second-order term.
    """
    fine = spec.with_grid(spec.grid.refine(refine))
    mean, var = fine.marginals()
    b = fine.b(fine.grid.points)
    drift = _gauss_mean(F.fx, mean, var) * b
    curv = 0.5 * _gauss_mean(F.fxx, mean, var)
    inc = 0.5 * (drift[:-1] + drift[1:]) * fine.grid.dt + 0.5 * (curv[:-1] + curv[1:]) * np.diff(var)
    cum = np.concatenate(([0.0], np.cumsum(inc)))
    return float(F.f(spec.eta0)) + cum[::refine]


def ito_mean_check(F: TestFunction | str, spec: ForwardSpec, batch: FbmPathBatch) -> CheckResult:
    """Mean-level Ito formula for ``X = X_0 + int g ds + int f dB`` at every grid time.

    ``spec`` carries ``X_0``, ``g`` (as ``b``) and ``f`` (as ``sigma``).  The
    left side is the MC mean of ``F(X_t)`` along simulated paths, the right
    side is :func:`ito_mean_rhs`.
    """
    F = TestFunction.named(F) if isinstance(F, str) else F
    x = simulate_eta(spec, batch)
    vals = F.f(x)
    lhs = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(x.shape[0])
    rhs = ito_mean_rhs(F, spec)
    return CheckResult("ito_mean", {"hurst": batch.hurst, "F": F.name, "n_paths": batch.n_paths}, lhs, rhs, se,
                       _z(lhs - rhs, se))


def product_rule_rhs(f1: Coefficient, f2: Coefficient, g1: Coefficient, g2: Coefficient, grid: TimeGrid, h,
                     kernels: str = "step") -> np.ndarray:
    """``int (m1 g2 + m2 g1) ds + int (D X1 f2 + D X2 f1) ds`` at every grid time.

    The drift part integrates to ``m1 m2``; the kernel part, with
    ``D X_i(s) = int_0^s phi(s - r) f_i(r) dr``, sums to ``<f1, f2>_t``.
    ``kernels="step"`` uses the left-point step versions of ``f1, f2``.
    """
    from .forward import drift_integral

    m1 = drift_integral(g1, grid)
    m2 = drift_integral(g2, grid)
    if kernels == "step":
        acc = kernel_accumulator(grid, h)
        k = acc.cumulative(f1(grid.points[:-1]), f2(grid.points[:-1]))
    elif kernels == "exact":
        k = inner_product_on_grid(f1, f2, grid, h)
    else:
        raise DomainError(f"unknown kernels mode {kernels!r}")
    return m1 * m2 + k


def product_rule_check(f1: Coefficient, f2: Coefficient, g1: Coefficient, g2: Coefficient, batch: FbmPathBatch,
                       kernels: str = "step") -> CheckResult:
    """``E[X1 X2](t)`` by MC against :func:`product_rule_rhs`, with ``X_i = int g_i ds + int f_i dB``."""
    grid = batch.grid
    h = batch.hurst
    from .forward import drift_integral

    m1 = drift_integral(g1, grid)
    m2 = drift_integral(g2, grid)
    dB = batch.increments
    x1 = np.zeros_like(batch.paths)
    x2 = np.zeros_like(batch.paths)
    x1[:, 1:] = m1[None, 1:] + np.cumsum(dB * f1(grid.points[:-1])[None, :], axis=1)
    x2[:, 1:] = m2[None, 1:] + np.cumsum(dB * f2(grid.points[:-1])[None, :], axis=1)
    prod = x1 * x2
    lhs = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(prod.shape[0])
    rhs = product_rule_rhs(f1, f2, g1, g2, grid, h, kernels)
    return CheckResult("product_rule", {"hurst": h, "n_paths": batch.n_paths, "kernels": kernels}, lhs, rhs, se,
                       _z(lhs - rhs, se))


# ---------------------------------------------------------------------------
# default battery


def random_step_coefficient(grid: TimeGrid, rng, low: float = -1.0, high: float = 1.0, pieces: int = 4) -> Coefficient:
    """Piecewise-constant coefficient with breaks on ``grid`` points."""
    inner = np.sort(rng.choice(np.arange(1, grid.n_steps), size=min(pieces - 1, grid.n_steps - 1), replace=False))
    breaks = np.concatenate(([0.0], grid.points[inner], [grid.horizon]))
    return Coefficient.piecewise_constant(breaks, rng.uniform(low, high, breaks.size - 1))


def random_polynomial(kernels, rng, max_degree: int = 3) -> PolynomialFunctional:
    n = len(kernels)
    terms = {}
    for _ in range(rng.integers(1, 4)):
        deg = int(rng.integers(1, max_degree + 1))
        e = [0] * n
        for _ in range(deg):
            e[int(rng.integers(0, n))] += 1
        terms[tuple(e)] = float(rng.uniform(-1, 1))
    return PolynomialFunctional(list(kernels), terms)


def run_battery(hursts=(0.6, 0.75, 0.9), n_paths: int = 100_000, seed: int = 0, n_steps: int = 16,
                fine_steps: int = 1024, horizon: float = 1.0) -> list[CheckResult]:
    """The default set of checks for each Hurst index."""
    results = []
    one = Coefficient.constant(1.0)
    zero = Coefficient.constant(0.0)
    lin = Coefficient.from_callable(lambda t: np.asarray(t, dtype=float), label="t")
    grid = TimeGrid.uniform(horizon, n_steps)
    for j, h in enumerate(hursts):
        rng = np.random.default_rng([seed, j])
        batch = sample_paths(grid, h, n_paths, seed + j)
        fine = PathSource(TimeGrid.uniform(horizon, fine_steps), h, n_paths, seed + 100 + j)
        step = Coefficient.piecewise_constant([0, 0.3 * horizon, 0.7 * horizon, horizon], [1.0, -0.5, 2.0])
        results.extend(isometry_checks([one, lin, step], fine))
        results.append(isometry_check("B", batch))
        results.append(duality_check(PolynomialFunctional.power(one, 1), one, batch))
        results.append(duality_check(PolynomialFunctional.power(one, 2), one, batch))
        results.append(duality_check(PolynomialFunctional.power(one, 3), one, batch))
        ks = [random_step_coefficient(grid, rng) for _ in range(2)]
        results.append(duality_check(random_polynomial(ks, rng), random_step_coefficient(grid, rng), batch))
        spec = ForwardSpec(0.0, zero, one, h, grid)
        for name in ("x2", "x4", "cos"):
            results.append(ito_mean_check(name, spec, batch))
        results.append(product_rule_check(one, one, zero, zero, batch))
        results.append(product_rule_check(random_step_coefficient(grid, rng), random_step_coefficient(grid, rng),
                                          random_step_coefficient(grid, rng), random_step_coefficient(grid, rng),
                                          batch))
    return results
