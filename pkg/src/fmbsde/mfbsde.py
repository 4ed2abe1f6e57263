"""Mean-field BSDE solver: Picard iteration over value surfaces, diagnostics, comparison."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, PreconditionError
from .fbm import FbmPathBatch
from .forward import ForwardSpec, simulate_eta
from .kernel import Coefficient, ratio_bound_report
from .pde import (
    DEFAULT_NQUAD,
    Driver,
    SpaceGrid,
    ValueSurface,
    _quadrature_table,
    freeze_mean_field,
    solve_backward_pde,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
AUDIT_SAMPLES = 1000
AUDIT_SLACK = 0.05


@dataclass(eq=False)
class MfBsdeProblem:
    """Forward spec, driver ``f(t, x, yp, zp, y, z)``, terminal ``g`` and Lipschitz data."""

    spec: ForwardSpec
    driver: Driver
    g: Coefficient
    lipschitz: float | None = None
    monotone_in_yprime: bool = False
    space: SpaceGrid | None = None
    n_quad: int = DEFAULT_NQUAD
    audit_box: float | None = None

    def __post_init__(self):
        if self.space is None:
            self.space = SpaceGrid.auto(self.spec)
        if self.lipschitz is None:
            self.lipschitz = self.driver.lipschitz
        if self.lipschitz < 0:
            raise ConfigurationError("Lipschitz constant must be >= 0")

    @property
    def depends_on_solution(self) -> bool:
        return bool(self.driver.depends_on & {"yp", "zp", "y", "z"})

    def terminal_scale(self) -> float:
        return max(1.0, float(np.max(np.abs(self.g(self.space.points)))))

    def lipschitz_audit(self, n: int = AUDIT_SAMPLES, seed: int = 0, box: float | None = None) -> dict:
        """Sampled finite-difference slopes of ``f`` in each solution slot.

        Slopes larger than ``(1 + 5%) C`` are listed under ``violations``;
        they are reported, never raised.  ``z_weighted`` divides the z-slopes
        by ``t^(H - 1/2)``, the weight of the stronger Lipschitz condition.
        """
        box = box or self.audit_box or 10.0 * self.terminal_scale()
        rng = np.random.default_rng(seed)
        T = self.spec.horizon
        t = rng.uniform(0, T, n)
        x = rng.uniform(self.space.x_min, self.space.x_max, n)
        args = {s: rng.uniform(-box, box, n) for s in ("yp", "zp", "y", "z")}
        eps = 1e-6 * max(1.0, box)
        f = self.driver
        base = f(t, x, args["yp"], args["zp"], args["y"], args["z"])
        slopes = {}
        for s in ("yp", "zp", "y", "z"):
            bumped = dict(args)
            bumped[s] = args[s] + eps
            d = np.abs(f(t, x, bumped["yp"], bumped["zp"], bumped["y"], bumped["z"]) - base) / eps
            slopes[s] = float(np.max(d))
            if s in ("zp", "z"):
                h = float(self.spec.hurst)
                w = np.maximum(t, 1e-300) ** (h - 0.5)
                slopes[s + "_weighted"] = float(np.max(d / w))
        c = float(self.lipschitz)
        viol = {s: v for s, v in slopes.items() if not s.endswith("_weighted") and v > (1 + AUDIT_SLACK) * c}
        h2_only = any(slopes[s] > 0 and slopes[s + "_weighted"] > (1 + AUDIT_SLACK) * c for s in ("zp", "z"))
        return {"C": c, "box": box, "samples": n, "slopes": slopes, "violations": viol, "h2_only": h2_only}

    def estimated_lipschitz(self) -> float:
        audit = self.lipschitz_audit()
        return max(v for k, v in audit["slopes"].items() if not k.endswith("_weighted"))


@dataclass(eq=False)
class MfBsdeSolution:
    surface: ValueSurface
    iterations: int
    distances: list = field(default_factory=list)
    beta_used: float = 0.0
    M_used: float = 1.0
    C_used: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def u(self) -> np.ndarray:
        return self.surface.v

    @property
    def w(self) -> np.ndarray:
        return self.surface.w

    def value(self, k: int, x) -> np.ndarray:
        """Cubic Hermite read-out of ``u(t_k, x)`` (clamped to the space grid)."""
        xs = self.surface.space.points
        return self.surface.spline(k)(np.clip(x, xs[0], xs[-1]))

    def y0(self, eta0: float) -> float:
        return float(self.value(0, eta0))

    def combined(self) -> np.ndarray:
        return np.array([np.hypot(dy, dz) for dy, dz in self.distances])

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "distances": [[float(a), float(b)] for a, b in self.distances],
            "beta_used": self.beta_used,
            "M_used": self.M_used,
            "C_used": self.C_used,
            **self.diagnostics,
        }


# ---------------------------------------------------------------------------
# weighted metric


def _power_weighted_integral(t: np.ndarray, p: np.ndarray, alpha: float) -> np.ndarray:
    """Cell integrals of ``t^alpha`` times the piecewise-linear interpolant of ``p``."""
    a, b = t[:-1], t[1:]
    i0 = (b ** (alpha + 1) - a ** (alpha + 1)) / (alpha + 1)
    i1 = (b ** (alpha + 2) - a ** (alpha + 2)) / (alpha + 2)
    return (p[:-1] * (b * i0 - i1) + p[1:] * (i1 - a * i0)) / (b - a)


def _gaussian_sq_means(diff: np.ndarray, xs: np.ndarray, nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    out = np.empty(diff.shape[0])
    for k in range(diff.shape[0]):
        out[k] = np.dot(weights[k], np.interp(nodes[k], xs, diff[k]) ** 2)
    return out


def weighted_distance(s1: ValueSurface, s2: ValueSurface, spec: ForwardSpec, beta: float,
                      n_quad: int = DEFAULT_NQUAD, normalize: bool = False) -> tuple[float, float]:
    """``(dY, dZ)`` in the ``e^(beta t)`` and ``t^(2H-1) e^(beta t)`` weighted norms.

    Expectations are Gauss-Hermite integrals against the law of ``eta_t``.
    ``dY`` uses the trapezoid rule; ``dZ`` integrates ``t^(2H-1)`` exactly
    against the piecewise-linear interpolant of ``e^(beta t) E|w1 - w2|^2``.
    With ``normalize=True`` both are multiplied by ``e^(-beta T / 2)``,
    which keeps large ``beta`` finite without changing ratios.
    """
    if s1.grid != s2.grid or s1.space != s2.space:
        raise ConfigurationError("surfaces live on different grids")
    t = spec.grid.points
    nodes, weights = _quadrature_table(spec, n_quad)
    xs = s1.space.points
    qy = _gaussian_sq_means(s1.v - s2.v, xs, nodes, weights)
    qz = _gaussian_sq_means(s1.w - s2.w, xs, nodes, weights)
    shift = spec.horizon if normalize else 0.0
    e = np.exp(beta * (t - shift))
    py, pz = e * qy, e * qz
    dy2 = float(np.sum(0.5 * (py[:-1] + py[1:]) * np.diff(t)))
    dz2 = float(np.sum(_power_weighted_integral(t, pz, 2 * float(spec.hurst) - 1)))
    return float(np.sqrt(max(dy2, 0.0))), float(np.sqrt(max(dz2, 0.0)))


def _surface_norm(s: ValueSurface, spec: ForwardSpec, beta: float, n_quad: int) -> float:
    zero = ValueSurface(s.grid, s.space, np.zeros_like(s.v), sigma=s.sigma)
    return float(np.hypot(*weighted_distance(s, zero, spec, beta, n_quad, normalize=True)))


# ---------------------------------------------------------------------------
# Picard iteration


def picard_constants(p: MfBsdeProblem, factor: float = 16.0):
    """``(M, C, beta)`` with ``beta = factor M C^2 + 4 / M``."""
    m = ratio_bound_report(p.spec.sigma, p.spec.grid, p.spec.hurst, p.spec.refine, p.spec.sigma_min).M
    c = float(p.lipschitz)
    if c == 0 and p.depends_on_solution:
        c = p.estimated_lipschitz()
    return m, c, factor * m * c * c + 4.0 / m


def initial_surface(p: MfBsdeProblem) -> ValueSurface:
    """``u_0 = g`` for every time."""
    return ValueSurface.constant_in_time(p.g, p.spec.grid, p.space, sigma=p.spec.sigma_values())


def picard_step(p: MfBsdeProblem, surface: ValueSurface, slots=("yp", "zp")) -> ValueSurface:
    """Freeze the mean-field slots at ``surface`` and solve the resulting PDE."""
    frozen = freeze_mean_field(p.driver, surface, p.spec, p.n_quad, slots=slots)
    return solve_backward_pde(p.spec, p.g, frozen, p.space)


def _iterate(p, start, beta, tol, max_iter, slots, on_step=None):
    distances = []
    cur = start
    stalls = 0
    for it in range(1, max_iter + 1):
        new = picard_step(p, cur, slots)
        prev = cur
        d = weighted_distance(new, cur, p.spec, beta, p.n_quad, normalize=True)
        distances.append(d)
        if on_step is not None:
            on_step(it, cur, new)
        cur = new
        comb = np.hypot(*d)
        # the beta = 0 check keeps early times from being discounted by e^(-beta T)
        plain = np.hypot(*weighted_distance(new, prev, p.spec, 0.0, p.n_quad))
        if (comb <= tol * max(1.0, _surface_norm(new, p.spec, beta, p.n_quad))
                and plain <= tol * max(1.0, _surface_norm(new, p.spec, 0.0, p.n_quad))):
            return cur, it, distances
        if len(distances) >= 2 and comb >= np.hypot(*distances[-2]):
            stalls += 1
            if stalls >= 3:
                raise NumericalError(
                    "Picard iteration is not contracting (ratio >= 1 for 3 consecutive iterations); "
                    f"check the Lipschitz constant C={p.lipschitz:g}. distances: {_fmt(distances)}"
                )
        else:
            stalls = 0
    raise NumericalError(f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations; distances: {_fmt(distances)}")


def _fmt(distances):
    return ", ".join(f"{np.hypot(*d):.3g}" for d in distances)


def picard_solve(p: MfBsdeProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 beta: float | None = None) -> MfBsdeSolution:
    """Fixed point of the map that freezes the law of ``(Y, Z)`` and solves the linearized problem.

    Iteration stops once the distance between successive iterates is below
    ``tol * max(1, norm of the iterate)`` both in the ``beta``-weighted
    metric and with ``beta = 0``.  Drivers that do not read ``yp`` or ``zp``
    are solved by a single PDE solve.
    """
    m, c, beta_default = picard_constants(p)
    beta = beta_default if beta is None else float(beta)
    audit = p.lipschitz_audit() if p.depends_on_solution else None
    diag = {"audit": audit}
    if audit and audit["violations"]:
        warnings.warn(f"driver slopes exceed the declared Lipschitz constant: {audit['violations']}", stacklevel=2)
    if not p.driver.is_mean_field:
        surface = picard_step(p, initial_surface(p))
        return MfBsdeSolution(surface, 1, [], beta, m, c, diag)
    surface, its, distances = _iterate(p, initial_surface(p), beta, tol, max_iter, ("yp", "zp"))
    return MfBsdeSolution(surface, its, distances, beta, m, c, diag)


@dataclass
class ContractionReport:
    ratios: list
    flagged: list
    threshold: float = 0.6

    @property
    def ok(self) -> bool:
        return not self.flagged


def contraction_report(sol: MfBsdeSolution, threshold: float = 0.6) -> ContractionReport:
    """Ratios ``r_k = d_(k+1) / d_k`` of the combined weighted distance.

    ``r_k`` with ``k >= 2`` above ``threshold`` are flagged.
    """
    d = sol.combined()
    if d.size < 2:
        return ContractionReport([], [], threshold)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(d[:-1] > 0, d[1:] / d[:-1], 0.0)
    ratios = [float(v) for v in r]
    flagged = [k for k, v in enumerate(ratios, start=1) if k >= 2 and v > threshold]
    return ContractionReport(ratios, flagged, threshold)


# ---------------------------------------------------------------------------
# a-priori estimate


@dataclass
class AprioriReport:
    times: np.ndarray
    lhs: np.ndarray
    theta: np.ndarray
    ratio: float
    inconsistent: bool

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.ratio))


def apriori_check(p: MfBsdeProblem, sol: MfBsdeSolution, beta: float | None = None) -> AprioriReport:
    """Compare ``E(e^(bt)|Y_t|^2 + int_t^T e^(bs) s^(2H-1)|Z_s|^2 ds)`` with
    ``Theta(t) = E(e^(bT)|g(eta_T)|^2 + int_t^T e^(bs)|f(s, eta_s, 0, 0, 0, 0)|^2 ds)``.

    Both sides carry the factor ``e^(-beta T)``; the ratio is unaffected.
    """
    beta = sol.beta_used if beta is None else float(beta)
    spec = p.spec
    t = spec.grid.points
    T = spec.horizon
    nodes, weights = _quadrature_table(spec, p.n_quad)
    xs = sol.surface.space.points
    ey = _gaussian_sq_means(sol.u, xs, nodes, weights)
    ez = _gaussian_sq_means(sol.w, xs, nodes, weights)
    e = np.exp(beta * (t - T))
    zc = _power_weighted_integral(t, e * ez, 2 * float(spec.hurst) - 1)
    ztail = np.concatenate((np.cumsum(zc[::-1])[::-1], [0.0]))
    lhs = e * ey + ztail

    f0 = np.array([
        np.dot(weights[k], np.asarray(p.driver(t[k], nodes[k], 0.0, 0.0, 0.0, 0.0), dtype=float) ** 2)
        for k in range(t.size)
    ])
    gT = float(np.dot(weights[-1], np.asarray(p.g(nodes[-1]), dtype=float) ** 2))
    pf = e * f0
    fc = 0.5 * (pf[:-1] + pf[1:]) * np.diff(t)
    theta = gT + np.concatenate((np.cumsum(fc[::-1])[::-1], [0.0]))
    inconsistent = bool(np.any((theta == 0) & (lhs > 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(theta > 0, lhs / theta, np.where(lhs > 0, np.inf, 0.0))
    return AprioriReport(t, lhs, theta, float(np.max(q)), inconsistent)


# ---------------------------------------------------------------------------
# discrete residual along simulated paths


@dataclass
class ResidualReport:
    mean: np.ndarray
    rms: np.ndarray

    @property
    def total_rms(self) -> float:
        return float(np.sqrt(np.mean(self.rms ** 2)))

    @property
    def max_abs_mean(self) -> float:
        return float(np.max(np.abs(self.mean)))


def discrete_residual(p: MfBsdeProblem, sol: MfBsdeSolution, batch: FbmPathBatch) -> ResidualReport:
    """One-step residuals ``Y_i - Y_(i+1) - h_i dt_i + Z_i dB_i`` along simulated ``eta`` paths.

    ``Y`` and ``Z / sigma`` are read from the cubic Hermite interpolant of
    the surface; ``h`` is the driver frozen at the converged solution.
    """
    spec = p.spec
    if batch.grid != spec.grid:
        raise ConfigurationError("batch grid differs from the problem grid")
    eta = simulate_eta(spec, batch)
    xs = sol.surface.space.points
    eta = np.clip(eta, xs[0], xs[-1])
    frozen = freeze_mean_field(p.driver, sol.surface, spec, p.n_quad)
    sig = spec.sigma_values()
    dB = batch.increments
    dt = spec.grid.dt
    n = spec.grid.n_steps
    splines = [sol.surface.spline(k) for k in range(n + 1)]
    ys = [splines[k](eta[:, k]) for k in range(n + 1)]
    mean = np.empty(n)
    rms = np.empty(n)
    for k in range(n):
        z = splines[k].derivative()(eta[:, k]) * sig[k]
        r = ys[k] - ys[k + 1] - frozen(k, eta[:, k], ys[k], z) * dt[k] + z * dB[:, k]
        mean[k] = r.mean()
        rms[k] = np.sqrt(np.mean(r ** 2))
    return ResidualReport(mean, rms)


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonResult:
    verdict: str
    max_violation: float
    witness: dict
    first: MfBsdeSolution
    second: MfBsdeSolution
    tol: float

    def to_dict(self, eta0: float) -> dict:
        return {
            "verdict": self.verdict,
            "max_violation": self.max_violation,
            "witness": self.witness,
            "tol": self.tol,
            "Y1_0": self.first.y0(eta0),
            "Y2_0": self.second.y0(eta0),
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
        }


def _sample_box(p: MfBsdeProblem, n: int, rng, box: float):
    T = p.spec.horizon
    return (
        rng.uniform(0, T, n),
        rng.uniform(p.space.x_min, p.space.x_max, n),
        rng.uniform(-box, box, n),
        rng.uniform(-box, box, n),
        rng.uniform(-box, box, n),
    )


def check_comparison_preconditions(p1: MfBsdeProblem, p2: MfBsdeProblem, n: int = 10_000, seed: int = 0,
                                   atol: float = 1e-12) -> None:
    """Sample ``f1 <= f2``, ``g1 <= g2`` and monotonicity of ``f1`` in ``yp``; raise with a witness."""
    for name, p in (("first", p1), ("second", p2)):
        if "zp" in p.driver.depends_on:
            raise PreconditionError(f"{name} driver reads zp; the comparison harness needs drivers without zp")
    if p1.spec.grid != p2.spec.grid:
        raise PreconditionError("problems use different time grids")
    if not p1.monotone_in_yprime:
        raise PreconditionError("first problem is not flagged as increasing in yp")
    rng = np.random.default_rng(seed)
    box = max(p1.audit_box or 10.0 * p1.terminal_scale(), p2.audit_box or 10.0 * p2.terminal_scale())
    t, x, yp, y, z = _sample_box(p1, n, rng, box)
    f1 = p1.driver(t, x, yp, 0.0, y, z)
    f2 = p2.driver(t, x, yp, 0.0, y, z)
    bad = f1 > f2 + atol * np.maximum(1.0, np.abs(f2))
    if bad.any():
        i = int(np.argmax(f1 - f2))
        raise PreconditionError(
            "f1 > f2 at a sampled point",
            {"t": t[i], "x": x[i], "yp": yp[i], "y": y[i], "z": z[i], "f1": float(f1[i]), "f2": float(f2[i])},
        )
    xg = np.concatenate((p1.space.points, rng.uniform(p1.space.x_min, p1.space.x_max, n)))
    g1, g2 = np.asarray(p1.g(xg)), np.asarray(p2.g(xg))
    bad = g1 > g2 + atol * np.maximum(1.0, np.abs(g2))
    if bad.any():
        i = int(np.argmax(g1 - g2))
        raise PreconditionError("g1 > g2 at a sampled point", {"x": float(xg[i]), "g1": float(g1[i]), "g2": float(g2[i])})
    lo = np.minimum(yp, rng.uniform(-box, box, n))
    hi = np.maximum(yp, lo + rng.uniform(0, box, n))
    fa = p1.driver(t, x, lo, 0.0, y, z)
    fb = p1.driver(t, x, hi, 0.0, y, z)
    bad = fa > fb + atol * np.maximum(1.0, np.abs(fb))
    if bad.any():
        i = int(np.argmax(fa - fb))
        raise PreconditionError(
            "f1 is not increasing in yp",
            {"t": t[i], "x": x[i], "yp_low": lo[i], "yp_high": hi[i], "y": y[i], "z": z[i]},
        )


def compare_solutions(p1: MfBsdeProblem, p2: MfBsdeProblem, tol: float = 1e-8, n_samples: int = 10_000,
                      seed: int = 0, picard_tol: float = DEFAULT_TOL, workers: int = 1) -> ComparisonResult:
    """Solve both problems on a shared grid and check ``u1 <= u2 + tol`` everywhere.

    Both solves use ``beta = 12 M C^2 + 4 / M`` with the larger of the two
    Lipschitz constants.
    """
    check_comparison_preconditions(p1, p2, n_samples, seed)
    if p1.space != p2.space:
        p2 = MfBsdeProblem(p2.spec, p2.driver, p2.g, p2.lipschitz, p2.monotone_in_yprime, p1.space, p2.n_quad, p2.audit_box)
    m, c1, _ = picard_constants(p1, 12.0)
    _, c2, _ = picard_constants(p2, 12.0)
    c = max(c1, c2)
    beta = 12.0 * m * c * c + 4.0 / m
    if workers > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            f1 = pool.submit(picard_solve, p1, picard_tol, beta=beta)
            f2 = pool.submit(picard_solve, p2, picard_tol, beta=beta)
            s1, s2 = f1.result(), f2.result()
    else:
        s1 = picard_solve(p1, picard_tol, beta=beta)
        s2 = picard_solve(p2, picard_tol, beta=beta)
    diff = s1.u - s2.u
    k, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
    worst = float(diff[k, j])
    witness = {"t": float(p1.spec.grid.points[k]), "x": float(p1.space.points[j])}
    verdict = "ordered" if worst <= tol else "violated"
    return ComparisonResult(verdict, worst, witness, s1, s2, tol)


@dataclass
class MonotoneTrace:
    increments: list
    distances: list

    def non_increasing(self, tol: float) -> bool:
        return all(v <= tol for v in self.increments)


def monotone_iteration_solve(p: MfBsdeProblem, start: MfBsdeSolution | ValueSurface, tol: float = DEFAULT_TOL,
                             mono_tol: float = 1e-8, max_iter: int = DEFAULT_MAX_ITER):
    """Iterate from a supersolution, freezing only the ``yp`` slot at the previous iterate.

    Each iterate must lie below its predecessor up to ``mono_tol``; the
    largest increase per iteration is recorded in the trace.  Returns
    ``(solution, trace)``.
    """
    if not p.monotone_in_yprime:
        raise PreconditionError("monotone iteration needs a driver flagged as increasing in yp")
    if "zp" in p.driver.depends_on:
        raise PreconditionError("monotone iteration needs a driver without zp")
    surface = start.surface if isinstance(start, MfBsdeSolution) else start
    if surface.space != p.space or surface.grid != p.spec.grid:
        raise ConfigurationError("start surface is not on the problem grids")
    m, c, beta = picard_constants(p, 12.0)
    increments = []

    def record(it, prev, new):
        diff = new.v - prev.v
        k, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
        increments.append(float(diff[k, j]))
        if diff[k, j] > mono_tol:
            raise NumericalError(
                f"monotone iteration increased at iteration {it}: +{diff[k, j]:.3g} at "
                f"t={p.spec.grid.points[k]:.6g}, x={p.space.points[j]:.6g}"
            )

    if "yp" not in p.driver.depends_on:
        new = picard_step(p, surface, ("yp",))
        record(1, surface, new)
        d = weighted_distance(new, surface, p.spec, beta, p.n_quad, normalize=True)
        return MfBsdeSolution(new, 1, [d], beta, m, c), MonotoneTrace(increments, [d])
    final, its, distances = _iterate(p, surface, beta, tol, max_iter, ("yp",), on_step=record)
    return MfBsdeSolution(final, its, distances, beta, m, c), MonotoneTrace(increments, distances)
