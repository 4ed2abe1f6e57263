"""Backward theta-scheme for ``v_t + b v_x + sigma_tilde v_xx / 2 + h(t, x, v, v_x sigma) = 0``.

Time is stepped in the variance clock: over a grid step the diffusion
increment is the exact ``||sigma||^2`` increment and the advection increment
is the exact drift integral, so for ``h = 0`` only the space discretization
errs.  When a step would break the monotonicity bound of the scheme it is
split into equal sub-steps of the variance clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import solve_banded

from .errors import ConfigurationError, DomainError, NumericalError
from .fbm import GaussianLaw
from .forward import ForwardSpec
from .kernel import Coefficient, TimeGrid

ALL_SLOTS = frozenset({"t", "x", "yp", "zp", "y", "z"})
DEFAULT_NX = 400
DEFAULT_NT = 256
DEFAULT_NQUAD = 32
WIDTH_SD = 6.0


# ---------------------------------------------------------------------------
# grids and surfaces


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    n_x: int = DEFAULT_NX

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise DomainError("SpaceGrid needs x_min < x_max")
        if self.n_x < 8:
            raise DomainError("SpaceGrid needs n_x >= 8")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @classmethod
    def auto(cls, spec: ForwardSpec, n_x: int = DEFAULT_NX, width: float = WIDTH_SD) -> "SpaceGrid":
        """Cover every marginal mean of ``eta`` plus ``width`` times the largest standard deviation."""
        mean, var = spec.marginals()
        sd = float(np.sqrt(var.max()))
        if sd <= 0:
            sd = 1.0
        return cls(float(mean.min() - width * sd), float(mean.max() + width * sd), int(n_x))

    def refined(self) -> "SpaceGrid":
        """Same interval with half the spacing."""
        return SpaceGrid(self.x_min, self.x_max, 2 * self.n_x - 1)


def space_derivative(v: np.ndarray, dx: float) -> np.ndarray:
    """Centered differences inside, one-sided at the two ends, along the last axis."""
    return np.gradient(v, dx, axis=-1, edge_order=1)


@dataclass(eq=False)
class ValueSurface:
    """``v`` and ``v_x`` on ``grid x space``; ``w = v_x sigma_t`` when ``sigma`` is known."""

    grid: TimeGrid
    space: SpaceGrid
    v: np.ndarray
    vx: np.ndarray | None = None
    sigma: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        shape = (len(self.grid), self.space.n_x)
        if self.v.shape != shape:
            raise DomainError(f"surface values have shape {self.v.shape}, expected {shape}")
        self.vx = space_derivative(self.v, self.space.dx)

    @property
    def w(self) -> np.ndarray:
        if self.sigma is None:
            raise ConfigurationError("surface has no sigma attached, so w = v_x sigma is undefined")
        return self.vx * np.asarray(self.sigma)[:, None]

    def value_at(self, k: int, x) -> np.ndarray:
        """Linear interpolation of ``v(t_k, .)``; clamps outside the space grid."""
        return np.interp(x, self.space.points, self.v[k])

    def w_at(self, k: int, x) -> np.ndarray:
        return np.interp(x, self.space.points, self.w[k])

    def spline(self, k: int) -> CubicHermiteSpline:
        """Cubic Hermite interpolant of ``v(t_k, .)`` built from ``v`` and ``v_x``."""
        return CubicHermiteSpline(self.space.points, self.v[k], self.vx[k], extrapolate=False)

    @classmethod
    def constant_in_time(cls, g: Coefficient, grid: TimeGrid, space: SpaceGrid, sigma=None) -> "ValueSurface":
        row = np.asarray(g(space.points), dtype=float)
        return cls(grid, space, np.tile(row, (len(grid), 1)), sigma=sigma)

    def to_table(self):
        t = np.repeat(self.grid.points, self.space.n_x)
        x = np.tile(self.space.points, len(self.grid))
        return ["t", "x", "v", "vx"], np.column_stack([t, x, self.v.ravel(), self.vx.ravel()])


# ---------------------------------------------------------------------------
# Gaussian quadrature


@dataclass(frozen=True)
class GaussRule:
    nodes: np.ndarray
    weights: np.ndarray


def gauss_hermite(n: int = DEFAULT_NQUAD) -> GaussRule:
    """Probabilists' Gauss-Hermite rule for ``N(0, 1)``; weights sum to 1."""
    if n < 1:
        raise DomainError("quadrature needs at least one node")
    z, w = hermegauss(int(n))
    return GaussRule(z, w / np.sqrt(2 * np.pi))


def gaussian_nodes(law: GaussianLaw, n: int = DEFAULT_NQUAD) -> GaussRule:
    """Nodes and weights for ``law``; a zero variance collapses to the point mass."""
    if law.variance == 0:
        return GaussRule(np.array([law.mean]), np.array([1.0]))
    r = gauss_hermite(n)
    return GaussRule(law.mean + law.std * r.nodes, r.weights)


def gaussian_expectation(func: Callable, law: GaussianLaw, n: int = DEFAULT_NQUAD) -> float:
    """``E[func(X)]`` for ``X ~ law`` by Gauss-Hermite quadrature."""
    r = gaussian_nodes(law, n)
    return float(np.dot(r.weights, np.asarray(func(r.nodes), dtype=float)))


def _quadrature_table(spec: ForwardSpec, n_quad: int):
    """Nodes and weights for ``eta_{t_k}`` at every grid time, shape ``(n_t, q)``."""
    mean, var = spec.marginals()
    r = gauss_hermite(n_quad)
    sd = np.sqrt(var)
    nodes = mean[:, None] + sd[:, None] * r.nodes[None, :]
    weights = np.tile(r.weights, (len(mean), 1))
    # point mass where the variance vanishes
    zero = var == 0
    if zero.any():
        nodes[zero] = mean[zero, None]
        weights[zero] = 0.0
        weights[zero, 0] = 1.0
    return nodes, weights


def mean_field_expectation(surface: ValueSurface, spec: ForwardSpec, t: float, n_quad: int = DEFAULT_NQUAD,
                           diagnostics: dict | None = None) -> float:
    """``E[v(t, eta_t)]`` by Gauss-Hermite against the exact marginal of ``eta_t``.

    Nodes beyond the space grid read the boundary value; their count is
    written to ``diagnostics["clamped"]`` when a dict is given.
    """
    k = _time_index(surface.grid, t)
    mean, var = spec.marginals()
    r = gaussian_nodes(GaussianLaw(float(mean[k]), float(var[k])), n_quad)
    if diagnostics is not None:
        out = (r.nodes < surface.space.x_min) | (r.nodes > surface.space.x_max)
        diagnostics["clamped"] = int(out.sum())
        diagnostics["clamped_weight"] = float(r.weights[out].sum())
    return float(np.dot(r.weights, surface.value_at(k, r.nodes)))


def _time_index(grid: TimeGrid, t: float) -> int:
    try:
        return grid.index_of(float(t))
    except (KeyError, ValueError, IndexError) as exc:
        raise DomainError(f"t={t!r} is not a grid time") from exc


# ---------------------------------------------------------------------------
# drivers


@dataclass
class Driver:
    """Driver ``f(t, x, yp, zp, y, z)``, vectorized with numpy broadcasting.

    ``depends_on`` lists the argument names the function actually reads; it
    lets solvers skip the mean-field quadrature when ``yp`` and ``zp`` are
    absent.  ``lipschitz`` is the user-declared constant ``C``.
    """

    func: Callable
    lipschitz: float = 0.0
    depends_on: frozenset = ALL_SLOTS
    label: str | None = None

    def __post_init__(self):
        self.depends_on = frozenset(self.depends_on)
        unknown = self.depends_on - ALL_SLOTS
        if unknown:
            raise DomainError(f"unknown driver arguments {sorted(unknown)}")
        if self.lipschitz < 0:
            raise DomainError("Lipschitz constant must be >= 0")

    def __call__(self, t, x, yp, zp, y, z):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(np.shape(x), np.shape(yp), np.shape(zp), np.shape(y), np.shape(z))
        out = np.asarray(self.func(t, x, yp, zp, y, z), dtype=float)
        return np.broadcast_to(out, shape)

    @property
    def is_mean_field(self) -> bool:
        return bool(self.depends_on & {"yp", "zp"})

    @property
    def is_zero(self) -> bool:
        return self.label == "0"

    @classmethod
    def zero(cls) -> "Driver":
        return cls(lambda t, x, yp, zp, y, z: 0.0, 0.0, frozenset(), "0")

    def __repr__(self):
        return f"Driver({self.label or self.func!r}, C={self.lipschitz})"


@dataclass
class FrozenDriver:
    """Non-mean-field driver ``h(t_k, x, y, z)`` on the time grid.

    ``(c_y, c_z)`` are the declared Lipschitz constants in ``y`` and ``z``.
    """

    func: Callable  # (k, t, x, y, z) -> array
    grid: TimeGrid
    c_y: float = 0.0
    c_z: float = 0.0
    depends_on: frozenset = frozenset({"t", "x", "y", "z"})
    label: str | None = None

    def __call__(self, k: int, x, y, z) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.func(k, float(self.grid.points[k]), x, y, z), dtype=float)
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, np.shape(y), np.shape(z)))

    @property
    def is_zero(self) -> bool:
        return self.label == "0"

    @classmethod
    def zero(cls, grid: TimeGrid) -> "FrozenDriver":
        return cls(lambda k, t, x, y, z: 0.0, grid, 0.0, 0.0, frozenset(), "0")

    def lipschitz_spot_check(self, box: float = 10.0, n: int = 200, seed: int = 0, eps: float = 1e-6):
        """Largest sampled finite-difference slopes in ``y`` and ``z`` over ``[-box, box]^2``."""
        rng = np.random.default_rng(seed)
        k = rng.integers(0, len(self.grid), n)
        x = rng.uniform(-box, box, n)
        y = rng.uniform(-box, box, n)
        z = rng.uniform(-box, box, n)
        sy = sz = 0.0
        for i in range(n):
            base = float(self(k[i], x[i], y[i], z[i]))
            sy = max(sy, abs(float(self(k[i], x[i], y[i] + eps, z[i])) - base) / eps)
            sz = max(sz, abs(float(self(k[i], x[i], y[i], z[i] + eps)) - base) / eps)
        return sy, sz


def freeze_mean_field(f: Driver, surface: ValueSurface, spec: ForwardSpec, n_quad: int = DEFAULT_NQUAD,
                      slots=("yp", "zp"), z_surface: ValueSurface | None = None) -> FrozenDriver:
    """Integrate the primed slots of ``f`` against the law of ``eta_t``.

    The primed arguments are ``u = surface.v`` and ``w = surface.v_x sigma``,
    read at Gauss-Hermite nodes of the exact marginal by linear
    interpolation (clamped at the grid ends).  A driver that reads neither
    ``yp`` nor ``zp`` is passed through unchanged.  ``slots`` restricts
    which primed arguments are frozen; the others are set equal to the
    unprimed ones.
    """
    if n_quad < 4:
        raise DomainError("freeze_mean_field needs n_quad >= 4")
    if surface.grid != spec.grid:
        raise ConfigurationError("surface and spec use different time grids")
    grid = spec.grid
    deps = f.depends_on
    c = f.lipschitz
    used = deps & set(slots)
    if not used:
        def direct(k, t, x, y, z):
            return f(t, x, y if "yp" not in slots else 0.0, z if "zp" not in slots else 0.0, y, z)

        return FrozenDriver(direct, grid, c, c, deps - {"yp", "zp"}, f.label)

    nodes, weights = _quadrature_table(spec, n_quad)
    xs = surface.space.points
    u = np.empty_like(nodes)
    w = np.zeros_like(nodes)
    wsurf = (z_surface or surface).w if "zp" in used else None
    for k in range(len(grid)):
        u[k] = np.interp(nodes[k], xs, surface.v[k])
        if wsurf is not None:
            w[k] = np.interp(nodes[k], xs, wsurf[k])
    clamped = float((weights * ((nodes < xs[0]) | (nodes > xs[-1]))).sum(axis=1).max())

    def frozen(k, t, x, y, z):
        x = np.asarray(x, dtype=float)[..., None]
        yy = np.asarray(y, dtype=float)[..., None]
        zz = np.asarray(z, dtype=float)[..., None]
        yp = u[k] if "yp" in slots else yy
        zp = w[k] if "zp" in slots else zz
        vals = f(t, x, yp, zp, yy, zz)
        return vals @ weights[k]

    out = FrozenDriver(frozen, grid, c, c, (deps - {"yp", "zp"}) | {"y", "z"}, f.label)
    out.clamped_weight = clamped
    return out


# ---------------------------------------------------------------------------
# solver


THETA = 0.5
SWEEP_TOL = 1e-10
SWEEP_MAX = 50


def _operator_bands(n: int, dx: float, dm: float, dv: float):
    """Tridiagonal ``L = dm D1 + dv/2 D2`` as (lower, diag, upper) with linear-extrapolation ends."""
    lo = np.full(n, dv / (2 * dx * dx) - dm / (2 * dx))
    up = np.full(n, dv / (2 * dx * dx) + dm / (2 * dx))
    di = np.full(n, -dv / (dx * dx))
    # zero second derivative at the ends, so D1 becomes one-sided
    di[0], up[0], lo[0] = -dm / dx, dm / dx, 0.0
    di[-1], lo[-1], up[-1] = dm / dx, -dm / dx, 0.0
    return lo, di, up


def _apply(lo, di, up, v):
    out = di * v
    out[1:] += lo[1:] * v[:-1]
    out[:-1] += up[:-1] * v[1:]
    return out


def _banded_lhs(lo, di, up, theta):
    ab = np.zeros((3, di.size))
    ab[0, 1:] = -theta * up[:-1]
    ab[1] = 1.0 - theta * di
    ab[2, :-1] = -theta * lo[1:]
    return ab


def monotone_substeps(dv: float, dx: float, theta: float = THETA) -> int:
    """Sub-steps needed so each satisfies ``dv <= dx^2 / (1 - theta)``."""
    if theta >= 1 or dv <= 0:
        return 1
    return max(1, int(np.ceil(dv * (1 - theta) / (dx * dx) * (1 - 1e-12))))


def solve_backward_pde(spec: ForwardSpec, g: Coefficient, h: FrozenDriver | None = None,
                       space: SpaceGrid | None = None, theta: float = THETA,
                       sweep_tol: float = SWEEP_TOL, sweep_max: int = SWEEP_MAX,
                       enforce_monotone: bool = True) -> ValueSurface:
    """March the PDE backward from ``v(T, .) = g``.

    Diffusion and advection are implicit (theta-scheme, tridiagonal solve);
    the driver source is theta-averaged between the two ends of each step
    and resolved by fixed-point sweeps.
    """
    grid = spec.grid
    space = space or SpaceGrid.auto(spec)
    h = h or FrozenDriver.zero(grid)
    if h.grid != grid:
        raise ConfigurationError("frozen driver and spec use different time grids")
    xs = space.points
    dx = space.dx
    n_t = len(grid)
    mean, var = spec.marginals()
    sig = spec.sigma_values()
    dms = np.diff(mean)
    dvs = np.diff(var)
    dts = grid.dt
    v = np.empty((n_t, xs.size))
    v[-1] = np.asarray(g(xs), dtype=float)
    max_sweeps = 0
    substeps_used = 0
    has_driver = not h.is_zero

    def source(k, vk):
        return h(k, xs, vk, space_derivative(vk, dx) * sig[k])

    h_next = source(n_t - 1, v[-1]) if has_driver else None
    for k in range(n_t - 2, -1, -1):
        m = monotone_substeps(dvs[k], dx, theta) if enforce_monotone else 1
        substeps_used = max(substeps_used, m)
        lo, di, up = _operator_bands(xs.size, dx, dms[k] / m, dvs[k] / m)
        ab = _banded_lhs(lo, di, up, theta)
        dt_sub = dts[k] / m

        def march(h_now):
            cur = v[k + 1]
            for j in range(m):
                rhs = cur + (1 - theta) * _apply(lo, di, up, cur)
                if has_driver:
                    # source at fraction s of the way from t_{k+1} back to t_k
                    s0, s1 = j / m, (j + 1) / m
                    ha = (1 - s0) * h_next + s0 * h_now
                    hb = (1 - s1) * h_next + s1 * h_now
                    rhs = rhs + dt_sub * ((1 - theta) * ha + theta * hb)
                cur = solve_banded((1, 1), ab, rhs)
            return cur

        if not has_driver:
            v[k] = march(None)
            continue
        guess = v[k + 1]
        for sweep in range(1, sweep_max + 1):
            h_now = source(k, guess)
            new = march(h_now)
            change = np.max(np.abs(new - guess)) / max(1.0, np.max(np.abs(new)))
            guess = new
            if not np.all(np.isfinite(new)):
                break
            if change <= sweep_tol:
                break
        else:
            sweep = sweep_max + 1
        if sweep > sweep_max or not np.all(np.isfinite(guess)):
            raise NumericalError(
                f"driver sweeps did not converge at step {k} (t={grid.points[k]:.6g}); "
                f"last relative change {change:.3g}, declared Lipschitz (C_y, C_z)=({h.c_y:g}, {h.c_z:g}), "
                f"dt={dts[k]:.3g}"
            )
        max_sweeps = max(max_sweeps, sweep)
        v[k] = guess
        h_next = source(k, v[k])
    info = {"max_sweeps": max_sweeps, "max_substeps": substeps_used, "theta": theta}
    return ValueSurface(grid, space, v, sigma=sig, info=info)


def gaussian_smoothing_oracle(g: Callable, spec: ForwardSpec, t_index: int, x, n_quad: int = 64) -> np.ndarray:
    """``E[g(x + m_T - m_t + N(0, V_T - V_t))]``, the driver-free solution."""
    mean, var = spec.marginals()
    law = GaussianLaw(0.0, float(max(var[-1] - var[t_index], 0.0)))
    r = gaussian_nodes(law, n_quad)
    shift = mean[-1] - mean[t_index]
    x = np.asarray(x, dtype=float)
    return np.asarray(g(x[..., None] + shift + r.nodes), dtype=float) @ r.weights
