"""Closed-form calculus for the fractional kernel ``phi(x) = H(2H-1)|x|^(2H-2)``.

The kernel is integrable but unbounded on the diagonal, so it is never
sampled near zero.  Every double integral is reduced to closed forms:

* piecewise-constant data go through cell masses, the integral of ``phi``
  over a rectangle, which is a second difference of ``|x|^(2H)/2``;
* piecewise-affine data are written as ``f(u) = int_[0,u] mu_f(da)`` where
  ``mu_f`` has atoms (jumps) and a piecewise-constant density (slopes).  Then

      <f, g>_t = 1/2 [ g(t-) W_f(t) + f(t-) W_g(t) - K_fg(t) ]

  with ``W_f(t) = int (t-a)^(2H) mu_f(da)`` and
  ``K_fg(t) = int int |a-c|^(2H) mu_f(da) mu_g(dc)``, all of which have
  closed forms on cells.

Callable coefficients are interpolated piecewise-linearly on a refinement of
the time grid before integration.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError

SIGMA_MIN = 1e-8
DEFAULT_REFINE = 8
DEFAULT_CELLS = 2048
_MERGE_RTOL = 1e-12


class Hurst(float):
    """Hurst index restricted to the long-memory range ``1/2 < H < 1``."""

    def __new__(cls, value):
        value = float(value)
        if not 0.5 < value < 1.0:
            raise DomainError(f"Hurst index must satisfy 1/2 < H < 1, got {value!r}")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"Hurst({float(self)!r})"


class TimeGrid:
    """Strictly increasing partition ``0 = t_0 < ... < t_n = T``."""

    def __init__(self, points):
        p = np.array(points, dtype=float).ravel()
        if p.size < 2:
            raise DomainError("a time grid needs at least two points")
        if p[0] != 0.0:
            raise DomainError(f"time grid must start at 0, got {p[0]!r}")
        if not np.all(np.diff(p) > 0):
            raise DomainError("time grid points must be strictly increasing")
        p.setflags(write=False)
        self.points = p

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0:
            raise DomainError(f"horizon must be positive, got {horizon!r}")
        if n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        return cls(np.linspace(0.0, horizon, int(n_steps) + 1))

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def n_steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    def refine(self, factor: int) -> "TimeGrid":
        """Split every cell into ``factor`` equal sub-cells."""
        factor = int(factor)
        if factor < 1:
            raise DomainError("refinement factor must be >= 1")
        if factor == 1:
            return self
        p = self.points
        frac = np.arange(factor) / factor
        inner = (p[:-1, None] + np.diff(p)[:, None] * frac[None, :]).ravel()
        return TimeGrid(np.append(inner, p[-1]))

    def scaled(self, factor: float) -> "TimeGrid":
        return TimeGrid(self.points * float(factor))

    def index_of(self, t: float) -> int:
        """Index of the grid point equal to ``t`` (within rounding)."""
        k = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[k] - t) > 1e-12 * max(1.0, self.horizon):
            raise DomainError(f"t={t!r} is not a grid point")
        return k

    def __len__(self):
        return self.points.size

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def __repr__(self):
        return f"TimeGrid(n_steps={self.n_steps}, horizon={self.horizon!r})"


class Coefficient:
    """Deterministic function of time (``b``, ``sigma``) or space (``g``).

    Tables are right-continuous for the piecewise-constant kind and clamp to
    the end values outside their knots for the piecewise-linear kind.
    """

    KINDS = ("constant", "piecewise_constant", "piecewise_linear", "callable")

    def __init__(self, kind, domain="time", knots=None, values=None, func=None, label=None):
        if kind not in self.KINDS:
            raise DomainError(f"unknown coefficient kind {kind!r}")
        if domain not in ("time", "space"):
            raise DomainError(f"unknown coefficient domain {domain!r}")
        self.kind = kind
        self.domain = domain
        self.knots = None if knots is None else np.asarray(knots, dtype=float)
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.func = func
        self.label = label

    @classmethod
    def constant(cls, value: float, domain: str = "time") -> "Coefficient":
        return cls("constant", domain, values=np.array([float(value)]), label=repr(float(value)))

    @classmethod
    def piecewise_constant(cls, breaks, values, domain: str = "time") -> "Coefficient":
        breaks = np.asarray(breaks, dtype=float)
        values = np.asarray(values, dtype=float)
        if breaks.ndim != 1 or values.shape != (breaks.size - 1,):
            raise DomainError("piecewise-constant table needs len(values) == len(breaks) - 1")
        if not np.all(np.diff(breaks) > 0):
            raise DomainError("breaks must be strictly increasing")
        return cls("piecewise_constant", domain, knots=breaks, values=values)

    @classmethod
    def piecewise_linear(cls, knots, values, domain: str = "time") -> "Coefficient":
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.ndim != 1 or values.shape != knots.shape or knots.size < 2:
            raise DomainError("piecewise-linear table needs matching knots and values")
        if not np.all(np.diff(knots) > 0):
            raise DomainError("knots must be strictly increasing")
        return cls("piecewise_linear", domain, knots=knots, values=values)

    @classmethod
    def from_callable(cls, func: Callable, domain: str = "time", label=None) -> "Coefficient":
        return cls("callable", domain, func=func, label=label)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full(x.shape, self.values[0])
        if self.kind == "piecewise_constant":
            idx = np.searchsorted(self.knots, x, side="right") - 1
            return self.values[np.clip(idx, 0, self.values.size - 1)]
        if self.kind == "piecewise_linear":
            return np.interp(x, self.knots, self.values)
        out = np.asarray(self.func(x), dtype=float)
        return np.broadcast_to(out, x.shape).copy()

    def scaled(self, factor: float) -> "Coefficient":
        if self.kind == "callable":
            func = self.func
            return Coefficient.from_callable(lambda x: factor * np.asarray(func(x)), self.domain)
        return Coefficient(self.kind, self.domain, self.knots, self.values * factor)

    def check_sign_definite(self, grid: TimeGrid, sigma_min: float = SIGMA_MIN, refine: int = 1) -> int:
        """Return the sign of the coefficient on the grid, or raise if it is not definite."""
        vals = self(grid.refine(refine).points)
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("coefficient is not finite on the grid")
        if np.all(vals >= sigma_min):
            return 1
        if np.all(vals <= -sigma_min):
            return -1
        k = int(np.argmin(np.abs(vals)))
        raise ConfigurationError(
            f"coefficient must be sign-definite with |value| >= {sigma_min:g}; "
            f"found {vals[k]:.3g} at t={grid.refine(refine).points[k]:.6g}"
        )

    def __repr__(self):
        if self.label is not None:
            return f"Coefficient({self.kind}, {self.label})"
        return f"Coefficient({self.kind})"


# ---------------------------------------------------------------------------
# scalar primitives


def phi(x, h) -> np.ndarray | float:
    """The fractional kernel ``H(2H-1)|x|^(2H-2)``; undefined at ``x = 0``."""
    h = Hurst(h)
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise DomainError("phi is singular at 0; integrate it in closed form instead")
    out = h * (2 * h - 1) * np.abs(x) ** (2 * h - 2)
    return float(out) if out.ndim == 0 else out


def cell_mass(a, b, c, d, h):
    """Closed-form ``int_a^b int_c^d phi(u - v) dv du``.

    Degenerate rectangles give 0.  Vectorized over broadcastable arguments.
    """
    h = Hurst(h)
    e = 2 * h
    a, b, c, d = (np.asarray(v, dtype=float) for v in (a, b, c, d))
    out = 0.5 * (np.abs(b - c) ** e + np.abs(a - d) ** e - np.abs(a - c) ** e - np.abs(b - d) ** e)
    out = np.where((b > a) & (d > c), out, 0.0)
    return float(out) if out.ndim == 0 else out


class KernelAccumulator:
    """Cell-mass table of a partition, for piecewise-constant integrands.

    ``masses[i, j]`` is the kernel mass of cell ``i`` times cell ``j``.
    """

    def __init__(self, hurst, points):
        self.hurst = Hurst(hurst)
        p = np.asarray(points, dtype=float)
        self.points = p
        a, b = p[:-1], p[1:]
        m = cell_mass(a[:, None], b[:, None], a[None, :], b[None, :], self.hurst)
        m.setflags(write=False)
        self.masses = m

    def inner(self, f_vals, g_vals=None) -> float:
        f_vals = np.asarray(f_vals, dtype=float)
        g_vals = f_vals if g_vals is None else np.asarray(g_vals, dtype=float)
        return float(f_vals @ self.masses @ g_vals)

    def cumulative(self, f_vals, g_vals=None) -> np.ndarray:
        """``<f, g>`` over ``[0, p_k]`` for every partition point ``p_k`` (first entry 0)."""
        f_vals = np.asarray(f_vals, dtype=float)
        g_vals = f_vals if g_vals is None else np.asarray(g_vals, dtype=float)
        contrib = f_vals[:, None] * self.masses * g_vals[None, :]
        block = np.cumsum(np.cumsum(contrib, axis=0), axis=1)
        return np.concatenate(([0.0], np.diagonal(block)))

    def total(self) -> float:
        return float(self.masses.sum())


@functools.lru_cache(maxsize=32)
def kernel_accumulator(grid: TimeGrid, h) -> KernelAccumulator:
    """Cached accumulator for a (grid, H) pair; read-only after construction."""
    return KernelAccumulator(h, grid.points)


# ---------------------------------------------------------------------------
# piecewise-affine machinery


def _merge_points(pts, upper):
    pts = np.unique(np.asarray(pts, dtype=float))
    pts = pts[(pts >= 0.0) & (pts <= upper)]
    tol = _MERGE_RTOL * max(upper, 1.0)
    keep = np.concatenate(([True], np.diff(pts) > tol))
    pts = pts[keep]
    if upper - pts[-1] <= tol:
        pts[-1] = upper
    else:
        pts = np.append(pts, upper)
    pts[0] = 0.0
    return pts


def _resolve(coefs, upper, grid=None, refine=DEFAULT_REFINE):
    """Replace callables by their piecewise-linear interpolant on a fixed partition."""
    out = []
    for c in coefs:
        if c.kind == "callable":
            if grid is not None:
                dense = grid.refine(refine).points
                if dense[-1] < upper:
                    dense = np.append(dense, upper)
            else:
                dense = np.linspace(0.0, upper, DEFAULT_CELLS + 1)
            c = Coefficient.piecewise_linear(dense, c(dense), c.domain)
        out.append(c)
    return out


def _partition(coefs, upper, grid=None):
    pts = [np.array([0.0, upper])]
    for c in coefs:
        if c.kind in ("piecewise_constant", "piecewise_linear"):
            pts.append(c.knots)
    if grid is not None:
        pts.append(grid.points)
    return _merge_points(np.concatenate(pts), upper)


def _cell_values(coef, pts):
    """Left and right limits of the coefficient on every cell of ``pts``."""
    if coef.kind == "constant":
        v = np.full(pts.size - 1, coef.values[0])
        return v, v
    if coef.kind == "piecewise_constant":
        v = coef(0.5 * (pts[:-1] + pts[1:]))
        return v, v
    return coef(pts[:-1]), coef(pts[1:])


def _atoms_slopes(pts, left, right):
    atoms = np.empty_like(left)
    atoms[0] = left[0]
    atoms[1:] = left[1:] - right[:-1]
    slopes = (right - left) / np.diff(pts)
    return atoms, slopes


def _interaction_blocks(pts, e):
    """Pairwise ``|a-c|^e`` interactions between atoms and cell densities."""
    p = pts[:-1]
    q = pts[1:]
    s1 = lambda x: np.sign(x) * np.abs(x) ** (e + 1) / (e + 1)  # noqa: E731
    s2 = lambda x: np.abs(x) ** (e + 2) / ((e + 1) * (e + 2))  # noqa: E731
    atom_atom = np.abs(p[:, None] - p[None, :]) ** e
    # atom at p_i against the density on cell j
    atom_cell = s1(q[None, :] - p[:, None]) - s1(p[None, :] - p[:, None])
    cell_cell = (
        s2(q[:, None] - p[None, :])
        + s2(p[:, None] - q[None, :])
        - s2(p[:, None] - p[None, :])
        - s2(q[:, None] - q[None, :])
    )
    return atom_atom, atom_cell, cell_cell


def _affine_inner(pts, f_lr, g_lr, h):
    e = 2 * h
    af, sf = _atoms_slopes(pts, *f_lr)
    ag, sg = _atoms_slopes(pts, *g_lr)
    t = pts[-1]
    d = t - pts
    w_atom = d[:-1] ** e
    w_cell = (d[:-1] ** (e + 1) - d[1:] ** (e + 1)) / (e + 1)
    wf = af @ w_atom + sf @ w_cell
    wg = ag @ w_atom + sg @ w_cell
    aa, ac, cc = _interaction_blocks(pts, e)
    k = af @ aa @ ag + af @ ac @ sg + ag @ ac @ sf + sf @ cc @ sg
    return 0.5 * (g_lr[1][-1] * wf + f_lr[1][-1] * wg - k)


def _affine_cumulative(pts, f_lr, g_lr, h):
    """``<f, g>`` over ``[0, p_k]`` for every partition point (first entry 0)."""
    e = 2 * h
    af, sf = _atoms_slopes(pts, *f_lr)
    ag, sg = _atoms_slopes(pts, *g_lr)
    d = np.clip(pts[1:, None] - pts[None, :], 0.0, None)
    w_atom = d[:, :-1] ** e
    w_cell = (d[:, :-1] ** (e + 1) - d[:, 1:] ** (e + 1)) / (e + 1)
    wf = w_atom @ af + w_cell @ sf
    wg = w_atom @ ag + w_cell @ sg
    aa, ac, cc = _interaction_blocks(pts, e)
    contrib = (
        af[:, None] * aa * ag[None, :]
        + af[:, None] * ac * sg[None, :]
        + (ag[:, None] * ac * sf[None, :]).T
        + sf[:, None] * cc * sg[None, :]
    )
    block = np.cumsum(np.cumsum(contrib, axis=0), axis=1)
    vals = 0.5 * (g_lr[1] * wf + f_lr[1] * wg - np.diagonal(block))
    return np.concatenate(([0.0], vals))


def _hat_from_cells(pts, left, right, t, h):
    """``int_0^t phi(t - v) f(v) dv`` for a piecewise-affine ``f`` on ``pts``."""
    atoms, slopes = _atoms_slopes(pts, left, right)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    d = np.clip(t[:, None] - pts[None, :], 0.0, None)
    e = 2 * h
    val = (d[:, :-1] ** (e - 1)) @ atoms + ((d[:, :-1] ** e - d[:, 1:] ** e) / e) @ slopes
    return h * val


def _is_stepwise(*coefs):
    return all(c.kind in ("constant", "piecewise_constant") for c in coefs)


# ---------------------------------------------------------------------------
# public operations


def _prepare(coefs, upper, grid, refine):
    base = max(upper, grid.horizon) if grid is not None else upper
    coefs = _resolve(coefs, base, grid, refine)
    return coefs, _partition(coefs, upper, grid)


def inner_product(xi: Coefficient, eta: Coefficient, t: float, h, grid=None, refine=DEFAULT_REFINE) -> float:
    """``<xi, eta>_t = int_0^t int_0^t phi(u - v) xi_u eta_v du dv`` in closed form."""
    h = Hurst(h)
    t = float(t)
    if t <= 0:
        raise DomainError(f"inner product needs t > 0, got {t!r}")
    (xi, eta), pts = _prepare([xi, eta], t, grid, refine)
    if _is_stepwise(xi, eta):
        acc = KernelAccumulator(h, pts)
        return acc.inner(_cell_values(xi, pts)[0], _cell_values(eta, pts)[0])
    return float(_affine_inner(pts, _cell_values(xi, pts), _cell_values(eta, pts), h))


def inner_product_affine(xi: Coefficient, eta: Coefficient, t: float, h, grid=None, refine=DEFAULT_REFINE) -> float:
    """Same as :func:`inner_product` but always through the atom/density route."""
    h = Hurst(h)
    (xi, eta), pts = _prepare([xi, eta], float(t), grid, refine)
    return float(_affine_inner(pts, _cell_values(xi, pts), _cell_values(eta, pts), h))


def norm_sq(xi: Coefficient, t: float, h, grid=None, refine=DEFAULT_REFINE) -> float:
    return inner_product(xi, xi, t, h, grid, refine)


def _grid_index(pts, times):
    tol = _MERGE_RTOL * max(pts[-1], 1.0)
    return np.clip(np.searchsorted(pts, np.asarray(times) - 2 * tol), 0, pts.size - 1)


def inner_product_on_grid(xi: Coefficient, eta: Coefficient, grid: TimeGrid, h, refine=DEFAULT_REFINE) -> np.ndarray:
    """``<xi, eta>_t`` at every grid point, in one O(n^2) pass."""
    h = Hurst(h)
    (xi, eta), pts = _prepare([xi, eta], grid.horizon, grid, refine)
    if _is_stepwise(xi, eta):
        acc = KernelAccumulator(h, pts)
        vals = acc.cumulative(_cell_values(xi, pts)[0], _cell_values(eta, pts)[0])
    else:
        vals = _affine_cumulative(pts, _cell_values(xi, pts), _cell_values(eta, pts), h)
    return vals[_grid_index(pts, grid.points)]


def norm_sq_on_grid(xi: Coefficient, grid: TimeGrid, h, refine=DEFAULT_REFINE) -> np.ndarray:
    return inner_product_on_grid(xi, xi, grid, h, refine)


def _scalar_or_array(out):
    return float(out) if out.ndim == 0 else out


def sigma_hat(sigma: Coefficient, t, h, grid=None, refine=DEFAULT_REFINE):
    """``int_0^t phi(t - v) sigma_v dv``; zero at ``t = 0`` by continuity."""
    h = Hurst(h)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("sigma_hat needs t >= 0")
    upper = float(t_arr.max()) if t_arr.size else 0.0
    if upper == 0.0:
        return _scalar_or_array(np.zeros(t_arr.shape))
    if grid is not None:
        upper = max(upper, grid.horizon)
    (sigma,), pts = _prepare([sigma], upper, grid, refine)
    left, right = _cell_values(sigma, pts)
    return _scalar_or_array(_hat_from_cells(pts, left, right, t_arr.ravel(), h).reshape(t_arr.shape))


def phi_transform(xi: Coefficient, t, horizon: float, h, grid=None, refine=DEFAULT_REFINE):
    """Two-sided transform ``int_0^T phi(t - s) xi_s ds`` for ``t`` in ``[0, T]``."""
    h = Hurst(h)
    horizon = float(horizon)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > horizon):
        raise DomainError("phi_transform needs 0 <= t <= T")
    (xi,), pts = _prepare([xi], horizon, grid, refine)
    left, right = _cell_values(xi, pts)
    flat = t_arr.ravel()
    lower = _hat_from_cells(pts, left, right, flat, h)
    # reflect s -> T - s to reuse the one-sided formula for the upper part
    rpts = horizon - pts[::-1]
    rpts[0] = 0.0
    upper = _hat_from_cells(rpts, right[::-1], left[::-1], horizon - flat, h)
    return _scalar_or_array((lower + upper).reshape(t_arr.shape))


def coefficient_value(coef: Coefficient, t, grid=None, refine=DEFAULT_REFINE, horizon=None):
    """Value of the coefficient as represented inside the kernel routines."""
    t_arr = np.asarray(t, dtype=float)
    if coef.kind != "callable":
        return coef(t_arr)
    upper = horizon if horizon is not None else (grid.horizon if grid is not None else float(t_arr.max()))
    (coef,), _ = _prepare([coef], upper, grid, refine)
    return coef(t_arr)


def sigma_tilde(sigma: Coefficient, t, h, grid=None, refine=DEFAULT_REFINE, sigma_min=SIGMA_MIN):
    """Time derivative of ``||sigma||_t^2``, i.e. ``2 sigma_hat_t sigma_t``."""
    h = Hurst(h)
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise DomainError("sigma_tilde needs t > 0")
    horizon = grid.horizon if grid is not None else float(t_arr.max())
    s = coefficient_value(sigma, t_arr, grid, refine, horizon=horizon)
    if np.any(np.abs(s) < sigma_min):
        raise ConfigurationError(f"|sigma_t| fell below sigma_min={sigma_min:g}")
    return _scalar_or_array(2.0 * np.asarray(sigma_hat(sigma, t_arr, h, grid, refine)) * s)


@dataclass(frozen=True)
class RatioBound:
    """Smallest ``M >= 1`` with ``t^(2H-1)/M <= sigma_hat/sigma <= M t^(2H-1)`` on a grid."""

    M: float
    times: np.ndarray
    ratios: np.ndarray
    hurst: float

    def holds(self) -> bool:
        w = self.times ** (2 * self.hurst - 1)
        return bool(np.all(w / self.M <= self.ratios) and np.all(self.ratios <= self.M * w))


def ratio_bound_report(sigma: Coefficient, grid: TimeGrid, h, refine=DEFAULT_REFINE, sigma_min=SIGMA_MIN) -> RatioBound:
    h = Hurst(h)
    sigma.check_sign_definite(grid, sigma_min, refine=refine if sigma.kind == "callable" else 1)
    times = grid.points[1:]
    s = coefficient_value(sigma, times, grid, refine, horizon=grid.horizon)
    ratios = np.asarray(sigma_hat(sigma, times, h, grid, refine)) / s
    w = times ** (2 * h - 1)
    q = ratios / w
    m = max(1.0, float(q.max()), float((1.0 / q).max()))
    report = RatioBound(m, times, ratios, float(h))
    while not report.holds():
        m = float(np.nextafter(m, np.inf))
        report = RatioBound(m, times, ratios, float(h))
    return report
