"""The Gaussian forward process ``eta_t = eta0 + int b ds + int sigma dB``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .fbm import FbmPathBatch, GaussianLaw
from .kernel import (
    DEFAULT_REFINE,
    SIGMA_MIN,
    Coefficient,
    Hurst,
    TimeGrid,
    coefficient_value,
    norm_sq,
    norm_sq_on_grid,
    sigma_tilde,
)


def drift_integral(b: Coefficient, grid: TimeGrid, refine: int = DEFAULT_REFINE) -> np.ndarray:
    """``int_0^t b ds`` at every grid point.

    Constant and piecewise tables are integrated exactly; callables are
    integrated as their piecewise-linear resampling on ``grid.refine(refine)``.
    """
    pts = grid.points
    if b.kind == "constant":
        return b.values[0] * pts
    if b.kind == "piecewise_constant":
        knots = np.union1d(b.knots, pts)
        knots = knots[(knots >= 0) & (knots <= grid.horizon)]
        mids = 0.5 * (knots[:-1] + knots[1:])
        cum = np.concatenate(([0.0], np.cumsum(b(mids) * np.diff(knots))))
        return np.interp(pts, knots, cum)
    fine = grid.refine(refine).points
    knots = np.union1d(fine, b.knots) if b.kind == "piecewise_linear" else fine
    knots = knots[(knots >= 0) & (knots <= grid.horizon)]
    vals = coefficient_value(b, knots, grid, refine, horizon=grid.horizon)
    cum = np.concatenate(([0.0], np.cumsum(0.5 * (vals[:-1] + vals[1:]) * np.diff(knots))))
    return np.interp(pts, knots, cum)


@dataclass(eq=False)
class ForwardSpec:
    eta0: float
    b: Coefficient
    sigma: Coefficient
    hurst: float
    grid: TimeGrid
    refine: int = DEFAULT_REFINE
    sigma_min: float = SIGMA_MIN
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.hurst = Hurst(self.hurst)
        self.eta0 = float(self.eta0)
        self.sign = self.sigma.check_sign_definite(
            self.grid, self.sigma_min, refine=self.refine if self.sigma.kind == "callable" else 1
        )

    @property
    def horizon(self) -> float:
        return self.grid.horizon

    def with_grid(self, grid: TimeGrid) -> "ForwardSpec":
        return ForwardSpec(self.eta0, self.b, self.sigma, self.hurst, grid, self.refine, self.sigma_min)

    def means(self) -> np.ndarray:
        if "mean" not in self._cache:
            self._cache["mean"] = self.eta0 + drift_integral(self.b, self.grid, self.refine)
        return self._cache["mean"]

    def variances(self) -> np.ndarray:
        if "var" not in self._cache:
            v = norm_sq_on_grid(self.sigma, self.grid, self.hurst, self.refine)
            v[0] = 0.0
            self._cache["var"] = np.maximum(v, 0.0)
        return self._cache["var"]

    def sigma_values(self) -> np.ndarray:
        if "sig" not in self._cache:
            self._cache["sig"] = coefficient_value(self.sigma, self.grid.points, self.grid, self.refine, self.horizon)
        return self._cache["sig"]

    def sigma_tilde_values(self) -> np.ndarray:
        """``d/dt ||sigma||_t^2`` at the positive grid points (index 0 holds 0)."""
        if "st" not in self._cache:
            out = np.zeros(len(self.grid))
            out[1:] = sigma_tilde(self.sigma, self.grid.points[1:], self.hurst, self.grid, self.refine, self.sigma_min)
            self._cache["st"] = out
        return self._cache["st"]

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of ``eta`` at every grid point."""
        return self.means(), self.variances()


def simulate_eta(spec: ForwardSpec, batch: FbmPathBatch) -> np.ndarray:
    """Euler sums of the forward equation along each fBm path.

    The drift uses exact cell integrals of ``b``; the noise part is the
    left-point sum ``sum sigma(t_i) dB_i``.
    """
    if batch.grid != spec.grid:
        raise ConfigurationError("batch grid differs from the forward-spec grid")
    if not np.isclose(batch.hurst, spec.hurst, rtol=0, atol=1e-15):
        raise ConfigurationError(f"batch Hurst {batch.hurst} differs from spec Hurst {float(spec.hurst)}")
    sig = spec.sigma(spec.grid.points[:-1]) if spec.sigma.kind != "callable" else spec.sigma_values()[:-1]
    noise = np.cumsum(batch.increments * sig[None, :], axis=1)
    out = np.empty_like(batch.paths)
    out[:, 0] = spec.eta0
    out[:, 1:] = spec.means()[None, 1:] + noise
    return out


def eta_marginal(spec: ForwardSpec, t: float) -> GaussianLaw:
    """Exact Gaussian law of ``eta_t``."""
    t = float(t)
    T = spec.horizon
    if t < 0 or t > T * (1 + 1e-12):
        raise DomainError(f"t={t!r} is outside [0, {T}]")
    if t == 0:
        return GaussianLaw(spec.eta0, 0.0)
    on_grid = np.isclose(spec.grid.points, t, rtol=0, atol=1e-12 * max(T, 1.0))
    if on_grid.any():
        k = int(np.argmax(on_grid))
        return GaussianLaw(float(spec.means()[k]), float(spec.variances()[k]))
    sub = TimeGrid(np.append(spec.grid.points[spec.grid.points < t], t))
    mean = spec.eta0 + drift_integral(spec.b, sub, spec.refine)[-1]
    var = norm_sq(spec.sigma, t, spec.hurst, spec.grid, spec.refine)
    return GaussianLaw(float(mean), max(float(var), 0.0))
