"""Exact sampling of fractional Brownian motion on a time grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SingularCovarianceError
from .kernel import Coefficient, Hurst, TimeGrid, kernel_accumulator


@dataclass(frozen=True)
class GaussianLaw:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance >= 0:
            raise DomainError(f"variance must be >= 0, got {self.variance!r}")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))

    def cdf(self, x):
        from scipy.stats import norm

        if self.variance == 0:
            return (np.asarray(x) >= self.mean).astype(float)
        return norm.cdf(x, loc=self.mean, scale=self.std)


@dataclass(frozen=True, eq=False)
class FbmPathBatch:
    """``n_paths`` fBm trajectories; column ``k`` holds the value at ``grid.points[k]``."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    hurst: float

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)

    def subsample(self, grid: TimeGrid) -> "FbmPathBatch":
        """Restrict the batch to a coarser grid whose points are all on this grid."""
        idx = np.searchsorted(self.grid.points, grid.points)
        idx = np.clip(idx, 0, len(self.grid) - 1)
        if not np.allclose(self.grid.points[idx], grid.points, rtol=0, atol=1e-12):
            raise DomainError("target grid is not a subset of the batch grid")
        return FbmPathBatch(grid, self.paths[:, idx], self.seed, self.hurst)

    def to_table(self):
        header = [f"t_{k}" for k in range(len(self.grid))]
        return header, self.paths


def covariance(t, s, h):
    """``E[B_t B_s] = (t^2H + s^2H - |t - s|^2H) / 2``."""
    h = Hurst(h)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    return 0.5 * (np.abs(t) ** (2 * h) + np.abs(s) ** (2 * h) - np.abs(t - s) ** (2 * h))


def covariance_matrix(grid, h) -> np.ndarray:
    """Covariance of ``B`` at the positive grid times (the t = 0 row is dropped).

    ``grid`` may be a :class:`TimeGrid` or a raw array of times; raw arrays
    with repeated times are rejected since the matrix would be singular.
    """
    h = Hurst(h)
    times = grid.points if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float).ravel()
    times = times[times > 0]
    if times.size == 0:
        raise DomainError("grid has no positive time")
    if np.unique(times).size != times.size:
        raise SingularCovarianceError("duplicate grid times make the covariance singular; deduplicate the grid")
    return covariance(times[:, None], times[None, :], h)


def cholesky_factor(grid, h) -> np.ndarray:
    cov = covariance_matrix(grid, h)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError(
            "covariance factorization failed; deduplicate or coarsen the grid"
        ) from exc


def _path_normals(seed: int, n_paths: int, dim: int) -> np.ndarray:
    # one Philox counter stream per path: path i never depends on how many
    # other paths were drawn, or in which order
    return _chunk_normals(seed, 0, n_paths, dim)


def sample_paths(grid: TimeGrid, h, n_paths: int, seed: int = 0, method: str = "cholesky") -> FbmPathBatch:
    """Draw ``n_paths`` exact fBm trajectories on ``grid``.

    ``method="cholesky"`` (default) multiplies i.i.d. normals by the lower
    factor of the covariance.  ``method="circulant"`` uses Davies-Harte
    embedding of the increment covariance and requires a uniform grid.
    """
    h = Hurst(h)
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    n = grid.n_steps
    if method == "cholesky":
        chol = cholesky_factor(grid, h)
        z = _path_normals(seed, n_paths, n)
        values = z @ chol.T
    elif method == "circulant":
        values = _circulant_paths(grid, h, n_paths, seed)
    else:
        raise DomainError(f"unknown sampling method {method!r}")
    paths = np.zeros((n_paths, n + 1))
    paths[:, 1:] = values
    return FbmPathBatch(grid, paths, int(seed), float(h))


def _circulant_paths(grid: TimeGrid, h, n_paths: int, seed: int) -> np.ndarray:
    dt = grid.dt
    if not np.allclose(dt, dt[0], rtol=1e-10, atol=0):
        raise DomainError("circulant sampling needs a uniform grid")
    n = grid.n_steps
    k = np.arange(n + 1)
    # autocovariance of unit-step fractional Gaussian noise
    gamma = 0.5 * (np.abs(k + 1) ** (2 * h) - 2 * np.abs(k) ** (2 * h) + np.abs(k - 1) ** (2 * h))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if np.any(lam < -1e-10 * lam.max()):
        raise SingularCovarianceError("circulant embedding is not positive semi-definite")
    lam = np.clip(lam, 0.0, None)
    m = row.size
    z = _path_normals(seed, n_paths, 2 * m)
    w = z[:, :m] + 1j * z[:, m:]
    noise = np.fft.fft(np.sqrt(lam / m)[None, :] * w, axis=1)[:, :n].real
    return np.cumsum(noise, axis=1) * dt[0] ** h


def wiener_integral_samples(sigma: Coefficient, batch: FbmPathBatch) -> np.ndarray:
    """Left-point Riemann-Stieltjes sums ``sum sigma(t_i) (B_{t_i+1} - B_{t_i})`` per path."""
    weights = np.asarray(sigma(batch.grid.points[:-1]), dtype=float)
    return batch.increments @ weights


def wiener_integral_variance(sigma: Coefficient, grid: TimeGrid, h) -> float:
    """Exact variance of :func:`wiener_integral_samples` on ``grid``.

    The Riemann sum is the Wiener integral of the step function equal to
    ``sigma(t_i)`` on ``[t_i, t_i+1)``, whose variance is a cell-mass sum.
    """
    weights = np.asarray(sigma(grid.points[:-1]), dtype=float)
    return kernel_accumulator(grid, h).inner(weights)


def left_point_coefficient(sigma: Coefficient, grid: TimeGrid) -> Coefficient:
    """The step function that :func:`wiener_integral_samples` actually integrates."""
    return Coefficient.piecewise_constant(grid.points, sigma(grid.points[:-1]))


def _sum_weights(sigmas, grid: TimeGrid) -> np.ndarray:
    # sum_i s(t_i) (B_{i+1} - B_i) = sum_j w_j B_j over the positive grid times
    cols = []
    for s in sigmas:
        a = np.asarray(s(grid.points[:-1]), dtype=float)
        w = np.empty_like(a)
        w[:-1] = a[:-1] - a[1:]
        w[-1] = a[-1]
        cols.append(w)
    return np.column_stack(cols)


@dataclass(frozen=True)
class PathSource:
    """A batch that is never materialized: the same per-path normals as
    :func:`sample_paths`, consumed in chunks.

    Useful for Wiener integrals on fine grids, where storing every path
    would not fit in memory.
    """

    grid: TimeGrid
    hurst: float
    n_paths: int
    seed: int = 0
    chunk: int = 8192

    def wiener_integrals(self, sigmas) -> np.ndarray:
        """``(n_paths, len(sigmas))`` matrix of left-point sums, one column per coefficient."""
        chol = cholesky_factor(self.grid, self.hurst)
        proj = chol.T @ _sum_weights(sigmas, self.grid)
        out = np.empty((self.n_paths, proj.shape[1]))
        for start in range(0, self.n_paths, self.chunk):
            stop = min(start + self.chunk, self.n_paths)
            out[start:stop] = _chunk_normals(self.seed, start, stop, self.grid.n_steps) @ proj
        return out

    def materialize(self) -> FbmPathBatch:
        return sample_paths(self.grid, self.hurst, self.n_paths, self.seed)


def _chunk_normals(seed: int, start: int, stop: int, dim: int) -> np.ndarray:
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    out = np.empty((stop - start, dim))
    for i in range(start, stop):
        gen = np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, i]))
        out[i - start] = gen.standard_normal(dim)
    return out


def batch_wiener_integrals(batch, sigmas) -> np.ndarray:
    """Left-point sums for several coefficients on an :class:`FbmPathBatch` or :class:`PathSource`."""
    if isinstance(batch, PathSource):
        return batch.wiener_integrals(sigmas)
    return np.column_stack([wiener_integral_samples(s, batch) for s in sigmas])
