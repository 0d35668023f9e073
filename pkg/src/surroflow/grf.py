"""Log-Gaussian permeability fields on a regular grid.

The log-permeability modifier G is a stationary Gaussian field with an
exponential covariance ``sigma2 * exp(-|s - s'| / ell)`` evaluated at cell
centres, sampled exactly through a dense Cholesky factor of the covariance
matrix. Permeability is ``k_ref * exp(G)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, NumericalError


@dataclass(frozen=True)
class GridSpec:
    """Uniform 2-d cell-centred grid: ``height`` rows by ``width`` columns."""

    height: int
    width: int
    cell_size_m: float = 10.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if not self.cell_size_m > 0:
            raise GeometryError(f"cell size must be positive, got {self.cell_size_m}")

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def cell_centers(self) -> np.ndarray:
        """Physical (x, y) centres in metres, row-major order, shape [n_cells, 2]."""
        h = self.cell_size_m
        ys, xs = np.meshgrid(
            (np.arange(self.height) + 0.5) * h,
            (np.arange(self.width) + 0.5) * h,
            indexing="ij",
        )
        return np.column_stack([xs.ravel(), ys.ravel()])


@dataclass(frozen=True)
class GrfParams:
    """Parameters of the stationary log-permeability field."""

    mean: float = 0.0
    variance: float = 0.5
    correlation_length_m: float = 100.0

    def __post_init__(self):
        if not self.variance > 0:
            raise GeometryError(f"variance must be positive, got {self.variance}")
        if not self.correlation_length_m > 0:
            raise GeometryError(
                f"correlation length must be positive, got {self.correlation_length_m}"
            )


@dataclass(frozen=True)
class PermeabilityField:
    """One realisation: log modifier G and permeability ``k_ref * exp(G)``."""

    log_values: np.ndarray
    k_ref: float
    seed: int

    @property
    def values(self) -> np.ndarray:
        return self.k_ref * np.exp(self.log_values)


def covariance(points_a: np.ndarray, points_b: np.ndarray, params: GrfParams) -> np.ndarray:
    """Exponential covariance between two point sets, shape [len(a), len(b)]."""
    a = np.atleast_2d(np.asarray(points_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(points_b, dtype=np.float64))
    dist = np.sqrt(
        np.maximum(
            ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2),
            0.0,
        )
    )
    return params.variance * np.exp(-dist / params.correlation_length_m)


class FieldSampler:
    """Factorises the grid covariance once, then draws fields per seed."""

    def __init__(self, grid: GridSpec, params: GrfParams, k_ref: float = 2.5e-13):
        if not k_ref > 0:
            raise GeometryError(f"reference permeability must be positive, got {k_ref}")
        self.grid = grid
        self.params = params
        self.k_ref = k_ref
        cov = covariance(grid.cell_centers(), grid.cell_centers(), params)
        self._chol = _stable_cholesky(cov, params.variance, grid.n_cells)

    def sample(self, seed) -> PermeabilityField:
        """Draw one realisation; identical seeds give identical fields."""
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal(self.grid.n_cells)
        g = self.params.mean + self._chol @ xi
        log_values = g.reshape(self.grid.height, self.grid.width)
        canonical = seed if isinstance(seed, int) else -1
        return PermeabilityField(log_values=log_values, k_ref=self.k_ref, seed=canonical)


def sample_field(
    grid: GridSpec, params: GrfParams, seed, k_ref: float = 2.5e-13
) -> PermeabilityField:
    """One-shot convenience wrapper; use :class:`FieldSampler` for many draws."""
    return FieldSampler(grid, params, k_ref).sample(seed)


def _stable_cholesky(cov: np.ndarray, variance: float, n: int) -> np.ndarray:
    jitter = 0.0
    for attempt in range(8):
        try:
            return np.linalg.cholesky(cov if jitter == 0.0 else cov + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            jitter = variance * 1e-12 if jitter == 0.0 else jitter * 10.0
    raise NumericalError(
        f"covariance factorisation failed for {n} cells even with jitter {jitter:.1e}"
    )
