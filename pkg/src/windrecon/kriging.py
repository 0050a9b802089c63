"""Ordinary Kriging reconstruction with a Gaussian variogram.

Each velocity component is processed independently. The variogram is fixed
to zero nugget and unit sill; only the correlation length is free, selected
by leave-one-out cross-validation over a calibration snapshot set. The
augmented sensor system is factored once per layout and reused for every
target cell and snapshot (only right-hand sides change).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import ConfigError, NumericalError
from .fields import GridSpec, VelocityField
from .placement import SensorLayout

__all__ = [
    "VariogramModel",
    "KrigingSystem",
    "LENGTH_BOUNDS",
    "LENGTH_GRID_SIZE",
    "gaussian_semivariance",
    "select_length",
    "reconstruct_kriging",
]

LENGTH_BOUNDS = (0.5, 10.0)
LENGTH_GRID_SIZE = 20


@dataclass(frozen=True)
class VariogramModel:
    """Gaussian variogram, nugget fixed at 0 and sill at 1."""

    length: float
    sill: float = 1.0
    nugget: float = 0.0

    def __post_init__(self) -> None:
        if not LENGTH_BOUNDS[0] <= self.length <= LENGTH_BOUNDS[1]:
            raise ConfigError(f"length {self.length} outside {LENGTH_BOUNDS}")
        if self.nugget != 0.0 or self.sill != 1.0:
            raise ConfigError("variogram is fixed to nugget 0, sill 1")


def gaussian_semivariance(h: np.ndarray | float, model: VariogramModel) -> np.ndarray | float:
    """gamma(h) = 1 - exp(-(h / length)^2) for h >= 0."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ConfigError("distances must be nonnegative")
    out = 1.0 - np.exp(-((h / model.length) ** 2))
    return float(out) if out.ndim == 0 else out


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff**2).sum(axis=2))


class KrigingSystem:
    """Factored ordinary-Kriging system for one layout and variogram.

    The (k+1) x (k+1) augmented matrix carries the Lagrange row/column of
    ones enforcing weight sums of 1. ``weights(targets)`` returns the k
    interpolation weights per target point; predictions follow as
    ``weights.T @ readings``.
    """

    def __init__(self, layout: SensorLayout, model: VariogramModel):
        self.layout = layout
        self.model = model
        pts = np.array(layout.cells, dtype=np.float64)
        k = layout.k
        gamma = gaussian_semivariance(_pairwise_dist(pts, pts), model)
        aug = np.zeros((k + 1, k + 1))
        aug[:k, :k] = gamma
        aug[k, :k] = 1.0
        aug[:k, k] = 1.0
        self._points = pts
        self._factor = lu_factor(aug, check_finite=False)
        diag = np.abs(np.diag(self._factor[0]))
        if not np.all(np.isfinite(diag)) or diag.min() <= diag.max() * 1e-14:
            raise NumericalError("singular Kriging system (duplicate sensors?)")

    def weights(self, targets: np.ndarray) -> np.ndarray:
        """Interpolation weights, shape (k, n_targets)."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        k = self.layout.k
        rhs = np.ones((k + 1, targets.shape[0]))
        rhs[:k, :] = gaussian_semivariance(_pairwise_dist(self._points, targets), self.model)
        sol = lu_solve(self._factor, rhs)
        return sol[:k, :]

    def grid_weights(self) -> np.ndarray:
        """Weights for every grid cell, shape (k, ny*nx), row-major cells."""
        grid = self.layout.grid
        xs, ys = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny))
        targets = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        return self.weights(targets)


def select_length(layout: SensorLayout, readings: np.ndarray) -> VariogramModel:
    """Pick the correlation length by leave-one-out cross-validation.

    ``readings`` holds one component's sensor values over a calibration set,
    shape (n_snapshots, k). Scores a 20-point log-spaced grid over
    [0.5, 10.0] cells by the mean squared LOO prediction error at held-out
    sensors; ties go to the smaller length.
    """
    readings = np.atleast_2d(np.asarray(readings, dtype=np.float64))
    k = layout.k
    if k < 3:
        raise ConfigError(f"length selection needs k >= 3 sensors, got {k}")
    if readings.shape[1] != k:
        raise ConfigError(f"readings have {readings.shape[1]} columns, layout has k={k}")
    lengths = np.geomspace(LENGTH_BOUNDS[0], LENGTH_BOUNDS[1], LENGTH_GRID_SIZE)
    pts = np.array(layout.cells, dtype=np.float64)
    best_len = lengths[0]
    best_score = np.inf
    for length in lengths:
        model = VariogramModel(length=float(length))
        err = 0.0
        for j in range(k):
            rest = [i for i in range(k) if i != j]
            sub = SensorLayout(layout.grid, tuple(layout.cells[i] for i in rest))
            w = KrigingSystem(sub, model).weights(pts[j : j + 1])[:, 0]
            pred = readings[:, rest] @ w
            err += float(((pred - readings[:, j]) ** 2).mean())
        score = err / k
        if score < best_score - 1e-15:
            best_score = score
            best_len = float(length)
    return VariogramModel(length=best_len)


def reconstruct_kriging(
    layout: SensorLayout,
    reading: np.ndarray,
    model: VariogramModel | tuple[VariogramModel, VariogramModel],
) -> VelocityField:
    """Reconstruct a full field from one snapshot's sensor readings.

    ``reading`` is (k, 2) (or flat 2k, cell-major) with the (u, v) values at
    the layout cells. ``model`` is shared or a (u, v) pair. Zero nugget makes
    the prediction exact at sensor cells.
    """
    reading = np.asarray(reading, dtype=np.float64)
    if reading.size != 2 * layout.k:
        raise ConfigError(f"expected {2 * layout.k} sensor values, got {reading.size}")
    if not np.all(np.isfinite(reading)):
        raise ConfigError("sensor readings must be finite")
    reading = reading.reshape(layout.k, 2)
    models = model if isinstance(model, tuple) else (model, model)
    grid = layout.grid
    planes = []
    for c, m in enumerate(models):
        w = KrigingSystem(layout, m).grid_weights()
        planes.append((reading[:, c] @ w).reshape(grid.ny, grid.nx))
    return VelocityField(grid, np.stack(planes, axis=-1))


class KrigingReconstructor:
    """Precomputed per-component grid weights for fast repeated reconstruction."""

    def __init__(self, layout: SensorLayout, models: tuple[VariogramModel, VariogramModel]):
        self.layout = layout
        self.models = models
        self._w = [KrigingSystem(layout, m).grid_weights() for m in models]

    def reconstruct(self, reading: np.ndarray) -> VelocityField:
        grid = self.layout.grid
        reading = np.asarray(reading, dtype=np.float64).reshape(self.layout.k, 2)
        planes = [(reading[:, c] @ self._w[c]).reshape(grid.ny, grid.nx) for c in range(2)]
        return VelocityField(grid, np.stack(planes, axis=-1))

    def reconstruct_batch(self, readings: np.ndarray) -> np.ndarray:
        """(n, k, 2) readings -> (n, ny, nx, 2) reconstructions."""
        grid = self.layout.grid
        readings = np.asarray(readings, dtype=np.float64)
        out = np.empty((readings.shape[0], grid.ny, grid.nx, 2))
        for c in range(2):
            out[..., c] = (readings[:, :, c] @ self._w[c]).reshape(-1, grid.ny, grid.nx)
        return out
