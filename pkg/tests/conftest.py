import numpy as np
import pytest

from windrecon.fields import GridSpec, Realization, VelocityField
from windrecon.neural.engine import set_precision


@pytest.fixture(autouse=True)
def _f64_engine():
    # Gradient checks and determinism contracts assume 64-bit mode.
    set_precision("f64")
    yield


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec()


def random_field(rng: np.random.Generator, grid: GridSpec | None = None) -> VelocityField:
    grid = grid or GridSpec()
    return VelocityField(grid, rng.standard_normal((grid.ny, grid.nx, grid.components)))


def make_realization(
    values: np.ndarray,
    direction: float = 0.0,
    run_index: int = 1,
    grid: GridSpec | None = None,
) -> Realization:
    grid = grid or GridSpec()
    return Realization(
        grid=grid,
        direction=direction,
        run_index=run_index,
        dt=0.001,
        u_ref=0.70,
        z_over_h=1.05,
        values=values,
    )


def fd_gradient(f, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f(x) at selected flat indices."""
    flat = x.ravel()
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        lp = f()
        flat[i] = old - h
        lm = f()
        flat[i] = old
        out[n] = (lp - lm) / (2.0 * h)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # Floor keeps FD roundoff noise on near-zero gradient components from
    # registering as relative error.
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))
