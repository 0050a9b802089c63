"""Deterministic synthetic rooftop-flow generator.

Stands in for wind-tunnel data at desk scale: fixed analytic mean-field
templates per approach direction plus spatially correlated, temporally
independent Gaussian fluctuations. Every constant below is frozen so all
derived benchmark numbers are reproducible.

Template shapes (unit-square coordinates xi = x/(nx-1), eta = y/(ny-1)):

* 0 deg   -- streamwise u with a low-speed band on the upwind half and
             recovery downstream, near-zero v.
* 45 deg  -- speed maximum along the main diagonal (channelling), two
             low-speed lobes at the off-diagonal corners, flow along (1,1).
* 22.5 deg -- equal blend of the two, modulated asymmetrically across the
             roof span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .fields import GridSpec, Realization, VelocityField

__all__ = [
    "SynthConfig",
    "SUPPORTED_DIRECTIONS",
    "REFERENCE_SPEED_MS",
    "SNAPSHOT_DT_S",
    "MEASUREMENT_HEIGHT_RATIO",
    "synth_mean_field",
    "std_template",
    "correlated_noise",
    "synth_realization",
]

SUPPORTED_DIRECTIONS = (0.0, 22.5, 45.0)

# Reference experiment constants used as metadata defaults.
REFERENCE_SPEED_MS = 0.70
SNAPSHOT_DT_S = 0.001
MEASUREMENT_HEIGHT_RATIO = 1.05

# 0 deg template: low-speed plateau, downstream plateau, transition location
# and width of the smoothstep ramp, lateral drift and wiggle amplitudes.
# The drift keeps the v-plane mean away from zero so mean-normalized error
# metrics stay well defined on this direction.
_U_UPWIND = 0.30
_U_DOWNSTREAM = 1.05
_RAMP_CENTER = 0.45
_RAMP_WIDTH = 0.25
_LATERAL_DRIFT = 0.05
_LATERAL_AMP = 0.03

# 45 deg template: background speed, diagonal-band peak and width, corner
# lobe depth and squared radius, floor after lobe subtraction.
_DIAG_BASE = 0.18
_DIAG_PEAK = 0.95
_DIAG_WIDTH = 0.30
_LOBE_DEPTH = 0.35
_LOBE_RADIUS_SQ = 0.06
_SPEED_FLOOR = 0.05

# 22.5 deg asymmetry factor applied across the roof span.
_ASYM_SLOPE = 0.30

# Fluctuation-std template: smooth base plus one high-variance bump per
# direction (loosely: shear layer for 0 deg, frontal corner for 22.5 deg,
# stagnation corners for 45 deg).
_STD_BASE = 0.60
_STD_SIN_AMP = 0.40
_STD_BUMP_AMP = 0.30
_STD_BUMP_RADIUS_SQ = 0.05
_STD_BUMPS = {
    0.0: ((0.30, 0.50),),
    22.5: ((0.15, 0.30),),
    45.0: ((0.85, 0.15), (0.15, 0.85)),
}


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of one synthetic realization."""

    direction: float
    n_snapshots: int
    seed: int
    fluct_scale: float = 0.1
    corr_len: float = 2.0
    run_index: int = 1

    def __post_init__(self) -> None:
        if self.direction not in SUPPORTED_DIRECTIONS:
            raise ConfigError(f"unsupported direction {self.direction}, want one of {SUPPORTED_DIRECTIONS}")
        if self.n_snapshots < 1:
            raise ConfigError("n_snapshots must be >= 1")
        if self.fluct_scale < 0:
            raise ConfigError("fluct_scale must be >= 0")
        if self.corr_len <= 0:
            raise ConfigError("corr_len must be > 0")


def _unit_coords(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    xi = np.linspace(0.0, 1.0, grid.nx)[None, :]
    eta = np.linspace(0.0, 1.0, grid.ny)[:, None]
    return np.broadcast_to(xi, (grid.ny, grid.nx)), np.broadcast_to(eta, (grid.ny, grid.nx))


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _template_0(grid: GridSpec) -> np.ndarray:
    xi, eta = _unit_coords(grid)
    u = _U_UPWIND + (_U_DOWNSTREAM - _U_UPWIND) * _smoothstep((xi - _RAMP_CENTER) / _RAMP_WIDTH + 0.5)
    v = _LATERAL_DRIFT + _LATERAL_AMP * np.sin(2.0 * np.pi * xi) * (2.0 * eta - 1.0)
    return np.stack([u, v], axis=-1)


def _template_45(grid: GridSpec) -> np.ndarray:
    xi, eta = _unit_coords(grid)
    d = (xi - eta) / np.sqrt(2.0)
    speed = _DIAG_BASE + _DIAG_PEAK * np.exp(-((d / _DIAG_WIDTH) ** 2))
    speed -= _LOBE_DEPTH * np.exp(-(((xi - 1.0) ** 2 + eta**2) / _LOBE_RADIUS_SQ))
    speed -= _LOBE_DEPTH * np.exp(-((xi**2 + (eta - 1.0) ** 2) / _LOBE_RADIUS_SQ))
    speed = np.maximum(speed, _SPEED_FLOOR)
    comp = speed / np.sqrt(2.0)
    return np.stack([comp, comp], axis=-1)


def _template_22(grid: GridSpec) -> np.ndarray:
    xi, eta = _unit_coords(grid)
    blend = 0.5 * _template_0(grid) + 0.5 * _template_45(grid)
    return blend * (1.0 + _ASYM_SLOPE * (eta - 0.5))[:, :, None]


def synth_mean_field(direction: float, grid: GridSpec | None = None) -> VelocityField:
    """Fixed analytic mean-field template for one approach direction."""
    grid = grid or GridSpec()
    if direction == 0.0:
        values = _template_0(grid)
    elif direction == 22.5:
        values = _template_22(grid)
    elif direction == 45.0:
        values = _template_45(grid)
    else:
        raise ConfigError(f"unsupported direction {direction}, want one of {SUPPORTED_DIRECTIONS}")
    return VelocityField(grid, values)


def std_template(direction: float, grid: GridSpec | None = None) -> np.ndarray:
    """Per-cell fluctuation-std template (scalar grid, applied to u and v)."""
    grid = grid or GridSpec()
    if direction not in SUPPORTED_DIRECTIONS:
        raise ConfigError(f"unsupported direction {direction}, want one of {SUPPORTED_DIRECTIONS}")
    xi, eta = _unit_coords(grid)
    tpl = _STD_BASE + _STD_SIN_AMP * np.sin(np.pi * xi) * np.sin(np.pi * eta)
    for cx, cy in _STD_BUMPS[direction]:
        tpl = tpl + _STD_BUMP_AMP * np.exp(-(((xi - cx) ** 2 + (eta - cy) ** 2) / _STD_BUMP_RADIUS_SQ))
    return tpl


def _gaussian_kernel(corr_len: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * corr_len)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    dist_sq = ax[:, None] ** 2 + ax[None, :] ** 2
    return np.exp(-dist_sq / (2.0 * corr_len**2))


_NORM_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _kernel_and_norm(grid: GridSpec, corr_len: float) -> tuple[np.ndarray, np.ndarray]:
    key = (grid.ny, grid.nx, corr_len)
    if key not in _NORM_CACHE:
        kernel = _gaussian_kernel(corr_len)
        # Per-cell variance of the convolved field is the in-bounds sum of
        # squared kernel weights; dividing by its sqrt restores unit variance.
        energy = ndimage.correlate(np.ones((grid.ny, grid.nx)), kernel**2, mode="constant", cval=0.0)
        _NORM_CACHE[key] = (kernel, np.sqrt(energy))
    return _NORM_CACHE[key]


def correlated_noise(grid: GridSpec, corr_len: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian noise (ny, nx, 2) with unit marginal variance.

    Kernel-weighted convolution of white noise with an isotropic Gaussian of
    length ``corr_len`` cells; each cell is renormalized by the in-bounds
    kernel energy, so the marginal variance is exactly 1 everywhere
    (including borders) and the corr_len -> 0 limit is i.i.d. noise.
    """
    white = rng.standard_normal((grid.ny, grid.nx, grid.components))
    kernel, norm = _kernel_and_norm(grid, corr_len)
    out = np.empty_like(white)
    for c in range(grid.components):
        out[:, :, c] = ndimage.correlate(white[:, :, c], kernel, mode="constant", cval=0.0) / norm
    return out


def synth_realization(cfg: SynthConfig, grid: GridSpec | None = None) -> Realization:
    """Generate one synthetic realization; identical cfg gives bit-identical output.

    Snapshot t draws its noise from ``default_rng([seed, t])``, a counter-based
    stream, so snapshots can be produced independently (or in parallel) with
    the same result.
    """
    grid = grid or GridSpec()
    mean = synth_mean_field(cfg.direction, grid).values
    sigma = std_template(cfg.direction, grid)[:, :, None]
    values = np.empty((cfg.n_snapshots, grid.ny, grid.nx, grid.components))
    for t in range(cfg.n_snapshots):
        if cfg.fluct_scale == 0.0:
            values[t] = mean
            continue
        rng = np.random.default_rng([cfg.seed, t])
        values[t] = mean + cfg.fluct_scale * sigma * correlated_noise(grid, cfg.corr_len, rng)
    return Realization(
        grid=grid,
        direction=cfg.direction,
        run_index=cfg.run_index,
        dt=SNAPSHOT_DT_S,
        u_ref=REFERENCE_SPEED_MS,
        z_over_h=MEASUREMENT_HEIGHT_RATIO,
        values=values,
    )
