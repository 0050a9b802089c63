"""Velocity-field data model, dataset I/O, and temporal statistics.

A dataset realization is stored as two files: a JSON metadata header and a
raw payload of 32-bit little-endian floats ordered ``[t][y][x][component]``.
All in-memory velocities are dimensionless (normalized by the reference
speed); the ``normalized`` header flag controls whether the loader divides
by ``u_ref_ms``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "GridSpec",
    "VelocityField",
    "Realization",
    "FieldStatistics",
    "load_realization",
    "save_realization",
    "wind_speed",
    "temporal_statistics",
    "vectorize",
    "unvectorize",
]


@dataclass(frozen=True)
class GridSpec:
    """Rectangular measurement grid; the reference configuration is 15x15x2."""

    nx: int = 15
    ny: int = 15
    components: int = 2

    def __post_init__(self) -> None:
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if self.components != 2:
            raise ConfigError(f"exactly 2 velocity components supported, got {self.components}")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dof(self) -> int:
        """Spatial degrees of freedom: nx * ny * components."""
        return self.nx * self.ny * self.components


@dataclass(frozen=True)
class VelocityField:
    """One dimensionless (u, v) field on a grid; values indexed [y][x][component]."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        expected = (self.grid.ny, self.grid.nx, self.grid.components)
        if v.shape != expected:
            raise DataError(f"field shape {v.shape} does not match grid {expected}")
        if not np.all(np.isfinite(v)):
            raise DataError("velocity field contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def u(self) -> np.ndarray:
        return self.values[:, :, 0]

    @property
    def v(self) -> np.ndarray:
        return self.values[:, :, 1]


@dataclass
class Realization:
    """A timestamped snapshot sequence for one wind direction and run.

    ``values`` stacks all snapshots as (n, ny, nx, components); snapshots are
    treated as immutable after construction and every operation on them is
    pure, so realizations are safe to share across threads.
    """

    grid: GridSpec
    direction: float
    run_index: int
    dt: float
    u_ref: float
    z_over_h: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or v.shape[1:] != (self.grid.ny, self.grid.nx, self.grid.components):
            raise DataError(f"realization payload shape {v.shape} does not match grid")
        if not np.all(np.isfinite(v)):
            raise DataError("realization contains non-finite values")
        if self.dt <= 0:
            raise DataError(f"dt must be positive, got {self.dt}")
        if self.u_ref <= 0:
            raise DataError(f"u_ref must be positive, got {self.u_ref}")
        if self.run_index < 1:
            raise DataError(f"run_index must be >= 1, got {self.run_index}")
        self.values = v

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_snapshots(self) -> int:
        return self.values.shape[0]

    def snapshot(self, t: int) -> VelocityField:
        return VelocityField(self.grid, self.values[t])

    @property
    def snapshots(self) -> list[VelocityField]:
        return [VelocityField(self.grid, self.values[t]) for t in range(len(self))]

    @property
    def key(self) -> tuple[float, int]:
        """(direction, run_index) identity used by split plans."""
        return (self.direction, self.run_index)


@dataclass(frozen=True)
class FieldStatistics:
    """Per-cell temporal mean/std of wind speed and the derived variance map."""

    ws_mean: np.ndarray
    ws_std: np.ndarray
    variance_map: np.ndarray


_HEADER_KEYS = {
    "grid",
    "n_snapshots",
    "dt_seconds",
    "u_ref_ms",
    "z_over_h",
    "direction_deg",
    "run_index",
    "normalized",
    "payload",
}


def load_realization(path: str | Path) -> Realization:
    """Load a realization from its JSON metadata file.

    The payload file named in the header is resolved relative to the metadata
    file. Raw (m/s) payloads are divided by ``u_ref_ms`` on load so in-memory
    values are always dimensionless.
    """
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read metadata {path}: {exc}") from exc
    missing = _HEADER_KEYS - set(header)
    if missing:
        raise DataError(f"metadata {path} missing keys: {sorted(missing)}")
    try:
        g = header["grid"]
        grid = GridSpec(int(g["nx"]), int(g["ny"]), int(g["components"]))
        n = int(header["n_snapshots"])
        dt = float(header["dt_seconds"])
        u_ref = float(header["u_ref_ms"])
        z_over_h = float(header["z_over_h"])
        direction = float(header["direction_deg"])
        run_index = int(header["run_index"])
        normalized = bool(header["normalized"])
        payload_name = str(header["payload"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed metadata {path}: {exc}") from exc

    payload_path = path.parent / payload_name
    try:
        raw = np.fromfile(payload_path, dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read payload {payload_path}: {exc}") from exc
    expected = n * grid.dof
    if raw.size != expected:
        raise DataError(
            f"payload {payload_path} holds {raw.size} values, header implies {expected}"
        )
    values = raw.astype(np.float64).reshape(n, grid.ny, grid.nx, grid.components)
    if not normalized:
        values = values / u_ref
    return Realization(
        grid=grid,
        direction=direction,
        run_index=run_index,
        dt=dt,
        u_ref=u_ref,
        z_over_h=z_over_h,
        values=values,
    )


def save_realization(r: Realization, path: str | Path) -> Path:
    """Write metadata JSON at ``path`` and the f32 payload next to it.

    Always writes dimensionless values with ``normalized: true`` so a
    load -> save -> load round trip is bit-identical on the payload.
    """
    path = Path(path)
    payload_name = path.stem + ".bin"
    header = {
        "grid": {"nx": r.grid.nx, "ny": r.grid.ny, "components": r.grid.components},
        "n_snapshots": len(r),
        "dt_seconds": r.dt,
        "u_ref_ms": r.u_ref,
        "z_over_h": r.z_over_h,
        "direction_deg": r.direction,
        "run_index": r.run_index,
        "normalized": True,
        "payload": payload_name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    r.values.astype("<f4").tofile(path.parent / payload_name)
    return path


def wind_speed(field: VelocityField | np.ndarray) -> np.ndarray:
    """Per-cell horizontal speed sqrt(u^2 + v^2) of a dimensionless field."""
    values = field.values if isinstance(field, VelocityField) else np.asarray(field)
    return np.sqrt(values[..., 0] ** 2 + values[..., 1] ** 2)


def temporal_statistics(r: Realization) -> FieldStatistics:
    """Per-cell temporal mean and population (1/N) std of wind speed.

    Population rather than sample normalization: these are descriptive field
    statistics and are used consistently everywhere in the toolkit.
    """
    if len(r) < 2:
        raise DataError(f"temporal statistics need >= 2 snapshots, got {len(r)}")
    speeds = wind_speed(r.values)  # (n, ny, nx)
    mean = speeds.mean(axis=0)
    std = speeds.std(axis=0)  # ddof=0
    return FieldStatistics(ws_mean=mean, ws_std=std, variance_map=std**2)


def vectorize(f: VelocityField) -> np.ndarray:
    """Flatten to a dof-vector: index = component*(nx*ny) + y*nx + x.

    All u-values first, then all v-values, row-major within a component.
    This ordering is the contract shared by the POD/QR machinery.
    """
    # values is (ny, nx, c); moving the component axis first and raveling
    # row-major yields exactly c*(nx*ny) + y*nx + x.
    return np.moveaxis(f.values, -1, 0).ravel().copy()


def unvectorize(vec: np.ndarray, grid: GridSpec | None = None) -> VelocityField:
    """Inverse of :func:`vectorize`."""
    grid = grid or GridSpec()
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (grid.dof,):
        raise DataError(f"vector length {vec.shape} does not match dof {grid.dof}")
    values = np.moveaxis(vec.reshape(grid.components, grid.ny, grid.nx), 0, -1)
    return VelocityField(grid, values)
