"""Sensor layout construction and data-driven placement ranking.

Three placement routes: a Voronoi-uniform baseline (Lloyd's iteration on the
lattice), random +/-1-cell perturbation of an existing layout, and an optimal
ranking obtained from QR column pivoting on the transposed POD mode matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fields import GridSpec, VelocityField, vectorize

__all__ = [
    "SensorLayout",
    "PODBasis",
    "SensorRanking",
    "DEFAULT_POD_MODES",
    "uniform_layout",
    "perturb_layout",
    "compute_pod",
    "qr_rank_sensors",
    "layout_from_ranking",
    "save_layout",
    "load_layout",
]

# Retained POD modes unless overridden.
DEFAULT_POD_MODES = 40

_LLOYD_MAX_ITER = 100
_PERTURB_MAX_REDRAWS = 50


@dataclass(frozen=True)
class SensorLayout:
    """k distinct grid cells; a sensor reads both velocity components.

    ``cells`` is an ordered list of (x, y) integer pairs. The induced
    observation operator extracts, per snapshot, the 2k values
    ``field.values[y, x, :]`` in cell order.
    """

    grid: GridSpec
    cells: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        cells = tuple((int(x), int(y)) for x, y in self.cells)
        if not 1 <= len(cells) <= self.grid.n_cells:
            raise ConfigError(f"k must be in [1, {self.grid.n_cells}], got {len(cells)}")
        for x, y in cells:
            if not (0 <= x < self.grid.nx and 0 <= y < self.grid.ny):
                raise ConfigError(f"cell ({x}, {y}) outside {self.grid.nx}x{self.grid.ny} grid")
        if len(set(cells)) != len(cells):
            raise ConfigError("sensor cells must be distinct")
        object.__setattr__(self, "cells", cells)

    @property
    def k(self) -> int:
        return len(self.cells)

    def observe(self, values: np.ndarray) -> np.ndarray:
        """Sensor readings from field values (..., ny, nx, 2) -> (..., k, 2)."""
        xs = np.array([c[0] for c in self.cells])
        ys = np.array([c[1] for c in self.cells])
        return np.asarray(values)[..., ys, xs, :]

    def observation_matrix(self) -> np.ndarray:
        """Dense H (2k x dof) acting on vectorized fields (u block then v block)."""
        n_cells = self.grid.n_cells
        h = np.zeros((2 * self.k, self.grid.dof))
        for i, (x, y) in enumerate(self.cells):
            cell = y * self.grid.nx + x
            h[2 * i, cell] = 1.0
            h[2 * i + 1, n_cells + cell] = 1.0
        return h


@dataclass(frozen=True)
class PODBasis:
    """Mean field, orthonormal spatial modes, and singular values.

    ``rank_deficient`` flags that the requested mode count exceeded the data
    rank and was shrunk.
    """

    mean: np.ndarray
    modes: np.ndarray  # (dof, r), orthonormal columns
    singular_values: np.ndarray  # (r,), nonincreasing
    energy_captured: float
    rank_deficient: bool = False

    @property
    def r(self) -> int:
        return self.modes.shape[1]


@dataclass(frozen=True)
class SensorRanking:
    """Permutation of all dof column indices, most informative first."""

    grid: GridSpec
    indices: tuple[int, ...]
    cells: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self) -> None:
        if sorted(self.indices) != list(range(self.grid.dof)):
            raise ConfigError("ranking must be a permutation of 0..dof-1")
        # Column index -> spatial cell (index mod n_cells), first occurrence
        # kept: a physical sensor reads both components of its cell.
        seen: set[int] = set()
        cells = []
        for idx in self.indices:
            cell = idx % self.grid.n_cells
            if cell not in seen:
                seen.add(cell)
                cells.append((cell % self.grid.nx, cell // self.grid.nx))
        object.__setattr__(self, "cells", tuple(cells))


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ centers chosen among the lattice points."""
    n = points.shape[0]
    centers = np.empty((k, 2))
    first = rng.integers(n)
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining points coincide with chosen centers; take the
            # lowest-index unused point to keep centers distinct.
            used = {tuple(c) for c in centers[:i]}
            for p in points:
                if tuple(p) not in used:
                    centers[i] = p
                    break
            d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
            continue
        probs = d2 / total
        choice = rng.choice(n, p=probs)
        centers[i] = points[choice]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def uniform_layout(grid: GridSpec, k: int, seed: int) -> SensorLayout:
    """Voronoi-uniform placement: Lloyd's iteration on the cell lattice.

    Seeded k-means++ initialization, Euclidean assignment, centroid update,
    at most 100 iterations or until assignments stop changing; each sensor is
    the lattice cell nearest its region centroid. Deterministic per seed.
    """
    if not 1 <= k <= grid.n_cells:
        raise ConfigError(f"k must be in [1, {grid.n_cells}], got {k}")
    xs, ys = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny))
    points = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    if k == grid.n_cells:
        return SensorLayout(grid, tuple((int(x), int(y)) for x, y in points))

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(points, k, rng)
    assign = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(_LLOYD_MAX_ITER):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = points[new_assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # Reseed an empty region at the point farthest from its center.
                worst = d2.min(axis=1).argmax()
                centers[j] = points[worst]
                new_assign[worst] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    # Snap each centroid to the nearest free lattice cell (ties and
    # collisions resolved by lattice index order, so output stays distinct).
    taken: set[int] = set()
    cells = []
    for j in range(k):
        d2 = ((points - centers[j]) ** 2).sum(axis=1)
        for idx in np.argsort(d2, kind="stable"):
            if idx not in taken:
                taken.add(int(idx))
                cells.append((int(points[idx, 0]), int(points[idx, 1])))
                break
    return SensorLayout(grid, tuple(cells))


def perturb_layout(layout: SensorLayout, seed: int) -> SensorLayout:
    """Offset each sensor by independent uniform draws from {-1, 0, +1} per axis.

    Offsets are clamped to the domain; a collision with an already-placed
    perturbed cell triggers a redraw of that cell's offset (up to 50 times),
    after which the original position is kept. As a last resort (original
    also taken) the nearest free cell is used so the result is always valid.
    """
    rng = np.random.default_rng(seed)
    grid = layout.grid
    placed: set[tuple[int, int]] = set()
    cells = []
    for x, y in layout.cells:
        chosen = None
        for _ in range(_PERTURB_MAX_REDRAWS):
            dx, dy = rng.integers(-1, 2, size=2)
            cand = (
                int(np.clip(x + dx, 0, grid.nx - 1)),
                int(np.clip(y + dy, 0, grid.ny - 1)),
            )
            if cand not in placed:
                chosen = cand
                break
        if chosen is None:
            chosen = (x, y)
            if chosen in placed:
                chosen = _nearest_free_cell(grid, x, y, placed)
        placed.add(chosen)
        cells.append(chosen)
    return SensorLayout(grid, tuple(cells))


def _nearest_free_cell(grid: GridSpec, x: int, y: int, taken: set[tuple[int, int]]) -> tuple[int, int]:
    best = None
    best_d = np.inf
    for cy in range(grid.ny):
        for cx in range(grid.nx):
            if (cx, cy) in taken:
                continue
            d = (cx - x) ** 2 + (cy - y) ** 2
            if d < best_d:
                best_d = d
                best = (cx, cy)
    if best is None:
        raise ConfigError("no free cell available")
    return best


def compute_pod(snapshots: list[VelocityField] | np.ndarray, r: int) -> PODBasis:
    """POD of a snapshot set: SVD of the mean-centered (N x dof) data matrix.

    ``modes`` holds the first r right-singular directions as columns;
    ``energy_captured`` is the retained fraction of squared singular values.
    If r exceeds the numerical rank the basis is shrunk and flagged.
    """
    if isinstance(snapshots, np.ndarray):
        if snapshots.ndim == 4:
            # (n, ny, nx, 2) -> vectorize ordering (u block then v block)
            data = np.moveaxis(snapshots, -1, 1).reshape(snapshots.shape[0], -1)
        elif snapshots.ndim == 2:
            data = snapshots
        else:
            raise ConfigError(f"snapshot array must be 2-d or 4-d, got {snapshots.ndim}-d")
    else:
        data = np.stack([vectorize(f) for f in snapshots])
    n = data.shape[0]
    if r < 1:
        raise ConfigError(f"r must be >= 1, got {r}")
    if n < r:
        raise ConfigError(f"need at least r={r} snapshots, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    # Rank tolerance is anchored to the raw data magnitude so a constant
    # snapshot set (centered matrix = pure rounding noise) reads as rank 0.
    scale = max(float(s[0]) if s.size else 0.0, float(np.abs(data).max()))
    tol = scale * max(centered.shape) * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(s > tol))
    rank_deficient = r > rank
    r_eff = min(r, rank)
    total = float((s**2).sum())
    kept = float((s[:r_eff] ** 2).sum())
    energy = kept / total if total > 0 else 1.0
    return PODBasis(
        mean=mean,
        modes=vt[:r_eff].T.copy(),
        singular_values=s[:r_eff].copy(),
        energy_captured=energy,
        rank_deficient=rank_deficient,
    )


def _pivot_order(mat: np.ndarray) -> list[int]:
    """Column pivot order of QR with column pivoting (greedy residual norms).

    Modified Gram-Schmidt with norm downdating; this is exactly the greedy
    procedure "pick the column of largest residual norm, orthogonalize the
    rest against it". Ties, and all columns once residual norms fall below a
    relative tolerance (rank exhausted), are ordered by lower column index.
    """
    a = np.array(mat, dtype=np.float64)
    r_dim, m = a.shape
    norms_sq = (a**2).sum(axis=0)
    scale = float(np.sqrt(norms_sq.max())) if m else 0.0
    tol_sq = (1e-12 * scale) ** 2 if scale > 0 else 0.0
    remaining = list(range(m))
    order: list[int] = []
    for _ in range(min(r_dim, m)):
        live = [j for j in remaining if norms_sq[j] > tol_sq]
        if not live:
            break
        # Largest residual norm; ties broken by lower column index. The small
        # relative slack makes the tie rule robust to fp rounding.
        best = live[0]
        for j in live[1:]:
            if norms_sq[j] > norms_sq[best] * (1.0 + 1e-12):
                best = j
        order.append(best)
        remaining.remove(best)
        q = a[:, best] / np.sqrt(norms_sq[best])
        coeff = q @ a[:, remaining]
        a[:, remaining] -= np.outer(q, coeff)
        norms_sq[remaining] = (a[:, remaining] ** 2).sum(axis=0)
    order.extend(remaining)  # rank exhausted: index order
    return order


def qr_rank_sensors(basis: PODBasis, grid: GridSpec | None = None) -> SensorRanking:
    """Rank all dof columns by QR column pivoting on the transposed mode matrix."""
    grid = grid or GridSpec()
    if basis.modes.shape[0] != grid.dof:
        raise ConfigError(f"basis dof {basis.modes.shape[0]} does not match grid dof {grid.dof}")
    order = _pivot_order(basis.modes.T)
    return SensorRanking(grid, tuple(order))


def layout_from_ranking(ranking: SensorRanking, k: int) -> SensorLayout:
    """Top-k distinct cells of a ranking, in ranking order."""
    if k > len(ranking.cells):
        raise ConfigError(f"k={k} exceeds {len(ranking.cells)} distinct ranked cells")
    if k < 1:
        raise ConfigError("k must be >= 1")
    return SensorLayout(ranking.grid, ranking.cells[:k])


def save_layout(layout: SensorLayout, path: str | Path, provenance: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "grid": {"nx": layout.grid.nx, "ny": layout.grid.ny, "components": layout.grid.components},
        "cells": [[x, y] for x, y in layout.cells],
        "provenance": provenance or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_layout(path: str | Path) -> SensorLayout:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        g = doc["grid"]
        grid = GridSpec(int(g["nx"]), int(g["ny"]), int(g["components"]))
        cells = tuple((int(x), int(y)) for x, y in doc["cells"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read layout {path}: {exc}") from exc
    return SensorLayout(grid, cells)
