"""Reconstruction quality metrics and spatial-feature diagnostics.

The four metrics (geometric mean bias, normalized mean square error,
factor-of-2 fraction, and windowed SSIM) are computed per velocity
component and then arithmetically averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MetricError
from .fields import FieldStatistics, VelocityField, wind_speed

__all__ = [
    "MetricReport",
    "SpatialFeatures",
    "FAC2_TOLERANCE",
    "mg",
    "nmse",
    "fac2",
    "ssim",
    "ssim_batch",
    "evaluate",
    "evaluate_batch",
    "pooled_report",
    "aggregate_reports",
    "spatial_features",
    "speed_class_counts",
]

FAC2_TOLERANCE = 0.005

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    """Per-component and component-averaged scores for one prediction.

    ``mg_points_*`` are the numbers of points surviving the MG sign filter.
    """

    ssim_u: float
    ssim_v: float
    mg_u: float
    mg_v: float
    nmse_u: float
    nmse_v: float
    fac2_u: float
    fac2_v: float
    mg_points_u: int
    mg_points_v: int

    @property
    def ssim(self) -> float:
        return 0.5 * (self.ssim_u + self.ssim_v)

    @property
    def mg(self) -> float:
        return 0.5 * (self.mg_u + self.mg_v)

    @property
    def nmse(self) -> float:
        return 0.5 * (self.nmse_u + self.nmse_v)

    @property
    def fac2(self) -> float:
        return 0.5 * (self.fac2_u + self.fac2_v)

    def as_dict(self) -> dict[str, float]:
        return {
            "ssim_u": self.ssim_u,
            "ssim_v": self.ssim_v,
            "ssim": self.ssim,
            "mg_u": self.mg_u,
            "mg_v": self.mg_v,
            "mg": self.mg,
            "nmse_u": self.nmse_u,
            "nmse_v": self.nmse_v,
            "nmse": self.nmse,
            "fac2_u": self.fac2_u,
            "fac2_v": self.fac2_v,
            "fac2": self.fac2,
            "mg_points_u": self.mg_points_u,
            "mg_points_v": self.mg_points_v,
        }


@dataclass(frozen=True)
class SpatialFeatures:
    """Diagnostics of a time-averaged speed field.

    ``boundary_center_diff``: |mean over the outermost cell ring - mean over
    the 5x5 center block|. ``cv``: std/mean over all cells. ``spatial_gradient``
    is the per-cell central-difference gradient magnitude (one-sided at
    borders); its mean is the scalar summary.
    """

    boundary_center_diff: float
    cv: float
    spatial_gradient: np.ndarray

    @property
    def spatial_gradient_mean(self) -> float:
        return float(self.spatial_gradient.mean())


def mg(observed: np.ndarray, predicted: np.ndarray) -> tuple[float, int]:
    """Geometric mean bias exp(mean(ln(O/P))) over same-sign points.

    Only points with O_i * P_i > 0 enter the mean; returns the bias and the
    number of points used. Raises MetricError when no point survives.
    """
    o = np.asarray(observed, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if o.shape != p.shape:
        raise MetricError(f"length mismatch {o.shape} vs {p.shape}")
    keep = o * p > 0
    n = int(keep.sum())
    if n == 0:
        raise MetricError("MG undefined: no same-sign observation/prediction pairs")
    return float(np.exp(np.mean(np.log(o[keep] / p[keep])))), n


def nmse(observed: np.ndarray, predicted: np.ndarray) -> float:
    """Mean square error normalized by the product of the two means."""
    o = np.asarray(observed, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if o.shape != p.shape:
        raise MetricError(f"length mismatch {o.shape} vs {p.shape}")
    denom = o.mean() * p.mean()
    if denom == 0.0:
        raise MetricError("NMSE undefined: zero-mean denominator")
    return float(np.mean((o - p) ** 2) / denom)


def fac2(observed: np.ndarray, predicted: np.ndarray, tolerance: float = FAC2_TOLERANCE) -> float:
    """Fraction of points within a factor of 2, with a small-value branch.

    A point counts if 0.5 <= P/O <= 2 (ratio evaluated only for O != 0) or if
    both |O| and |P| are within ``tolerance``.
    """
    o = np.asarray(observed, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if o.shape != p.shape:
        raise MetricError(f"length mismatch {o.shape} vs {p.shape}")
    small = (np.abs(o) <= tolerance) & (np.abs(p) <= tolerance)
    within = np.zeros(o.shape, dtype=bool)
    nz = o != 0.0
    ratio = p[nz] / o[nz]
    within[nz] = (ratio >= 0.5) & (ratio <= 2.0)
    return float(np.mean(within | small))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Structural similarity of two scalar grids.

    Gaussian 7x7 window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2 where L
    defaults to the value range of ``a`` (the ground truth); averaged over
    window positions fully inside the grid. Symmetric in its arguments when
    ``data_range`` is given explicitly.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(ssim_batch(a[None], b[None], data_range)[0])


def ssim_batch(a: np.ndarray, b: np.ndarray, data_range=None) -> np.ndarray:
    """Vectorized SSIM over a stack of scalar grids (n, ny, nx).

    ``data_range`` may be a scalar shared by all grids, an (n,) array of
    per-grid ranges, or None for each grid's own first-argument range.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-2] < SSIM_WINDOW or a.shape[-1] < SSIM_WINDOW:
        raise MetricError(f"grid smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if data_range is None:
        rng = a.max(axis=(-2, -1)) - a.min(axis=(-2, -1))
    else:
        rng = np.asarray(data_range, dtype=np.float64)
    rng = np.maximum(rng, np.finfo(np.float64).tiny)
    rng = np.asarray(rng).reshape(tuple(np.shape(rng)) + (1, 1))
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2

    win = _WINDOW
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW), axis=(-2, -1))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW), axis=(-2, -1))
    mu_a = np.einsum("...ij,ij->...", wa, win)
    mu_b = np.einsum("...ij,ij->...", wb, win)
    ex_aa = np.einsum("...ij,ij->...", wa * wa, win)
    ex_bb = np.einsum("...ij,ij->...", wb * wb, win)
    ex_ab = np.einsum("...ij,ij->...", wa * wb, win)
    var_a = ex_aa - mu_a**2
    var_b = ex_bb - mu_b**2
    cov = ex_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean(axis=(-2, -1))


def evaluate(
    pred: VelocityField,
    truth: VelocityField,
    tolerance: float = FAC2_TOLERANCE,
    data_range: tuple[float, float] | None = None,
) -> MetricReport:
    """Score a prediction against ground truth, component-wise then averaged.

    ``data_range`` optionally pins the per-component SSIM dynamic range (for
    consistent constants across an evaluation set); by default each call uses
    the truth component's own range.
    """
    if pred.grid != truth.grid:
        raise MetricError("prediction and truth grids differ")
    ranges = data_range or (None, None)
    mg_u, n_u = mg(truth.u, pred.u)
    mg_v, n_v = mg(truth.v, pred.v)
    return MetricReport(
        ssim_u=ssim(truth.u, pred.u, ranges[0]),
        ssim_v=ssim(truth.v, pred.v, ranges[1]),
        mg_u=mg_u,
        mg_v=mg_v,
        nmse_u=nmse(truth.u, pred.u),
        nmse_v=nmse(truth.v, pred.v),
        fac2_u=fac2(truth.u, pred.u, tolerance),
        fac2_v=fac2(truth.v, pred.v, tolerance),
        mg_points_u=n_u,
        mg_points_v=n_v,
    )


def evaluate_batch(
    pred_values: np.ndarray,
    truth_values: np.ndarray,
    tolerance: float = FAC2_TOLERANCE,
    data_range: tuple[float, float] | None = None,
) -> list[MetricReport]:
    """Vectorized per-snapshot reports for stacked (n, ny, nx, 2) fields.

    Unlike :func:`mg`, snapshots whose MG filter set is empty get NaN (with a
    zero count) instead of raising, so long evaluation sweeps keep going.
    """
    pred_values = np.asarray(pred_values, dtype=np.float64)
    truth_values = np.asarray(truth_values, dtype=np.float64)
    if pred_values.shape != truth_values.shape:
        raise MetricError(f"shape mismatch {pred_values.shape} vs {truth_values.shape}")
    n = pred_values.shape[0]
    per_comp: dict[str, np.ndarray] = {}
    counts = {}
    for c, name in enumerate("uv"):
        o = truth_values[..., c].reshape(n, -1)
        p = pred_values[..., c].reshape(n, -1)
        keep = o * p > 0
        n_keep = keep.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            logr = np.where(keep, np.log(np.where(keep, o / p, 1.0)), 0.0)
            mg_vals = np.where(n_keep > 0, np.exp(logr.sum(axis=1) / np.maximum(n_keep, 1)), np.nan)
            den = o.mean(axis=1) * p.mean(axis=1)
            nmse_vals = np.where(den != 0.0, ((o - p) ** 2).mean(axis=1) / den, np.nan)
        small = (np.abs(o) <= tolerance) & (np.abs(p) <= tolerance)
        within = np.zeros_like(small)
        nz = o != 0.0
        ratio = np.where(nz, p / np.where(nz, o, 1.0), 0.0)
        within[nz] = (ratio >= 0.5)[nz] & (ratio <= 2.0)[nz]
        fac2_vals = (within | small).mean(axis=1)
        rng_c = data_range[c] if data_range is not None else None
        ssim_vals = ssim_batch(truth_values[..., c], pred_values[..., c], rng_c)
        per_comp[f"ssim_{name}"] = ssim_vals
        per_comp[f"mg_{name}"] = mg_vals
        per_comp[f"nmse_{name}"] = nmse_vals
        per_comp[f"fac2_{name}"] = fac2_vals
        counts[f"mg_points_{name}"] = n_keep
    return [
        MetricReport(
            ssim_u=float(per_comp["ssim_u"][i]),
            ssim_v=float(per_comp["ssim_v"][i]),
            mg_u=float(per_comp["mg_u"][i]),
            mg_v=float(per_comp["mg_v"][i]),
            nmse_u=float(per_comp["nmse_u"][i]),
            nmse_v=float(per_comp["nmse_v"][i]),
            fac2_u=float(per_comp["fac2_u"][i]),
            fac2_v=float(per_comp["fac2_v"][i]),
            mg_points_u=int(counts["mg_points_u"][i]),
            mg_points_v=int(counts["mg_points_v"][i]),
        )
        for i in range(n)
    ]


def pooled_report(
    pred_values: np.ndarray,
    truth_values: np.ndarray,
    tolerance: float = FAC2_TOLERANCE,
    data_range: tuple[float, float] | None = None,
) -> dict[str, float]:
    """One report over a whole stack: MG/NMSE/FAC2 pool every space-time
    point (the metric sums run over the full evaluation set, which keeps the
    mean-normalized denominators away from zero), SSIM is the per-snapshot
    mean."""
    pred_values = np.asarray(pred_values, dtype=np.float64)
    truth_values = np.asarray(truth_values, dtype=np.float64)
    if pred_values.shape != truth_values.shape:
        raise MetricError(f"shape mismatch {pred_values.shape} vs {truth_values.shape}")
    out: dict[str, float] = {}
    for c, name in enumerate("uv"):
        o = truth_values[..., c].ravel()
        p = pred_values[..., c].ravel()
        mg_val, n_used = mg(o, p)
        out[f"mg_{name}"] = mg_val
        out[f"mg_points_{name}"] = float(n_used)
        out[f"nmse_{name}"] = nmse(o, p)
        out[f"fac2_{name}"] = fac2(o, p, tolerance)
        rng_c = data_range[c] if data_range is not None else None
        out[f"ssim_{name}"] = float(np.mean(ssim_batch(truth_values[..., c], pred_values[..., c], rng_c)))
    for key in ("ssim", "mg", "nmse", "fac2"):
        out[key] = 0.5 * (out[f"{key}_u"] + out[f"{key}_v"])
    out["n_snapshots"] = float(pred_values.shape[0])
    return out


def aggregate_reports(reports: list[MetricReport]) -> dict[str, float]:
    """Mean of per-snapshot metrics (NaN-tolerant for MG/NMSE), summed counts."""
    if not reports:
        raise MetricError("cannot aggregate an empty report list")
    out: dict[str, float] = {}
    for key in ("ssim_u", "ssim_v", "ssim", "mg_u", "mg_v", "mg", "nmse_u", "nmse_v", "nmse", "fac2_u", "fac2_v", "fac2"):
        vals = np.array([getattr(r, key) for r in reports])
        with np.errstate(invalid="ignore"):
            out[key] = float(np.nanmean(vals)) if np.any(np.isfinite(vals)) else float("nan")
    out["mg_points_u"] = float(sum(r.mg_points_u for r in reports))
    out["mg_points_v"] = float(sum(r.mg_points_v for r in reports))
    out["n_snapshots"] = float(len(reports))
    return out


def spatial_features(stats: FieldStatistics) -> SpatialFeatures:
    """Boundary-center difference, coefficient of variation, gradient field."""
    ws = np.asarray(stats.ws_mean, dtype=np.float64)
    ny, nx = ws.shape
    ring = np.zeros_like(ws, dtype=bool)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    cy0, cx0 = (ny - 5) // 2, (nx - 5) // 2
    center = ws[cy0 : cy0 + 5, cx0 : cx0 + 5]
    boundary_center = abs(float(ws[ring].mean()) - float(center.mean()))
    mean = float(ws.mean())
    cv = float(ws.std() / mean) if mean != 0.0 else 0.0
    gy, gx = np.gradient(ws)
    grad = np.sqrt(gx**2 + gy**2)
    return SpatialFeatures(boundary_center_diff=boundary_center, cv=cv, spatial_gradient=grad)


def speed_class_counts(snapshots, threshold: float = 0.6) -> tuple[int, int]:
    """Count space-time points with wind speed >= threshold vs below.

    ``snapshots`` may be a Realization, an (n, ny, nx, 2) array, or a list of
    VelocityField.
    """
    if hasattr(snapshots, "values") and isinstance(snapshots.values, np.ndarray):
        values = snapshots.values
    elif isinstance(snapshots, np.ndarray):
        values = snapshots
    else:
        values = np.stack([f.values for f in snapshots])
    speeds = wind_speed(values)
    high = int(np.count_nonzero(speeds >= threshold))
    return high, speeds.size - high
