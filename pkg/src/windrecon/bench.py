"""Experiment orchestration: splits, the benchmark matrix, robustness and
averaging studies, and report emission.

A matrix cell is one (method, split, placement, k) combination. Perturbed
placements reuse the model trained on the corresponding unperturbed layout
(deployment-drift semantics): only the test-time sensor positions move.
Completed cells are content-hashed and skipped on rerun.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fields import GridSpec, Realization, VelocityField, temporal_statistics
from .kriging import KrigingReconstructor, select_length
from .metrics import MetricReport, aggregate_reports, evaluate_batch, pooled_report, ssim
from .neural.models import ArchitectureSpec, encode_input_batch
from .neural.training import (
    TrainConfig,
    TrainedModel,
    build_training_set,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
    train,
)
from .placement import (
    DEFAULT_POD_MODES,
    SensorLayout,
    compute_pod,
    layout_from_ranking,
    perturb_layout,
    qr_rank_sensors,
    uniform_layout,
)

__all__ = [
    "SplitPlan",
    "BenchCell",
    "BenchConfig",
    "RobustnessRow",
    "build_split",
    "default_cells",
    "run_matrix",
    "robustness_table",
    "averaging_compare",
    "realization_similarity",
    "report",
]

METHODS = ("kriging", "unet", "cwgan", "vitae")
SPLITS = ("sdt", "mdt")
PLACEMENTS = ("uniform", "perturbed", "qr")
# Extra placement used by the robustness study: the QR layout under the same
# +/-1-cell perturbation protocol.
QR_PERTURBED = "qr_perturbed"
K_LADDER = (5, 10, 15, 20, 25, 30)

RESULT_COLUMNS = (
    "method",
    "split",
    "placement",
    "k",
    "seed",
    "n_snapshots",
    "ssim_u",
    "ssim_v",
    "ssim",
    "mg_u",
    "mg_v",
    "mg",
    "nmse_u",
    "nmse_v",
    "nmse",
    "fac2_u",
    "fac2_v",
    "fac2",
    "mg_points_u",
    "mg_points_v",
)


@dataclass(frozen=True)
class SplitPlan:
    """Realization-level train/test assignment; no snapshot mixing."""

    strategy: str
    train_keys: tuple[tuple[float, int], ...]
    test_keys: tuple[tuple[float, int], ...]
    val_fraction: float = 0.2
    split_seed: int = 42


@dataclass(frozen=True)
class BenchCell:
    method: str
    split: str
    placement: str
    k: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        if self.placement not in PLACEMENTS + (QR_PERTURBED,):
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class BenchConfig:
    """Knobs of one matrix run; defaults reproduce the full protocol."""

    k_values: tuple[int, ...] = K_LADDER
    methods: tuple[str, ...] = METHODS
    splits: tuple[str, ...] = SPLITS
    placements: tuple[str, ...] = PLACEMENTS
    layout_seed: int = 11
    perturb_seed: int = 17
    model_seed: int = 101
    pod_modes: int = DEFAULT_POD_MODES
    kriging_calibration_snapshots: int = 100
    eval_stride: int = 1
    per_snapshot_rows: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)
    # Optional CWGAN-specific override (the adversarial loop has a very
    # different cost profile at desk scale).
    cwgan_train: TrainConfig | None = None

    def train_for(self, method: str) -> TrainConfig:
        if method == "cwgan" and self.cwgan_train is not None:
            return self.cwgan_train
        return self.train

    def as_dict(self) -> dict:
        doc = asdict(self)
        return doc


@dataclass(frozen=True)
class RobustnessRow:
    """Retention (%) under perturbation for standard vs QR placements."""

    method: str
    split: str
    standard: dict[str, float]
    qr: dict[str, float]
    qr_improvement: dict[str, float]


def build_split(realizations: list[Realization], strategy: str) -> SplitPlan:
    """SDT: all 0-degree runs train; MDT: run #1 of each direction trains."""
    strategy = strategy.lower()
    if strategy not in SPLITS:
        raise ConfigError(f"unknown split strategy {strategy!r}")
    by_dir: dict[float, list[Realization]] = {}
    for r in realizations:
        by_dir.setdefault(r.direction, []).append(r)
    for runs in by_dir.values():
        runs.sort(key=lambda r: r.run_index)
    if len(by_dir) < 2:
        raise DataError(f"{strategy.upper()} needs realizations from at least 2 directions")
    if strategy == "sdt":
        if 0.0 not in by_dir:
            raise DataError("SDT needs 0-degree realizations for training")
        train_keys = tuple(r.key for r in by_dir[0.0])
        test_keys = tuple(r.key for d in sorted(by_dir) if d != 0.0 for r in by_dir[d])
    else:
        short = [d for d, runs in by_dir.items() if len(runs) < 2]
        if short:
            raise DataError(f"MDT needs >= 2 realizations per direction, short: {sorted(short)}")
        train_keys = tuple(by_dir[d][0].key for d in sorted(by_dir))
        test_keys = tuple(r.key for d in sorted(by_dir) for r in by_dir[d][1:])
    return SplitPlan(strategy=strategy, train_keys=train_keys, test_keys=test_keys)


def default_cells(config: BenchConfig) -> list[BenchCell]:
    return [
        BenchCell(method=m, split=s, placement=p, k=k, seed=config.model_seed)
        for m in config.methods
        for s in config.splits
        for p in config.placements
        for k in config.k_values
    ]


def _select(realizations: list[Realization], keys) -> list[Realization]:
    table = {r.key: r for r in realizations}
    return [table[k] for k in keys]


def _data_fingerprint(realizations: list[Realization]) -> str:
    h = hashlib.sha256()
    for r in sorted(realizations, key=lambda r: r.key):
        h.update(json.dumps([r.direction, r.run_index, len(r)]).encode())
        h.update(np.ascontiguousarray(r.values.astype("<f4")).tobytes())
    return h.hexdigest()


class _MatrixContext:
    """Shared, lazily computed state for one matrix run: splits, layouts,
    POD rankings, trained models, and calibrated Kriging lengths."""

    def __init__(self, realizations: list[Realization], config: BenchConfig, out_dir: Path):
        self.realizations = realizations
        self.config = config
        self.out_dir = out_dir
        self.grid = realizations[0].grid
        self._splits: dict[str, SplitPlan] = {}
        self._rankings: dict[str, object] = {}
        self._layouts: dict[tuple, SensorLayout] = {}
        self._models: dict[tuple, TrainedModel] = {}
        self._krig: dict[tuple, KrigingReconstructor] = {}
        self._train_arrays: dict[str, np.ndarray] = {}

    def split(self, name: str) -> SplitPlan:
        if name not in self._splits:
            self._splits[name] = build_split(self.realizations, name)
        return self._splits[name]

    def train_values(self, split: str) -> np.ndarray:
        """All training snapshots of a split stacked (n, ny, nx, 2)."""
        if split not in self._train_arrays:
            runs = _select(self.realizations, self.split(split).train_keys)
            self._train_arrays[split] = np.concatenate([r.values for r in runs])
        return self._train_arrays[split]

    def test_values(self, split: str) -> np.ndarray:
        runs = _select(self.realizations, self.split(split).test_keys)
        values = np.concatenate([r.values for r in runs])
        return values[:: self.config.eval_stride]

    def base_layout(self, split: str, placement: str, k: int) -> SensorLayout:
        """The unperturbed layout a placement derives from."""
        base = "qr" if placement in ("qr", QR_PERTURBED) else "uniform"
        key = (split, base, k)
        if key not in self._layouts:
            if base == "uniform":
                layout = uniform_layout(self.grid, k, self.config.layout_seed)
            else:
                if split not in self._rankings:
                    basis = compute_pod(self.train_values(split), self.config.pod_modes)
                    self._rankings[split] = qr_rank_sensors(basis, self.grid)
                layout = layout_from_ranking(self._rankings[split], k)
            self._layouts[key] = layout
        return self._layouts[key]

    def eval_layout(self, split: str, placement: str, k: int) -> SensorLayout:
        layout = self.base_layout(split, placement, k)
        if placement in ("perturbed", QR_PERTURBED):
            return perturb_layout(layout, self.config.perturb_seed)
        return layout

    def neural_model(self, method: str, split: str, placement: str, k: int, seed: int) -> TrainedModel:
        base = "qr" if placement in ("qr", QR_PERTURBED) else "uniform"
        key = (method, split, base, k, seed)
        if key in self._models:
            self._models[key] = self._models.pop(key)  # refresh LRU order
            return self._models[key]
        ckpt = self.out_dir / "models" / f"{method}_{split}_{base}_k{k}_s{seed}.json"
        if ckpt.exists():
            tm = load_checkpoint(ckpt)
        else:
            layout = self.base_layout(split, placement, k)
            runs = _select(self.realizations, self.split(split).train_keys)
            inputs, targets = build_training_set(runs, layout)
            spec = getattr(ArchitectureSpec, method)()
            tm = train(spec, inputs, targets, self.config.train_for(method), seed=seed)
            save_checkpoint(tm, ckpt)
        self._models[key] = tm
        # Cap resident models; evicted ones reload from their checkpoints.
        while len(self._models) > 14:
            self._models.pop(next(iter(self._models)))
        return tm

    def kriging_models(self, split: str, placement: str, k: int):
        """Variogram lengths selected on the base layout's calibration readings."""
        base = "qr" if placement in ("qr", QR_PERTURBED) else "uniform"
        key = (split, base, k)
        if key in self._krig:
            return self._krig[key]
        layout = self.base_layout(split, placement, k)
        n_cal = self.config.kriging_calibration_snapshots
        runs = _select(self.realizations, self.split(split).train_keys)
        readings = np.concatenate([layout.observe(r.values[:n_cal]) for r in runs])
        models = tuple(select_length(layout, readings[:, :, c]) for c in range(2))
        self._krig[key] = models
        return models


def _cell_hash(cell: BenchCell, config: BenchConfig, data_fp: str) -> str:
    doc = {"cell": asdict(cell), "config": config.as_dict(), "data": data_fp}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _evaluate_cell(ctx: _MatrixContext, cell: BenchCell) -> tuple[dict, list[MetricReport]]:
    truth = ctx.test_values(cell.split)
    layout = ctx.eval_layout(cell.split, cell.placement, cell.k)
    if cell.method == "kriging":
        models = ctx.kriging_models(cell.split, cell.placement, cell.k)
        recon = KrigingReconstructor(layout, models)
        preds = recon.reconstruct_batch(layout.observe(truth))
    else:
        tm = ctx.neural_model(cell.method, cell.split, cell.placement, cell.k, cell.seed)
        inputs = encode_input_batch(layout, truth)
        preds = predict_batch(tm, inputs, noise_seed=cell.seed)
    # One dynamic range per component over the evaluated truth set keeps the
    # SSIM constants stable across the cell.
    ranges = (
        float(truth[..., 0].max() - truth[..., 0].min()),
        float(truth[..., 1].max() - truth[..., 1].min()),
    )
    # Cell rows pool MG/NMSE/FAC2 over every evaluated point; per-snapshot
    # reports are kept for the optional per-snapshot CSV.
    agg = pooled_report(preds, truth, data_range=ranges)
    row = {
        "method": cell.method,
        "split": cell.split,
        "placement": cell.placement,
        "k": cell.k,
        "seed": cell.seed,
        **agg,
    }
    reports = evaluate_batch(preds, truth, data_range=ranges) if ctx.config.per_snapshot_rows else []
    return row, reports


def run_matrix(
    cells: list[BenchCell],
    realizations: list[Realization],
    out_dir: str | Path,
    config: BenchConfig | None = None,
) -> list[dict]:
    """Run every cell, resume completed ones, and write results.csv.

    Per-cell failures are recorded in the provenance JSON and the matrix
    continues; the returned rows cover the successful cells.
    """
    config = config or BenchConfig()
    if not realizations:
        raise DataError("no realizations supplied")
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    data_fp = _data_fingerprint(realizations)
    ctx = _MatrixContext(realizations, config, out_dir)
    rows: list[dict] = []
    for cell in cells:
        tag = _cell_hash(cell, config, data_fp)
        cell_path = out_dir / "cells" / f"{tag}.json"
        if cell_path.exists():
            doc = json.loads(cell_path.read_text())
            if doc.get("error") is None:
                rows.append(doc["row"])
            continue
        started = time.time()
        try:
            row, reports = _evaluate_cell(ctx, cell)
        except Exception as exc:  # noqa: BLE001 - per-cell isolation is the contract
            doc = {
                "cell": asdict(cell),
                "row": None,
                "error": f"{type(exc).__name__}: {exc}",
                "wall_time_s": time.time() - started,
            }
            cell_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
            continue
        prov = {
            "cell": asdict(cell),
            "row": row,
            "error": None,
            "wall_time_s": time.time() - started,
            "data_fingerprint": data_fp,
        }
        if cell.method != "kriging":
            tm = ctx.neural_model(cell.method, cell.split, cell.placement, cell.k, cell.seed)
            prov["epochs_run"] = len(tm.history)
            prov["best_epoch"] = tm.best_epoch
        cell_path.write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n")
        if config.per_snapshot_rows:
            _write_per_snapshot(out_dir / "per_snapshot" / f"{tag}.csv", cell, reports)
        rows.append(row)
    _write_results_csv(out_dir / "results.csv", rows)
    return rows


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if np.isnan(x) else f"{x:.6f}"
    return str(x)


def _write_results_csv(path: Path, rows: list[dict]) -> None:
    lines = [",".join(RESULT_COLUMNS)]
    ordered = sorted(rows, key=lambda r: (r["method"], r["split"], r["placement"], r["k"], r["seed"]))
    for row in ordered:
        lines.append(",".join(_fmt(row.get(c, "nan")) for c in RESULT_COLUMNS))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _write_per_snapshot(path: Path, cell: BenchCell, reports: list[MetricReport]) -> None:
    cols = ["snapshot"] + [c for c in RESULT_COLUMNS[5:]]
    lines = [",".join(cols)]
    for i, rep in enumerate(reports):
        vals = rep.as_dict()
        vals["n_snapshots"] = 1
        lines.append(",".join([str(i)] + [_fmt(vals.get(c, float("nan"))) for c in cols[1:]]))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def load_results_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row: dict = {}
        for key, val in zip(header, vals):
            if key in ("method", "split", "placement"):
                row[key] = val
            elif key in ("k", "seed"):
                row[key] = int(val)
            else:
                row[key] = float(val)
        rows.append(row)
    return rows


# --- robustness -----------------------------------------------------------------


_RETAINED_METRICS = ("ssim", "nmse", "mg", "fac2")


def _retention(metric: str, unpert: float, pert: float) -> float:
    """Orientation-adjusted retention in percent; 100 means unchanged."""
    if np.isnan(unpert) or np.isnan(pert):
        return float("nan")
    if unpert == pert:
        return 100.0
    if metric in ("ssim", "fac2"):
        return 100.0 * pert / unpert if unpert != 0 else float("nan")
    if metric == "nmse":
        return 100.0 * unpert / pert if pert != 0 else float("nan")
    # MG scores by distance to the ideal value 1 (smaller is better).
    du, dp = abs(1.0 - unpert), abs(1.0 - pert)
    if du == dp:
        return 100.0
    return 100.0 * du / dp if dp != 0 else float("nan")


def robustness_table(rows: list[dict]) -> list[RobustnessRow]:
    """Per (method, split): retention under perturbation, averaged over k.

    Standard retention pairs uniform with perturbed cells; QR retention pairs
    qr with qr_perturbed cells. ``qr_improvement`` is their difference.
    """
    index: dict[tuple, dict] = {}
    for row in rows:
        index[(row["method"], row["split"], row["placement"], row["k"])] = row
    pairs = sorted({(r["method"], r["split"]) for r in rows})
    out = []
    for method, split in pairs:
        ks = sorted({r["k"] for r in rows if r["method"] == method and r["split"] == split})
        std: dict[str, float] = {}
        qr: dict[str, float] = {}
        for metric in _RETAINED_METRICS:
            std_vals, qr_vals = [], []
            for k in ks:
                u = index.get((method, split, "uniform", k))
                p = index.get((method, split, "perturbed", k))
                if u is not None and p is not None:
                    std_vals.append(_retention(metric, u[metric], p[metric]))
                qu = index.get((method, split, "qr", k))
                qp = index.get((method, split, QR_PERTURBED, k))
                if qu is not None and qp is not None:
                    qr_vals.append(_retention(metric, qu[metric], qp[metric]))
            std[metric] = float(np.nanmean(std_vals)) if std_vals else float("nan")
            qr[metric] = float(np.nanmean(qr_vals)) if qr_vals else float("nan")
        if all(np.isnan(v) for v in std.values()) and all(np.isnan(v) for v in qr.values()):
            raise DataError(f"no perturbed/unperturbed counterpart cells for {method}/{split}")
        std["overall"] = float(np.nanmean([std[m] for m in _RETAINED_METRICS]))
        qr["overall"] = float(np.nanmean([qr[m] for m in _RETAINED_METRICS]))
        improvement = {key: qr[key] - std[key] for key in std}
        out.append(RobustnessRow(method=method, split=split, standard=std, qr=qr, qr_improvement=improvement))
    return out


# --- temporal averaging -----------------------------------------------------------


def averaging_compare(
    reconstruct_batch_fn,
    layout: SensorLayout,
    realization: Realization,
    window: int,
) -> dict:
    """Pre- vs post-averaging over non-overlapping windows.

    ``reconstruct_batch_fn`` maps readings (n, k, 2) to fields (n, ny, nx, 2).
    Post-averaging reconstructs every snapshot then averages each window;
    pre-averaging reconstructs the window-mean readings. Both are scored
    against the windowed truth means and reported side by side.
    """
    n = len(realization)
    if window < 1 or window > n:
        raise ConfigError(f"window {window} out of range for {n} snapshots")
    usable = (n // window) * window
    values = realization.values[:usable]
    n_win = usable // window
    truth_win = values.reshape(n_win, window, *values.shape[1:]).mean(axis=1)
    readings = layout.observe(values)

    recon_all = reconstruct_batch_fn(readings)
    post = recon_all.reshape(n_win, window, *recon_all.shape[1:]).mean(axis=1)
    readings_win = readings.reshape(n_win, window, layout.k, 2).mean(axis=1)
    pre = reconstruct_batch_fn(readings_win)

    ranges = (
        float(truth_win[..., 0].max() - truth_win[..., 0].min()),
        float(truth_win[..., 1].max() - truth_win[..., 1].min()),
    )
    return {
        "window": window,
        "n_windows": n_win,
        "post": pooled_report(post, truth_win, data_range=ranges),
        "pre": pooled_report(pre, truth_win, data_range=ranges),
        "max_field_diff": float(np.max(np.abs(post - pre))),
    }


# --- realization similarity ---------------------------------------------------------


def realization_similarity(realizations: list[Realization]) -> np.ndarray:
    """Pairwise SSIM matrix of time-mean speed fields for one direction."""
    if len(realizations) < 2:
        raise ConfigError("similarity analysis needs at least 2 realizations")
    directions = {r.direction for r in realizations}
    if len(directions) > 1:
        raise ConfigError(f"realizations span several directions: {sorted(directions)}")
    means = [temporal_statistics(r).ws_mean for r in realizations]
    lo = min(m.min() for m in means)
    hi = max(m.max() for m in means)
    rng = hi - lo
    n = len(means)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            # A shared dynamic range keeps the matrix symmetric.
            val = ssim(means[i], means[j], data_range=rng)
            out[i, j] = out[j, i] = val
    return out


# --- reporting -------------------------------------------------------------------


def report(rows: list[dict], out_dir: str | Path) -> list[Path]:
    """Plot-ready per-metric CSVs (score vs k per method/placement) + summary."""
    if not rows:
        raise DataError("no result rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    notes = []
    splits = sorted({r["split"] for r in rows})
    methods = sorted({r["method"] for r in rows})
    placements = sorted({r["placement"] for r in rows})
    for split in splits:
        for metric in _RETAINED_METRICS:
            ks = sorted({r["k"] for r in rows if r["split"] == split})
            series = {}
            for method in methods:
                for placement in placements:
                    vals = {
                        r["k"]: r[metric]
                        for r in rows
                        if r["split"] == split and r["method"] == method and r["placement"] == placement
                    }
                    if not vals or all(np.isnan(v) for v in vals.values()):
                        if vals:
                            notes.append(f"omitted empty series {method}_{placement} for {metric}/{split}")
                        continue
                    series[f"{method}_{placement}"] = vals
            lines = [",".join(["k"] + sorted(series))]
            for k in ks:
                lines.append(
                    ",".join([str(k)] + [_fmt(series[name].get(k, float("nan"))) for name in sorted(series)])
                )
            path = out_dir / f"{metric}_{split}.csv"
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
    summary = ["# Benchmark summary", ""]
    for split in splits:
        summary.append(f"## Split: {split.upper()}")
        summary.append("")
        summary.append("| method | placement | k | ssim | mg | nmse | fac2 |")
        summary.append("|---|---|---|---|---|---|---|")
        for row in sorted(
            (r for r in rows if r["split"] == split),
            key=lambda r: (r["method"], r["placement"], r["k"]),
        ):
            summary.append(
                "| {method} | {placement} | {k} | {ssim} | {mg} | {nmse} | {fac2} |".format(
                    method=row["method"],
                    placement=row["placement"],
                    k=row["k"],
                    ssim=_fmt(row["ssim"]),
                    mg=_fmt(row["mg"]),
                    nmse=_fmt(row["nmse"]),
                    fac2=_fmt(row["fac2"]),
                )
            )
        summary.append("")
    if notes:
        summary.append("## Notes")
        summary.extend(f"- {n}" for n in sorted(set(notes)))
        summary.append("")
    path = out_dir / "summary.md"
    path.write_text("\n".join(summary))
    written.append(path)
    return written


def kriging_reconstructor_for(
    ctx_realizations: list[Realization],
    layout: SensorLayout,
    calibration_snapshots: int = 100,
) -> KrigingReconstructor:
    """Calibrate variogram lengths on the given runs and build a reconstructor."""
    readings = np.concatenate([layout.observe(r.values[:calibration_snapshots]) for r in ctx_realizations])
    models = tuple(select_length(layout, readings[:, :, c]) for c in range(2))
    return KrigingReconstructor(layout, models)
