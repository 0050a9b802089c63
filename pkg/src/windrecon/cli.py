"""Command-line interface.

Subcommands: synth, place, train, reconstruct, eval, and the bench group
(run / report / robustness / averaging / similarity). Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .bench import (
    BenchCell,
    BenchConfig,
    QR_PERTURBED,
    averaging_compare,
    build_split,
    default_cells,
    kriging_reconstructor_for,
    load_results_csv,
    realization_similarity,
    report,
    robustness_table,
    run_matrix,
)
from .errors import ConfigError, DataError, NumericalError
from .fields import GridSpec, Realization, load_realization, save_realization
from .kriging import KrigingReconstructor, select_length
from .metrics import aggregate_reports, evaluate_batch
from .neural.engine import set_precision
from .neural.models import ArchitectureSpec, encode_input_batch
from .neural.training import TrainConfig, build_training_set, load_checkpoint, predict_batch, save_checkpoint, train
from .placement import (
    SensorLayout,
    compute_pod,
    layout_from_ranking,
    load_layout,
    perturb_layout,
    qr_rank_sensors,
    save_layout,
    uniform_layout,
)
from .synth import SUPPORTED_DIRECTIONS, SynthConfig, synth_realization

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _load_dataset(data_dir: str | Path) -> list[Realization]:
    paths = sorted(Path(data_dir).glob("*.json"))
    if not paths:
        raise DataError(f"no realization metadata files in {data_dir}")
    return [load_realization(p) for p in paths]


def _dataset_name(direction: float, run_index: int) -> str:
    return f"d{direction:g}_run{run_index}.json"


def _train_config(path: str | None, overrides: dict | None = None) -> TrainConfig:
    doc = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    doc.update(overrides or {})
    try:
        return TrainConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad training config: {exc}") from exc


def _bench_config(path: str | None) -> BenchConfig:
    if not path:
        return BenchConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    train_doc = doc.pop("train", {})
    cwgan_doc = doc.pop("cwgan_train", None)
    for key in ("k_values", "methods", "splits", "placements"):
        if key in doc:
            doc[key] = tuple(doc[key])
    try:
        return BenchConfig(
            train=TrainConfig(**train_doc),
            cwgan_train=TrainConfig(**cwgan_doc) if cwgan_doc is not None else None,
            **doc,
        )
    except TypeError as exc:
        raise ConfigError(f"bad bench config: {exc}") from exc


# --- subcommand handlers -----------------------------------------------------


def _cmd_synth(args) -> int:
    directions = list(SUPPORTED_DIRECTIONS) if args.direction == "all" else [float(args.direction)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for d_i, direction in enumerate(directions):
        for run in range(1, args.runs + 1):
            cfg = SynthConfig(
                direction=direction,
                n_snapshots=args.snapshots,
                seed=args.seed + 1000 * d_i + run,
                fluct_scale=args.fluct_scale,
                corr_len=args.corr_len,
                run_index=run,
            )
            r = synth_realization(cfg)
            save_realization(r, out / _dataset_name(direction, run))
    print(f"wrote {len(directions) * args.runs} realizations to {out}")
    return EXIT_OK


def _cmd_place(args) -> int:
    grid = GridSpec(nx=args.nx, ny=args.ny)
    if args.method == "uniform":
        layout = uniform_layout(grid, args.k, args.seed)
        prov = {"method": "uniform", "k": args.k, "seed": args.seed}
    elif args.method == "perturb":
        if not args.layout:
            raise ConfigError("--layout is required for --method perturb")
        layout = perturb_layout(load_layout(args.layout), args.seed)
        prov = {"method": "perturb", "seed": args.seed, "source": str(args.layout)}
    else:  # qr
        if not args.data:
            raise ConfigError("--data is required for --method qr")
        realizations = _load_dataset(args.data)
        if args.split:
            keys = build_split(realizations, args.split).train_keys
            realizations = [r for r in realizations if r.key in set(keys)]
        values = np.concatenate([r.values for r in realizations])
        basis = compute_pod(values, args.modes)
        ranking = qr_rank_sensors(basis, grid)
        layout = layout_from_ranking(ranking, args.k)
        prov = {
            "method": "qr",
            "k": args.k,
            "modes": args.modes,
            "split": args.split,
            "energy_captured": basis.energy_captured,
        }
    save_layout(layout, args.out, provenance=prov)
    print(f"wrote layout with k={layout.k} to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    realizations = _load_dataset(args.data)
    keys = set(build_split(realizations, args.split).train_keys)
    runs = [r for r in realizations if r.key in keys]
    layout = load_layout(args.layout)
    inputs, targets = build_training_set(runs, layout)
    cfg = _train_config(args.config)
    spec = getattr(ArchitectureSpec, args.arch)()
    tm = train(spec, inputs, targets, cfg, seed=args.seed)
    save_checkpoint(tm, args.out)
    best = tm.history[tm.best_epoch]["val_loss"] if tm.history else float("nan")
    print(f"trained {args.arch} for {len(tm.history)} epochs (best val {best:.6g}); saved to {args.out}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    r = load_realization(args.data)
    layout = load_layout(args.layout)
    if args.method == "kriging":
        recon = kriging_reconstructor_for([r], layout, calibration_snapshots=args.calibration_snapshots)
        preds = recon.reconstruct_batch(layout.observe(r.values))
    else:
        if not args.model:
            raise ConfigError(f"--model checkpoint required for method {args.method}")
        tm = load_checkpoint(args.model)
        preds = predict_batch(tm, encode_input_batch(layout, r.values), noise_seed=args.seed)
    out = Realization(
        grid=r.grid,
        direction=r.direction,
        run_index=r.run_index,
        dt=r.dt,
        u_ref=r.u_ref,
        z_over_h=r.z_over_h,
        values=preds,
    )
    out_dir = Path(args.out)
    path = save_realization(out, out_dir / _dataset_name(r.direction, r.run_index))
    print(f"wrote reconstruction to {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred = load_realization(args.pred)
    truth = load_realization(args.truth)
    if len(pred) != len(truth):
        raise DataError(f"snapshot counts differ: {len(pred)} vs {len(truth)}")
    reports = evaluate_batch(pred.values, truth.values, tolerance=args.tolerance)
    agg = aggregate_reports(reports)
    keys = sorted(agg)
    lines = [",".join(keys), ",".join(bench_mod._fmt(agg[k]) for k in keys)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote evaluation to {args.out}")
    return EXIT_OK


def _cmd_bench_run(args) -> int:
    realizations = _load_dataset(args.data)
    config = _bench_config(args.config)
    cells = default_cells(config)
    rows = run_matrix(cells, realizations, args.out, config)
    print(f"completed {len(rows)}/{len(cells)} cells; results in {Path(args.out) / 'results.csv'}")
    return EXIT_OK if len(rows) == len(cells) else EXIT_NUMERICAL


def _cmd_bench_report(args) -> int:
    rows = load_results_csv(args.results)
    written = report(rows, args.out)
    print(f"wrote {len(written)} report files to {args.out}")
    return EXIT_OK


def _cmd_bench_robustness(args) -> int:
    if args.results:
        rows = load_results_csv(args.results)
    else:
        if not args.data:
            raise ConfigError("either --results or --data is required")
        realizations = _load_dataset(args.data)
        config = _bench_config(args.config)
        cells = default_cells(config)
        extra = [
            BenchCell(method=m, split=s, placement=QR_PERTURBED, k=k, seed=config.model_seed)
            for m in config.methods
            for s in config.splits
            for k in config.k_values
        ]
        rows = run_matrix(cells + extra, realizations, args.out, config)
    table = robustness_table(rows)
    lines = ["method,split,scope," + ",".join(["ssim", "nmse", "mg", "fac2", "overall"])]
    for row in table:
        for scope, vals in (("standard", row.standard), ("qr", row.qr), ("improvement", row.qr_improvement)):
            lines.append(
                f"{row.method},{row.split},{scope},"
                + ",".join(bench_mod._fmt(vals[m]) for m in ("ssim", "nmse", "mg", "fac2", "overall"))
            )
    out = Path(args.out) / "robustness.csv" if Path(args.out).suffix == "" else Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote robustness table to {out}")
    return EXIT_OK


def _cmd_bench_averaging(args) -> int:
    r = load_realization(args.data)
    layout = load_layout(args.layout)
    if args.method == "kriging":
        recon = kriging_reconstructor_for([r], layout, calibration_snapshots=args.calibration_snapshots)
        fn = recon.reconstruct_batch
    else:
        if not args.model:
            raise ConfigError(f"--model checkpoint required for method {args.method}")
        tm = load_checkpoint(args.model)

        def fn(readings: np.ndarray) -> np.ndarray:
            inputs = _inputs_from_readings(layout, readings, r.grid)
            return predict_batch(tm, inputs, noise_seed=args.seed)

    result = averaging_compare(fn, layout, r, args.window)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"wrote averaging comparison to {args.out}")
    return EXIT_OK


def _inputs_from_readings(layout: SensorLayout, readings: np.ndarray, grid: GridSpec) -> np.ndarray:
    n = readings.shape[0]
    out = np.zeros((n, 3, grid.ny, grid.nx))
    xs = np.array([c[0] for c in layout.cells])
    ys = np.array([c[1] for c in layout.cells])
    out[:, 0, ys, xs] = readings[:, :, 0]
    out[:, 1, ys, xs] = readings[:, :, 1]
    out[:, 2, ys, xs] = 1.0
    return out


def _cmd_bench_similarity(args) -> int:
    realizations = [r for r in _load_dataset(args.data) if r.direction == float(args.direction)]
    matrix = realization_similarity(realizations)
    doc = {
        "direction": float(args.direction),
        "runs": [r.run_index for r in realizations],
        "ssim_matrix": [[round(float(v), 6) for v in row] for row in matrix],
        "mean_offdiag": round(float(matrix[np.triu_indices(len(matrix), 1)].mean()), 6),
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote similarity matrix to {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="windrecon", description=__doc__)
    parser.add_argument("--precision", choices=("f32", "f64"), default="f64", help="compute precision")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic realizations")
    p.add_argument("--direction", default="all", help="0, 22.5, 45, or 'all'")
    p.add_argument("--runs", type=int, default=2)
    p.add_argument("--snapshots", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--fluct-scale", type=float, default=0.1)
    p.add_argument("--corr-len", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("place", help="construct a sensor layout")
    p.add_argument("--method", choices=("uniform", "qr", "perturb"), required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nx", type=int, default=15)
    p.add_argument("--ny", type=int, default=15)
    p.add_argument("--data", help="dataset dir (qr)")
    p.add_argument("--split", choices=("sdt", "mdt"), help="restrict qr basis to a split's training runs")
    p.add_argument("--modes", type=int, default=40)
    p.add_argument("--layout", help="source layout (perturb)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_place)

    p = sub.add_parser("train", help="train a reconstruction network")
    p.add_argument("--arch", choices=("unet", "cwgan", "vitae"), required=True)
    p.add_argument("--split", choices=("sdt", "mdt"), required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TrainConfig overrides as JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a realization from sensor readings")
    p.add_argument("--method", choices=("kriging", "unet", "cwgan", "vitae"), required=True)
    p.add_argument("--layout", required=True)
    p.add_argument("--data", required=True, help="realization metadata file")
    p.add_argument("--model", help="checkpoint (neural methods)")
    p.add_argument("--calibration-snapshots", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("eval", help="score a reconstructed realization against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--tolerance", type=float, default=0.005)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    b = sub.add_parser("bench", help="benchmark harness")
    bsub = b.add_subparsers(dest="bench_command", required=True)

    p = bsub.add_parser("run", help="run the benchmark matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="BenchConfig as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_run)

    p = bsub.add_parser("report", help="emit plot data and summary from results.csv")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_report)

    p = bsub.add_parser("robustness", help="perturbation-retention table")
    p.add_argument("--results", help="existing results.csv (skips the matrix run)")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_robustness)

    p = bsub.add_parser("averaging", help="pre- vs post-averaging comparison")
    p.add_argument("--method", choices=("kriging", "unet", "cwgan", "vitae"), default="kriging")
    p.add_argument("--data", required=True, help="realization metadata file")
    p.add_argument("--layout", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--model")
    p.add_argument("--calibration-snapshots", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_averaging)

    p = bsub.add_parser("similarity", help="pairwise SSIM of same-direction runs")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench_similarity)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    set_precision(args.precision)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
