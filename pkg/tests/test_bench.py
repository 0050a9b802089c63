import json

import numpy as np
import pytest

from windrecon.bench import (
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
    _retention,
)
from windrecon.errors import ConfigError, DataError
from windrecon.fields import GridSpec
from windrecon.neural.training import TrainConfig
from windrecon.placement import uniform_layout
from windrecon.synth import SynthConfig, synth_realization

from conftest import make_realization


def paper_layout_realizations(n_snapshots=4):
    """3 runs at 0 deg, 2 at 22.5, 3 at 45 (the reference experiment layout)."""
    rng = np.random.default_rng(0)
    out = []
    for direction, runs in ((0.0, 3), (22.5, 2), (45.0, 3)):
        for run in range(1, runs + 1):
            out.append(
                make_realization(rng.standard_normal((n_snapshots, 15, 15, 2)), direction, run)
            )
    return out


class TestSplits:
    def test_mdt_reference_layout(self):
        plan = build_split(paper_layout_realizations(), "mdt")
        assert plan.train_keys == ((0.0, 1), (22.5, 1), (45.0, 1))
        assert len(plan.test_keys) == 5
        assert set(plan.test_keys) == {(0.0, 2), (0.0, 3), (22.5, 2), (45.0, 2), (45.0, 3)}

    def test_sdt_reference_layout(self):
        plan = build_split(paper_layout_realizations(), "sdt")
        assert set(plan.train_keys) == {(0.0, 1), (0.0, 2), (0.0, 3)}
        assert len(plan.test_keys) == 5
        assert all(key[0] != 0.0 for key in plan.test_keys)

    def test_no_overlap(self):
        for strategy in ("sdt", "mdt"):
            plan = build_split(paper_layout_realizations(), strategy)
            assert set(plan.train_keys) & set(plan.test_keys) == set()

    def test_single_direction_mdt_rejected(self):
        rng = np.random.default_rng(1)
        reals = [
            make_realization(rng.standard_normal((3, 15, 15, 2)), 0.0, run) for run in (1, 2)
        ]
        with pytest.raises(DataError):
            build_split(reals, "mdt")

    def test_mdt_needs_two_runs_per_direction(self):
        reals = paper_layout_realizations()
        reals = [r for r in reals if not (r.direction == 22.5 and r.run_index == 2)]
        with pytest.raises(DataError):
            build_split(reals, "mdt")

    def test_val_settings(self):
        plan = build_split(paper_layout_realizations(), "mdt")
        assert plan.val_fraction == 0.2
        assert plan.split_seed == 42


class TestRetention:
    def test_equal_scores_give_100(self):
        for metric in ("ssim", "nmse", "mg", "fac2"):
            assert _retention(metric, 0.7, 0.7) == 100.0

    def test_hand_ratio(self):
        assert _retention("ssim", 0.8, 0.72) == pytest.approx(90.0)

    def test_orientation(self):
        # Degrading any metric under perturbation lowers its retention.
        assert _retention("ssim", 0.8, 0.7) < 100.0
        assert _retention("fac2", 0.9, 0.8) < 100.0
        assert _retention("nmse", 0.5, 0.8) < 100.0  # NMSE got worse (rose)
        assert _retention("mg", 1.05, 1.2) < 100.0  # MG moved away from 1
        assert _retention("mg", 1.2, 1.05) > 100.0  # perturbation helped

    def test_table_and_improvement(self):
        rows = []
        for placement, ssim in (("uniform", 0.8), ("perturbed", 0.72), ("qr", 0.8), (QR_PERTURBED, 0.76)):
            rows.append(
                {
                    "method": "kriging",
                    "split": "mdt",
                    "placement": placement,
                    "k": 5,
                    "ssim": ssim,
                    "nmse": 0.5,
                    "mg": 1.0,
                    "fac2": 0.9,
                }
            )
        table = robustness_table(rows)
        assert len(table) == 1
        row = table[0]
        assert row.standard["ssim"] == pytest.approx(90.0)
        assert row.qr["ssim"] == pytest.approx(95.0)
        assert row.qr_improvement["ssim"] == pytest.approx(5.0)
        assert row.standard["nmse"] == 100.0
        assert row.qr_improvement["overall"] == pytest.approx(1.25)

    def test_missing_counterparts_raise(self):
        rows = [
            {"method": "unet", "split": "sdt", "placement": "uniform", "k": 5, "ssim": 0.5, "nmse": 1.0, "mg": 1.0, "fac2": 0.5}
        ]
        with pytest.raises(DataError):
            robustness_table(rows)


class TestAveraging:
    def _kriging_fn(self, realization, layout):
        recon = kriging_reconstructor_for([realization], layout, calibration_snapshots=20)
        return recon.reconstruct_batch

    def test_linear_method_pre_equals_post(self, grid):
        r = synth_realization(SynthConfig(direction=45.0, n_snapshots=40, seed=3))
        layout = uniform_layout(grid, 8, seed=0)
        result = averaging_compare(self._kriging_fn(r, layout), layout, r, window=10)
        assert result["max_field_diff"] < 1e-8
        assert result["pre"]["ssim"] == pytest.approx(result["post"]["ssim"], abs=1e-8)
        assert result["pre"]["nmse"] == pytest.approx(result["post"]["nmse"], abs=1e-8)

    def test_window_one_degenerate(self, grid):
        r = synth_realization(SynthConfig(direction=0.0, n_snapshots=12, seed=4))
        layout = uniform_layout(grid, 6, seed=1)
        result = averaging_compare(self._kriging_fn(r, layout), layout, r, window=1)
        assert result["n_windows"] == 12
        assert result["max_field_diff"] < 1e-12

    def test_window_out_of_range(self, grid):
        r = synth_realization(SynthConfig(direction=0.0, n_snapshots=6, seed=5))
        layout = uniform_layout(grid, 6, seed=1)
        fn = self._kriging_fn(r, layout)
        with pytest.raises(ConfigError):
            averaging_compare(fn, layout, r, window=7)

    def test_nonlinear_method_differs(self, grid):
        # A deliberately nonlinear reconstructor: pre and post must differ.
        r = synth_realization(SynthConfig(direction=22.5, n_snapshots=20, seed=6))
        layout = uniform_layout(grid, 6, seed=1)

        def nonlinear(readings):
            n = readings.shape[0]
            out = np.zeros((n, 15, 15, 2))
            out[:, :, :, :] = (readings**2).mean(axis=(1, 2))[:, None, None, None]
            return out

        result = averaging_compare(nonlinear, layout, r, window=5)
        assert result["max_field_diff"] > 1e-6


class TestSimilarity:
    def test_same_seed_runs_identical(self):
        a = synth_realization(SynthConfig(direction=0.0, n_snapshots=50, seed=7))
        b = synth_realization(SynthConfig(direction=0.0, n_snapshots=50, seed=7, run_index=2))
        m = realization_similarity([a, b])
        assert m[0, 1] == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(np.diag(m), 1.0)

    def test_different_seeds_high_similarity(self):
        a = synth_realization(SynthConfig(direction=45.0, n_snapshots=2000, seed=8))
        b = synth_realization(SynthConfig(direction=45.0, n_snapshots=2000, seed=9, run_index=2))
        m = realization_similarity([a, b])
        assert m[0, 1] > 0.9
        assert m[0, 1] == m[1, 0]

    def test_requires_one_direction(self):
        a = synth_realization(SynthConfig(direction=0.0, n_snapshots=10, seed=1))
        b = synth_realization(SynthConfig(direction=45.0, n_snapshots=10, seed=2))
        with pytest.raises(ConfigError):
            realization_similarity([a, b])
        with pytest.raises(ConfigError):
            realization_similarity([a])


def _tiny_matrix_config():
    return BenchConfig(
        k_values=(4,),
        methods=("kriging", "unet"),
        splits=("mdt",),
        placements=("uniform",),
        eval_stride=4,
        kriging_calibration_snapshots=20,
        train=TrainConfig(max_epochs=2, batch_size=8, max_train_samples=40),
    )


def _tiny_data():
    reals = []
    for d_i, d in enumerate((0.0, 22.5, 45.0)):
        for run in (1, 2):
            reals.append(
                synth_realization(SynthConfig(direction=d, n_snapshots=40, seed=20 + d_i * 10 + run, run_index=run))
            )
    return reals


class TestRunMatrix:
    def test_smoke_and_resume(self, tmp_path):
        config = _tiny_matrix_config()
        reals = _tiny_data()
        cells = default_cells(config)
        assert len(cells) == 2
        rows = run_matrix(cells, reals, tmp_path, config)
        assert len(rows) == 2
        results = tmp_path / "results.csv"
        assert results.exists()
        first_bytes = results.read_bytes()
        cell_files = sorted((tmp_path / "cells").glob("*.json"))
        assert len(cell_files) == 2
        stamps = [f.stat().st_mtime_ns for f in cell_files]
        # Rerun: zero recomputation (cell files untouched), identical csv.
        rows2 = run_matrix(cells, reals, tmp_path, config)
        assert rows2 == rows
        assert [f.stat().st_mtime_ns for f in sorted((tmp_path / "cells").glob("*.json"))] == stamps
        assert results.read_bytes() == first_bytes
        # Per-snapshot rows emitted for each cell.
        assert len(list((tmp_path / "per_snapshot").glob("*.csv"))) == 2

    def test_default_matrix_cardinality(self):
        assert len(default_cells(BenchConfig())) == 4 * 2 * 3 * 6  # 144

    def test_per_cell_failure_recorded(self, tmp_path):
        config = _tiny_matrix_config()
        reals = _tiny_data()
        bad = BenchCell(method="kriging", split="mdt", placement="uniform", k=2)  # k<3: calibration fails
        good = BenchCell(method="kriging", split="mdt", placement="uniform", k=4)
        rows = run_matrix([bad, good], reals, tmp_path, config)
        assert len(rows) == 1
        docs = [json.loads(p.read_text()) for p in (tmp_path / "cells").glob("*.json")]
        errors = [d for d in docs if d["error"]]
        assert len(errors) == 1
        assert "k >= 3" in errors[0]["error"]

    def test_results_csv_round_trip(self, tmp_path):
        config = _tiny_matrix_config()
        reals = _tiny_data()
        rows = run_matrix(default_cells(config), reals, tmp_path, config)
        loaded = load_results_csv(tmp_path / "results.csv")
        assert len(loaded) == len(rows)
        by_key = {(r["method"], r["k"]): r for r in loaded}
        for row in rows:
            got = by_key[(row["method"], row["k"])]
            assert got["ssim"] == pytest.approx(row["ssim"], abs=1e-6)


class TestReport:
    def _rows(self):
        rows = []
        rng = np.random.default_rng(10)
        for method in ("kriging", "unet"):
            for split in ("sdt", "mdt"):
                for placement in ("uniform", "perturbed"):
                    for k in (5, 10):
                        rows.append(
                            {
                                "method": method,
                                "split": split,
                                "placement": placement,
                                "k": k,
                                "ssim": float(rng.uniform(0.3, 0.9)),
                                "mg": float(rng.uniform(0.9, 1.2)),
                                "nmse": float(rng.uniform(0.1, 1.0)),
                                "fac2": float(rng.uniform(0.5, 1.0)),
                            }
                        )
        return rows

    def test_files_and_determinism(self, tmp_path):
        rows = self._rows()
        written = report(rows, tmp_path / "rep")
        names = sorted(p.name for p in written)
        # 4 metrics x 2 splits + summary
        assert len(names) == 9
        assert "ssim_mdt.csv" in names and "summary.md" in names
        blobs = {p.name: p.read_bytes() for p in written}
        report(rows, tmp_path / "rep")
        for p in written:
            assert p.read_bytes() == blobs[p.name]

    def test_empty_series_noted(self, tmp_path):
        rows = self._rows()
        for r in rows:
            if r["method"] == "unet":
                r["ssim"] = float("nan")
        report(rows, tmp_path / "rep")
        body = (tmp_path / "rep" / "ssim_sdt.csv").read_text()
        assert "unet" not in body.splitlines()[0]
        assert "omitted empty series" in (tmp_path / "rep" / "summary.md").read_text()
