import json
from pathlib import Path

import numpy as np
import pytest

from windrecon.cli import main
from windrecon.fields import load_realization


def run(args):
    return main([str(a) for a in args])


@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    code = run(["synth", "--direction", "all", "--runs", "2", "--snapshots", "30", "--seed", "5", "--out", out])
    assert code == 0
    return out


class TestSynth:
    def test_writes_all_directions(self, dataset):
        names = sorted(p.name for p in dataset.glob("*.json"))
        assert names == [
            "d0_run1.json",
            "d0_run2.json",
            "d22.5_run1.json",
            "d22.5_run2.json",
            "d45_run1.json",
            "d45_run2.json",
        ]
        r = load_realization(dataset / "d45_run2.json")
        assert len(r) == 30
        assert r.direction == 45.0

    def test_byte_identical_rerun(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--direction", "0", "--runs", "1", "--snapshots", "12", "--seed", "3", "--out", out]) == 0
        assert (a / "d0_run1.json").read_bytes() == (b / "d0_run1.json").read_bytes()
        assert (a / "d0_run1.bin").read_bytes() == (b / "d0_run1.bin").read_bytes()

    def test_bad_direction_is_config_error(self, tmp_path):
        assert run(["synth", "--direction", "90", "--out", tmp_path / "x"]) == 2


class TestPlace:
    def test_uniform(self, tmp_path):
        out = tmp_path / "layout.json"
        assert run(["place", "--method", "uniform", "--k", "9", "--seed", "1", "--out", out]) == 0
        doc = json.loads(out.read_text())
        assert len(doc["cells"]) == 9

    def test_perturb_requires_layout(self, tmp_path):
        assert run(["place", "--method", "perturb", "--out", tmp_path / "x.json"]) == 2

    def test_qr_from_data(self, dataset, tmp_path):
        out = tmp_path / "qr.json"
        code = run(["place", "--method", "qr", "--k", "12", "--data", dataset, "--split", "mdt", "--modes", "10", "--out", out])
        assert code == 0
        doc = json.loads(out.text_content() if hasattr(out, "text_content") else out.read_text())
        assert len(doc["cells"]) == 12
        assert doc["provenance"]["method"] == "qr"

    def test_missing_data_dir_is_data_error(self, tmp_path):
        assert run(["place", "--method", "qr", "--data", tmp_path / "nope", "--out", tmp_path / "x.json"]) == 3


class TestReconstructEval:
    def test_kriging_pipeline(self, dataset, tmp_path):
        layout = tmp_path / "layout.json"
        run(["place", "--method", "uniform", "--k", "8", "--seed", "2", "--out", layout])
        recon_dir = tmp_path / "recon"
        code = run(
            ["reconstruct", "--method", "kriging", "--layout", layout, "--data", dataset / "d0_run1.json",
             "--calibration-snapshots", "20", "--out", recon_dir]
        )
        assert code == 0
        pred = load_realization(recon_dir / "d0_run1.json")
        assert len(pred) == 30
        out_csv = tmp_path / "eval.csv"
        code = run(["eval", "--pred", recon_dir / "d0_run1.json", "--truth", dataset / "d0_run1.json", "--out", out_csv])
        assert code == 0
        header, values = out_csv.read_text().strip().splitlines()
        row = dict(zip(header.split(","), values.split(",")))
        # k=8 cannot follow per-snapshot turbulence, so scores are modest;
        # this asserts plumbing, not reconstruction quality.
        assert 0.0 < float(row["ssim"]) < 1.0
        assert float(row["fac2"]) > 0.6

    def test_neural_train_then_reconstruct(self, dataset, tmp_path):
        layout = tmp_path / "layout.json"
        run(["place", "--method", "uniform", "--k", "6", "--seed", "2", "--out", layout])
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"max_epochs": 2, "batch_size": 8, "max_train_samples": 30}))
        model = tmp_path / "model.json"
        code = run(
            ["--precision", "f32", "train", "--arch", "unet", "--split", "mdt", "--layout", layout,
             "--data", dataset, "--config", cfg, "--seed", "1", "--out", model]
        )
        assert code == 0
        recon_dir = tmp_path / "recon"
        code = run(
            ["--precision", "f32", "reconstruct", "--method", "unet", "--layout", layout, "--model", model,
             "--data", dataset / "d45_run2.json", "--out", recon_dir]
        )
        assert code == 0
        assert (recon_dir / "d45_run2.json").exists()

    def test_reconstruct_without_model_is_config_error(self, dataset, tmp_path):
        layout = tmp_path / "layout.json"
        run(["place", "--method", "uniform", "--k", "6", "--seed", "2", "--out", layout])
        code = run(["reconstruct", "--method", "unet", "--layout", layout, "--data", dataset / "d0_run1.json", "--out", tmp_path / "r"])
        assert code == 2


class TestBenchCLI:
    def test_similarity(self, dataset, tmp_path):
        out = tmp_path / "sim.json"
        assert run(["bench", "similarity", "--data", dataset, "--direction", "0", "--out", out]) == 0
        doc = json.loads(out.read_text())
        assert doc["runs"] == [1, 2]
        assert len(doc["ssim_matrix"]) == 2

    def test_averaging_kriging(self, dataset, tmp_path):
        layout = tmp_path / "layout.json"
        run(["place", "--method", "uniform", "--k", "8", "--seed", "2", "--out", layout])
        out = tmp_path / "avg.json"
        code = run(
            ["bench", "averaging", "--method", "kriging", "--data", dataset / "d45_run1.json",
             "--layout", layout, "--window", "5", "--calibration-snapshots", "20", "--out", out]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["max_field_diff"] < 1e-8  # linearity: pre == post

    def test_run_and_report(self, dataset, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(
            json.dumps(
                {
                    "k_values": [4],
                    "methods": ["kriging"],
                    "splits": ["mdt"],
                    "placements": ["uniform", "perturbed"],
                    "eval_stride": 3,
                    "kriging_calibration_snapshots": 15,
                    "per_snapshot_rows": False,
                }
            )
        )
        out = tmp_path / "bench_out"
        assert run(["bench", "run", "--data", dataset, "--config", cfg, "--out", out]) == 0
        rows = (out / "results.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + 2 cells
        rep = tmp_path / "rep"
        assert run(["bench", "report", "--results", out / "results.csv", "--out", rep]) == 0
        assert (rep / "summary.md").exists()
        # Robustness from the existing results.
        rob = tmp_path / "rob.csv"
        assert run(["bench", "robustness", "--results", out / "results.csv", "--out", rob]) == 0
        lines = rob.read_text().strip().splitlines()
        assert lines[0].startswith("method,split,scope")
        assert len(lines) == 4  # header + standard/qr/improvement for one pair

    def test_report_determinism(self, dataset, tmp_path):
        cfg = tmp_path / "bench.json"
        cfg.write_text(
            json.dumps(
                {
                    "k_values": [4],
                    "methods": ["kriging"],
                    "splits": ["mdt"],
                    "placements": ["uniform"],
                    "eval_stride": 3,
                    "kriging_calibration_snapshots": 15,
                    "per_snapshot_rows": False,
                }
            )
        )
        outs = []
        for tag in ("x", "y"):
            out = tmp_path / f"bench_{tag}"
            assert run(["bench", "run", "--data", dataset, "--config", cfg, "--out", out]) == 0
            outs.append((out / "results.csv").read_bytes())
        assert outs[0] == outs[1]
