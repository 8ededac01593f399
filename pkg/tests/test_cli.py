import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from inloc import cli
from inloc import data as dc


def write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_datasets(tmp_path_factory):
    """Small source/target dataset directories via the CLI itself."""
    root = tmp_path_factory.mktemp("cli-data")
    cfg_s = write_config(root / "src.json", {"domain": "source", "spacing_mm": 100.0})
    cfg_t = write_config(root / "tgt.json", {"domain": "target", "spacing_mm": 100.0})
    assert run_cli("gen-data", "--config", cfg_s, "--out", root / "src") == 0
    assert run_cli("gen-data", "--config", cfg_t, "--out", root / "tgt") == 0
    return root / "src", root / "tgt"


class TestGenData:
    def test_default_sim_dataset_has_512_samples(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"domain": "source"})
        assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "ds") == 0
        bundle = dc.load_bundle(tmp_path / "ds")
        assert len(bundle) == 512
        assert (tmp_path / "ds" / "config.json").exists()

    def test_unknown_key_exit_2_names_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", {"domain": "source", "spacng": 50})
        assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "ds") == 2
        assert "spacng" in capsys.readouterr().err

    def test_refuses_completed_dataset_dir(self, tiny_datasets, tmp_path, capsys):
        src, _ = tiny_datasets
        cfg = write_config(tmp_path / "c.json", {"domain": "source", "spacing_mm": 200.0})
        assert run_cli("gen-data", "--config", cfg, "--out", src) == 3

    def test_missing_config_exit_3(self, tmp_path):
        assert run_cli("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path / "d") == 3

    def test_invalid_json_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run_cli("gen-data", "--config", bad, "--out", tmp_path / "d") == 2

    def test_seed_flag_overrides_master_seed(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"domain": "source", "spacing_mm": 200.0})
        assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "a", "--seed", 7) == 0
        resolved = json.loads((tmp_path / "a" / "config.json").read_text())
        assert resolved["master_seed"] == 7

    def test_set_override_dotted(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"domain": "target", "spacing_mm": 200.0})
        code = run_cli(
            "gen-data", "--config", cfg, "--out", tmp_path / "b", "--set", "shift.noise_snr_db=20.0"
        )
        assert code == 0
        resolved = json.loads((tmp_path / "b" / "config.json").read_text())
        assert resolved["shift"]["noise_snr_db"] == 20.0

    def test_resolved_config_refeedable(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"domain": "source", "spacing_mm": 200.0})
        assert run_cli("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
        resolved = tmp_path / "a" / "config.json"
        assert run_cli("gen-data", "--config", resolved, "--out", tmp_path / "b") == 0
        a = (tmp_path / "a" / "samples.f32").read_bytes()
        b = (tmp_path / "b" / "samples.f32").read_bytes()
        assert a == b


def train_config(src, tgt, **extra):
    cfg = {
        "model": "accyclegan",
        "source_data": str(src),
        "target_data": str(tgt),
        "labeled_fraction": 0.5,
        "epochs": 2,
        "decay_start_epoch": 1,
        "width_mult": 0.125,
        "steps_per_epoch": 2,
        "seed": 0,
    }
    cfg.update(extra)
    return cfg


class TestTrainCommand:
    def test_train_writes_run_dir(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(tmp_path / "t.json", train_config(src, tgt))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 0
        run = tmp_path / "run"
        for name in ("config.json", "split.json", "runlog.csv", "train_config.json", "run_complete.json"):
            assert (run / name).exists(), name
        assert (run / "ckpt" / "epoch_2.pt").exists()

    def test_never_overwrites_completed_run(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(tmp_path / "t.json", train_config(src, tgt))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 0
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 3

    def test_missing_dataset_exit_3_names_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "t.json", train_config(tmp_path / "ghost", tmp_path / "ghost2"))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 3
        assert "ghost" in capsys.readouterr().err

    def test_byte_identical_runlogs_same_seed(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(tmp_path / "t.json", train_config(src, tgt))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "r1") == 0
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "r2") == 0
        a = (tmp_path / "r1" / "runlog.csv").read_bytes()
        b = (tmp_path / "r2" / "runlog.csv").read_bytes()
        assert a == b

    def test_baseline_model(self, tiny_datasets, tmp_path):
        src, _ = tiny_datasets
        cfg = write_config(
            tmp_path / "b.json",
            {
                "model": "baseline",
                "source_data": str(src),
                "labeled_fraction": 0.5,
                "epochs": 2,
                "width_mult": 0.125,
                "seed": 0,
            },
        )
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "brun") == 0
        assert (tmp_path / "brun" / "ckpt" / "epoch_2.pt").exists()

    def test_bad_model_name_exit_2(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(tmp_path / "t.json", train_config(src, tgt, model="pix2pix"))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "run") == 2


class TestEvalAndAnalyze:
    @pytest.fixture(scope="class")
    def trained_run(self, tiny_datasets, tmp_path_factory):
        src, tgt = tiny_datasets
        root = tmp_path_factory.mktemp("run")
        cfg = write_config(root / "t.json", train_config(src, tgt))
        assert run_cli("train", "--config", cfg, "--out", root / "run") == 0
        return root / "run", src, tgt

    def test_eval_writes_report(self, trained_run, tmp_path):
        run, src, tgt = trained_run
        cfg = write_config(
            tmp_path / "e.json", {"run_dir": str(run), "data": str(tgt), "subset": "test"}
        )
        assert run_cli("eval", "--config", cfg, "--out", tmp_path / "ev") == 0
        text = (tmp_path / "ev" / "eval_report.csv").read_text()
        assert text.startswith("accuracy_fraction")

    def test_analyze_outputs_report_kinds(self, trained_run, tmp_path):
        run, src, tgt = trained_run
        cfg = write_config(tmp_path / "a.json", {"run_dir": str(run), "max_tsne_samples": 64})
        assert run_cli("analyze", "--config", cfg, "--out", tmp_path / "an") == 0
        out = tmp_path / "an"
        assert (out / "eval_report.csv").exists()
        assert (out / "tsne_true.csv").exists()
        assert (out / "tsne_fake.csv").exists()
        assert (out / "kde_grid.csv").exists()
        attention = sorted((out / "attention").glob("sample_*_cam.csv"))
        assert attention
        assert sorted((out / "attention").glob("sample_*_cam.pgm"))

    def test_analyze_missing_run_exit_3(self, tmp_path):
        cfg = write_config(tmp_path / "a.json", {"run_dir": str(tmp_path / "ghost")})
        assert run_cli("analyze", "--config", cfg, "--out", tmp_path / "an") == 3


class TestSweepCommand:
    def test_sweep_two_cells(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(
            tmp_path / "s.json",
            {**train_config(src, tgt), "command": "sweep", "ratios": [0.5], "seeds": [0, 1]},
        )
        assert run_cli("sweep", "--config", cfg, "--out", tmp_path / "sw") == 0
        lines = (tmp_path / "sw" / "sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "ratio,seed,acc_target_test"
        assert len(lines) == 3
        assert (tmp_path / "sw" / "ratio_0.50_seed_1" / "runlog.csv").exists()

    def test_ratios_flag_overrides(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(
            tmp_path / "s.json",
            {**train_config(src, tgt), "command": "sweep", "ratios": [0.5, 0.6], "seeds": [0]},
        )
        code = run_cli("sweep", "--config", cfg, "--out", tmp_path / "sw2", "--ratios", "0.5")
        assert code == 0
        lines = (tmp_path / "sw2" / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_bad_ratio_exit_2(self, tiny_datasets, tmp_path):
        src, tgt = tiny_datasets
        cfg = write_config(
            tmp_path / "s.json",
            {**train_config(src, tgt), "command": "sweep", "ratios": [1.5], "seeds": [0]},
        )
        assert run_cli("sweep", "--config", cfg, "--out", tmp_path / "sw3") == 2


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"domain": "source", "spacing_mm": 200.0}))
        proc = subprocess.run(
            [sys.executable, "-m", "inloc.cli", "gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "d" / "manifest.json").exists()
