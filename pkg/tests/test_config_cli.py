import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from duodet.cli import main
from duodet.config import RunConfig
from duodet.errors import UsageError


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig.default()
        assert cfg.scene.height == 64 and cfg.scene.width == 80
        assert cfg.train.alpha == 0.001
        assert cfg.degrade.probability == 0.3
        assert cfg.degrade.mu == 127.45
        assert cfg.degrade.sigma2 == 2440.0
        assert cfg.eval.nms_iou == 0.65

    def test_echo_round_trips(self):
        cfg = RunConfig.default().with_overrides(
            ["train.lr=0.02", "scene.night_ratio=0.25", "train.aux=false",
             "train.consistency=false", "eval.mr_floor=0.001"])
        text = cfg.echo()
        back = RunConfig.default().merged_with_text(text)
        assert back == cfg
        assert back.echo() == text

    def test_unknown_key_rejected(self):
        with pytest.raises(UsageError, match="lerning_rate"):
            RunConfig.default().merged_with_text("[train]\nlerning_rate = 0.1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(UsageError, match="extras"):
            RunConfig.default().merged_with_text("[extras]\nx = 1\n")

    def test_bad_override_shape_rejected(self):
        with pytest.raises(UsageError):
            RunConfig.default().with_overrides(["train=0.1"])
        with pytest.raises(UsageError):
            RunConfig.default().with_overrides(["train.lr=abc"])

    def test_validation_propagates(self):
        with pytest.raises(UsageError, match="auxiliary"):
            RunConfig.default().with_overrides(["train.aux=false"])


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = run_cli("gen", "--seed", 5, "--n-train", 6, "--n-test", 4,
                   "--height", 32, "--width", 32, "--out", root)
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = run_cli("train", "--data", small_dataset, "--out", out,
                   "--epochs", 2, "--batch-size", 3, "--seed", 1,
                   "--set", "scene.height=32", "--set", "scene.width=32")
    assert code == 0
    return out


class TestGen:
    def test_reruns_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("gen", "--seed", 7, "--n-train", 3, "--n-test", 2,
                           "--height", 32, "--width", 32, "--out", out) == 0
        assert (a / "meta.json").read_bytes() == (b / "meta.json").read_bytes()
        assert (a / "config.echo").read_bytes() == (b / "config.echo").read_bytes()

    def test_zero_train_count_is_usage_error(self, tmp_path, capsys):
        code = run_cli("gen", "--n-train", 0, "--n-test", 2, "--out", tmp_path / "x")
        assert code == 1
        assert "n-train" in capsys.readouterr().err

    def test_default_extents_in_manifest(self, tmp_path):
        out = tmp_path / "d"
        assert run_cli("gen", "--seed", 7, "--n-train", 2, "--n-test", 2,
                       "--out", out) == 0
        meta = json.loads((out / "meta.json").read_text())
        assert meta["height"] == 64 and meta["width"] == 80


class TestTrain:
    def test_emits_both_checkpoints_and_metrics(self, trained):
        assert (trained / "ckpt.base").exists()
        assert (trained / "ckpt.aux").exists()
        lines = (trained / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 2  # header + steps (6 samples, batch 3, 2 epochs)
        assert (trained / "loss_curves.png").exists()
        assert (trained / "config.echo").exists()

    def test_no_aux_single_checkpoint(self, small_dataset, tmp_path):
        out = tmp_path / "solo"
        assert run_cli("train", "--data", small_dataset, "--out", out,
                       "--epochs", 1, "--no-aux") == 0
        assert (out / "ckpt.aux").exists()
        assert not (out / "ckpt.base").exists()

    def test_missing_dataset_usage_error(self, tmp_path, capsys):
        code = run_cli("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o")
        assert code == 1
        assert "meta.json" in capsys.readouterr().err


class TestEval:
    def test_three_condition_table(self, trained, small_dataset, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run_cli("eval", trained / "ckpt.base", small_dataset,
                       "balanced", "drop:rgb", "drop:tir", "--out", out)
        assert code == 0
        stdout = capsys.readouterr().out
        table_rows = [l for l in stdout.splitlines()
                      if l.startswith(("balanced", "drop:rgb", "drop:tir"))]
        assert len(table_rows) == 3
        assert "checkpoint sha256:" in stdout
        report = json.loads((out / "report.json").read_text())
        assert set(report["conditions"]) == {"balanced", "drop:rgb", "drop:tir"}
        assert report["checkpoint_sha256"]

    def test_unknown_condition_is_usage_error(self, trained, small_dataset, tmp_path, capsys):
        code = run_cli("eval", trained / "ckpt.base", small_dataset,
                       "drop:depth", "--out", tmp_path / "e")
        assert code == 1
        assert "grammar" in capsys.readouterr().err

    def test_missing_checkpoint_is_io_error(self, small_dataset, tmp_path, capsys):
        code = run_cli("eval", tmp_path / "ghost.base", small_dataset, "balanced",
                       "--out", tmp_path / "e")
        assert code == 2

    def test_export_features(self, trained, small_dataset, tmp_path):
        feat = tmp_path / "features.csv"
        code = run_cli("eval", trained / "ckpt.base", small_dataset, "balanced",
                       "--out", tmp_path / "e", "--export-features", feat)
        assert code == 0
        lines = feat.read_text().splitlines()
        assert lines[0].startswith("id,level,class,f00")
        assert len(lines) > 1


class TestCompare:
    def _write_report(self, path, lamr_by_cond, ap=50.0):
        doc = {"conditions": {
            name: {"lamr": v, "lamr_day": v, "lamr_night": v,
                   "ap50": {"mean": ap}, "counts": {}}
            for name, v in lamr_by_cond.items()}}
        Path(path).write_text(json.dumps(doc))

    def test_self_compare_all_zero(self, tmp_path, capsys):
        r = tmp_path / "r.json"
        self._write_report(r, {"balanced": 12.5, "drop:rgb": 40.0})
        assert run_cli("compare", r, r) == 0
        out = capsys.readouterr().out
        assert out.count("+0.00 (+0.0%)") == 2

    def test_disjoint_reports_rejected(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        self._write_report(a, {"balanced": 10.0})
        self._write_report(b, {"drop:rgb": 10.0})
        assert run_cli("compare", a, b) == 1
        err = capsys.readouterr().err
        assert "balanced" in err and "drop:rgb" in err

    def test_improvement_delta_formatting(self, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        self._write_report(a, {"drop:tir:0": 70.72})
        self._write_report(b, {"drop:tir:0": 31.35})
        assert run_cli("compare", a, b) == 0
        out = capsys.readouterr().out
        assert "-39.37 (-55.7%)" in out


class TestPipelineDeterminism:
    def test_gen_train_eval_reproduces_bytes(self, tmp_path):
        env_dir = tmp_path

        def pipeline(tag):
            base = env_dir / tag
            base.mkdir()
            gen_cmd = [sys.executable, "-m", "duodet", "gen", "--seed", "3",
                       "--n-train", "6", "--n-test", "4", "--height", "32",
                       "--width", "32", "--out", "data"]
            train_cmd = [sys.executable, "-m", "duodet", "train",
                         "--data", "data", "--out", "run",
                         "--epochs", "2", "--batch-size", "3", "--seed", "2"]
            eval_cmd = [sys.executable, "-m", "duodet", "eval",
                        "run/ckpt.base", "data",
                        "balanced", "drop:rgb", "noise:tir:10",
                        "--out", "eval"]
            for cmd in (gen_cmd, train_cmd, eval_cmd):
                proc = subprocess.run(cmd, capture_output=True, text=True, cwd=base)
                assert proc.returncode == 0, proc.stderr
            return base

        a = pipeline("a")
        b = pipeline("b")
        for rel in ("data/meta.json", "run/ckpt.base", "run/ckpt.aux",
                    "eval/report.json", "eval/curves/balanced.csv",
                    "eval/curves/noise_tir_10.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        strip = lambda p: ["".join(l.split(",")[:-1]) for l in p.read_text().splitlines()]
        assert strip(a / "run/metrics.csv") == strip(b / "run/metrics.csv")
