"""Test the gpvit-desk command line"""

import json

import pandas as pd
import pytest
from click.testing import CliRunner

from gpvit_desk.cli import cli
from gpvit_desk.config import config_digest
from gpvit_desk.image_io import write_ppm
from gpvit_desk.manifest import file_digest
from gpvit_desk.presets import get_preset
from tests.fixtures import sample_config_yaml, sample_image


class TestCli:
    """Test each command end to end on tiny presets"""

    @pytest.fixture(autouse=True)
    def setup_teardown(self, tmp_path):
        self.tmp_path = tmp_path
        self.runner = CliRunner()
        yield

    def invoke(self, *args):
        return self.runner.invoke(cli, list(args))

    def manifest(self, out):
        return json.loads((out / "manifest.json").read_text())

    def test_analyze(self):
        out = self.tmp_path / "analyze"
        result = self.invoke("analyze", "--preset", "gpvit-l1", "--input", "224", "--out", str(out))
        assert result.exit_code == 0, result.output
        report = json.loads((out / "cost_report.json").read_text())
        assert abs(report["total_params"] - 9.3e6) <= 0.03 * 9.3e6
        assert abs(report["total_flops"] - 5.8e9) <= 0.10 * 5.8e9
        curves = pd.read_csv(out / "scaling_tokens.csv")
        assert "gp-64" in curves.columns
        assert (out / "scaling_channels.csv").exists()

        manifest = self.manifest(out)
        assert manifest["succeeded"]
        assert manifest["error"] is None
        assert manifest["out_dir"] == str(out)
        assert manifest["config_path"] is None
        assert "git_describe" in manifest
        assert manifest["config_digest"] == config_digest(get_preset("gpvit-l1")).hex()
        for artifact in manifest["artifacts"]:
            assert artifact["sha256"] == file_digest(out / artifact["path"])

    def test_analyze_rejects_zero_input(self):
        result = self.invoke("analyze", "--input", "0", "--out", str(self.tmp_path / "a"))
        assert result.exit_code == 2

    def test_analyze_bad_input_multiple(self):
        """Test a size that is not a multiple of the patch is a config error"""
        result = self.invoke("analyze", "--input", "230", "--out", str(self.tmp_path / "a"))
        assert result.exit_code == 1
        assert "multiple of patch size" in result.output

    def test_preset_and_config_conflict(self):
        path = self.tmp_path / "cfg.yaml"
        path.write_text(sample_config_yaml())
        result = self.invoke("analyze", "--preset", "gpvit-l1", "--config", str(path), "--out", str(self.tmp_path / "c"))
        assert result.exit_code == 2

    def test_config_file(self):
        path = self.tmp_path / "cfg.yaml"
        path.write_text(sample_config_yaml())
        out = self.tmp_path / "yaml"
        result = self.invoke("analyze", "--config", str(path), "--out", str(out))
        assert result.exit_code == 0, result.output
        assert json.loads((out / "cost_report.json").read_text())["model"] == "yaml-tiny"

    def test_invalid_config_file(self):
        path = self.tmp_path / "cfg.yaml"
        path.write_text("name: x\npatch_size: 4\n")
        result = self.invoke("analyze", "--config", str(path), "--out", str(self.tmp_path / "x"))
        assert result.exit_code == 1
        assert "patch_size" in result.output

    def test_failure_still_writes_manifest(self):
        """Test a config that fails validation leaves a failed manifest naming the error"""
        path = self.tmp_path / "bad.yaml"
        path.write_text("name: x\npatch_size: 4\n")
        out = self.tmp_path / "bad"
        result = self.invoke("analyze", "--config", str(path), "--out", str(out))
        assert result.exit_code == 1
        manifest = self.manifest(out)
        assert manifest["succeeded"] is False
        assert "patch_size" in manifest["error"]
        assert manifest["config_path"] == str(path)
        assert manifest["model"] is None
        assert manifest["artifacts"] == []

    def test_usage_error_writes_manifest(self):
        out = self.tmp_path / "cap"
        result = self.invoke("gradcheck", "--preset", "gpvit-l1", "--out", str(out))
        assert result.exit_code == 2
        manifest = self.manifest(out)
        assert not manifest["succeeded"]
        assert manifest["model"] == "gpvit-l1"
        assert "cap" in manifest["error"]

    def test_unknown_preset(self):
        result = self.invoke("analyze", "--preset", "gpvit-l9", "--out", str(self.tmp_path / "x"))
        assert result.exit_code == 1
        assert "Unknown preset" in result.output

    def test_gradcheck_subset(self):
        out = self.tmp_path / "grad"
        result = self.invoke("gradcheck", "--only", "head.", "--only", "layers.1.group_tokens", "--out", str(out))
        assert result.exit_code == 0, result.output
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["passed"]
        assert report["max_rel_error"] < 1e-4
        assert self.manifest(out)["precision"] == "f64"

    def test_gradcheck_constant_loss(self):
        out = self.tmp_path / "const"
        result = self.invoke("gradcheck", "--constant-loss", "--only", "head", "--out", str(out))
        assert result.exit_code == 0, result.output
        assert json.loads((out / "gradcheck.json").read_text())["max_abs_gradient"] < 1e-12

    def test_gradcheck_cap(self):
        """Test a large model is refused as a usage error"""
        result = self.invoke("gradcheck", "--preset", "gpvit-l1", "--out", str(self.tmp_path / "g"))
        assert result.exit_code == 2
        assert "cap" in result.output

    def test_invariants_pass(self):
        out = self.tmp_path / "inv"
        result = self.invoke("invariants", "--only", "softmax,grouping,scaling", "--out", str(out))
        assert result.exit_code == 0, result.output
        report = json.loads((out / "invariants.json").read_text())
        assert report["passed"]

    def test_invariants_fault(self):
        out = self.tmp_path / "fault"
        result = self.invoke("invariants", "--only", "grouping", "--inject-fault", "softmax-axis", "--out", str(out))
        assert result.exit_code == 1
        assert not self.manifest(out)["succeeded"]

    def test_invariants_empty_selection(self):
        result = self.invoke("invariants", "--only", "", "--out", str(self.tmp_path / "e"))
        assert result.exit_code == 2

    def test_invariants_unknown_fault(self):
        result = self.invoke("invariants", "--inject-fault", "flip")
        assert result.exit_code == 2

    def test_export_groups_default_image(self):
        out = self.tmp_path / "groups"
        result = self.invoke("export-groups", "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "groups_layer01.pgm").exists()
        assert (out / "groups_layer01.ppm").exists()
        assert (out / "groups_layer01_weights.csv").exists()
        summary = json.loads((out / "groups.json").read_text())
        assert summary["blocks"][0]["num_groups"] == 8
        assert summary["blocks"][0]["grid"] == "4x4"

    def test_export_groups_from_image(self):
        image = self.tmp_path / "in.ppm"
        write_ppm(image, (sample_image(32) * 255).astype("uint8"))
        out = self.tmp_path / "img"
        result = self.invoke("export-groups", "--image", str(image), "--out", str(out))
        assert result.exit_code == 0, result.output
        assert (out / "groups_layer01.pgm").exists()

    def test_export_groups_wrong_size(self):
        image = self.tmp_path / "big.ppm"
        write_ppm(image, (sample_image(48) * 255).astype("uint8"))
        result = self.invoke("export-groups", "--image", str(image), "--out", str(self.tmp_path / "x"))
        assert result.exit_code == 1
        assert "model expects 32x32" in result.output

    def test_export_groups_conflicting_inputs(self):
        result = self.invoke("export-groups", "--image", "a.ppm", "--constant", "0.5", "--out", str(self.tmp_path / "x"))
        assert result.exit_code == 2

    def test_train_then_export(self):
        """Test a short run writes metrics and a checkpoint that export-groups accepts"""
        out = self.tmp_path / "train"
        result = self.invoke("train-smoke", "--preset", "tiny-gradcheck", "--epochs", "2", "--classes", "2",
                             "--samples-per-class", "2", "--out", str(out))
        assert result.exit_code == 0, result.output
        metrics = pd.read_csv(out / "metrics.csv")
        assert len(metrics) == 2
        summary = json.loads((out / "train.json").read_text())
        assert summary["epochs_run"] == 2

        exported = self.tmp_path / "by-flag"
        result = self.invoke("export-groups", "--preset", "tiny-gradcheck", "--classes", "2",
                             "--checkpoint", str(out / "checkpoint.gpvt"), "--constant", "0.5", "--out", str(exported))
        assert result.exit_code == 0, result.output
        assert self.manifest(exported)["config_digest"] == self.manifest(out)["config_digest"]

        cfg = self.tmp_path / "two.yaml"
        cfg.write_text("preset: tiny-gradcheck\nnum_classes: 2\n")
        exported = self.tmp_path / "exported"
        result = self.invoke("export-groups", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.gpvt"),
                             "--constant", "0.5", "--out", str(exported))
        assert result.exit_code == 0, result.output
        assert (exported / "groups.json").exists()

    def test_export_without_classes_rejects_checkpoint(self):
        """Test the default class count does not match a checkpoint trained with --classes"""
        out = self.tmp_path / "train"
        result = self.invoke("train-smoke", "--preset", "tiny-gradcheck", "--epochs", "1", "--classes", "2",
                             "--samples-per-class", "1", "--out", str(out))
        assert result.exit_code == 0, result.output
        exported = self.tmp_path / "mismatch"
        result = self.invoke("export-groups", "--preset", "tiny-gradcheck",
                             "--checkpoint", str(out / "checkpoint.gpvt"), "--out", str(exported))
        assert result.exit_code == 1
        assert self.manifest(exported)["error"]

    def test_train_min_accuracy_failure(self):
        out = self.tmp_path / "fail"
        result = self.invoke("train-smoke", "--preset", "tiny-gradcheck", "--epochs", "1", "--lr", "0",
                             "--classes", "8", "--samples-per-class", "1", "--min-accuracy", "1.0", "--out", str(out))
        assert result.exit_code == 1
        assert not self.manifest(out)["succeeded"]

    def test_presets_json(self):
        result = self.invoke("presets", "--format", "json")
        assert result.exit_code == 0, result.output
        rows = json.loads(result.output)
        names = [row["name"] for row in rows]
        assert "gpvit-l1" in names and "tiny-invariants" in names
        l2 = next(row for row in rows if row["name"] == "gpvit-l2")
        assert abs(l2["flops"] - 15.0e9) <= 0.10 * 15.0e9
