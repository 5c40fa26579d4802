"""Test the analytic parameter and FLOP model"""

import json

import numpy as np
import pandas as pd
import pytest

from gpvit_desk.config import ModelConfig
from gpvit_desk.cost import (
    CostReport,
    attention_mixing_flops,
    block_flops,
    count_flops,
    count_params,
    emit_report,
    gp_block_flops,
    head_flops,
    head_params,
    scaling_series,
    scaling_series_channels,
    scaling_table,
    stem_flops,
    stem_params,
)
from gpvit_desk.errors import ConfigError
from gpvit_desk.model import build_model
from gpvit_desk.presets import get_preset
from tests.fixtures import sample_minimal_config, sample_tiny_config


def within(value, target, tolerance):
    return abs(value - target) <= tolerance * target


class TestPublishedCounts:
    """Test presets land on the published sizes"""

    @pytest.mark.parametrize("name,millions", [
        ("gpvit-l1", 9.3), ("gpvit-l2", 23.6), ("gpvit-l3", 36.2), ("gpvit-l4", 75.4),
        ("vit-d216-p16", 7.4), ("vit-d348-p16", 18.5), ("vit-d432-p16", 28.5), ("vit-d624-p16", 57.9),
    ])
    def test_params_within_three_percent(self, name, millions):
        assert within(count_params(get_preset(name)), millions * 1e6, 0.03)

    @pytest.mark.parametrize("name,giga", [
        ("gpvit-l1", 5.8), ("gpvit-l2", 15.0), ("gpvit-l3", 22.9), ("gpvit-l4", 48.2),
        ("vit-d216-p16", 1.8), ("vit-d216-p8", 8.8),
    ])
    def test_flops_within_ten_percent(self, name, giga):
        assert within(count_flops(get_preset(name), 224), giga * 1e9, 0.10)


class TestCountsMatchBuiltModels:
    """Test analytic counts equal the parameter tally of built models"""

    @pytest.mark.parametrize("name", ["tiny-gradcheck", "tiny-forward", "tiny-train", "tiny-invariants"])
    def test_tiny_presets(self, name):
        cfg = get_preset(name)
        assert count_params(cfg) == build_model(cfg).num_parameters()

    @pytest.mark.parametrize("overrides", [
        {"propagation": "selfattn"},
        {"propagation": "none"},
        {"block_override": "conv"},
        {"block_override": "none"},
        {"block_override": "win-shift", "attention": "window"},
        {"block_override": "global-attn"},
        {"block_override": "local"},
        {"attention": "global"},
        {"gp_group_counts": [7], "mixer_token_ratio": 0.3},
    ])
    def test_variants(self, overrides):
        cfg = sample_tiny_config(**overrides)
        assert count_params(cfg) == build_model(cfg).num_parameters()

    def test_minimal(self):
        cfg = sample_minimal_config()
        assert count_params(cfg) == build_model(cfg).num_parameters()

    def test_patch16_baseline(self):
        cfg = get_preset("vit-d216-p16").model_copy(update={"channels": 24, "num_heads": 2, "input_size": 32})
        assert count_params(cfg) == build_model(cfg).num_parameters()


class TestEdgeCases:
    """Test degenerate sizes"""

    def test_depth_zero(self):
        """Test a model with no layers costs stem plus head"""
        cfg = ModelConfig(channels=16, depth=0, num_heads=2, gp_positions=[], gp_group_counts=[], num_classes=5)
        assert count_params(cfg) == stem_params(cfg) + head_params(cfg)
        assert count_flops(cfg) == stem_flops(cfg, 224) + head_flops(cfg)

    def test_zero_tokens(self):
        for kind in ("self-attn", "window", "lepe", "gp"):
            assert block_flops(kind, 216, 0) == 0

    def test_negative_tokens(self):
        with pytest.raises(ConfigError, match=">= 0"):
            block_flops("gp", 216, -1)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="Unknown block kind"):
            block_flops("pool", 216, 196)

    def test_input_not_multiple_of_patch(self):
        with pytest.raises(ConfigError, match="multiple of patch size"):
            count_flops(get_preset("gpvit-l1"), 230)


class TestScaling:
    """Test how block cost grows with the token count"""

    def test_gp_is_linear_in_tokens(self):
        """Test doubling N at most ~doubles GP cost for every group count"""
        tokens = [784, 1568, 3136, 12544]
        for groups in (16, 32, 64):
            costs = scaling_series("gp", 216, tokens, groups)
            for i in range(len(tokens) - 1):
                ratio = costs[i + 1] / costs[i]
                assert ratio <= 2.2 * tokens[i + 1] / (2 * tokens[i])

    def test_gp_affine_fit(self):
        tokens = np.array([196, 784, 3136, 12544], dtype=float)
        costs = np.array(scaling_series("gp", 216, tokens.astype(int).tolist(), 64), dtype=float)
        slope, intercept = np.polyfit(tokens, costs, 1)
        residual = np.abs(costs - (slope * tokens + intercept)).max() / costs.max()
        assert residual < 1e-3

    def test_self_attention_is_quadratic(self):
        assert block_flops("self-attn", 216, 8192) / block_flops("self-attn", 216, 4096) >= 3.5
        tokens = np.array([1024, 2048, 4096, 8192], dtype=float)
        costs = [block_flops("self-attn", 216, int(n)) for n in tokens]
        assert np.polyfit(tokens, costs, 2)[0] > 0

    def test_window_is_linear(self):
        assert block_flops("window", 216, 12544) / block_flops("window", 216, 3136) < 4.2

    def test_lepe_strips_grow_as_n_to_one_and_a_half(self):
        """Test full-length strips make the attention term scale with N * side"""

        def strip_term(side):
            tokens = side * side
            linear = 4 * tokens * 216 * 216 + 2 * 9 * tokens * 108
            return attention_mixing_flops(216, "strip-pair", (side, side)) - linear

        assert strip_term(112) == 8 * strip_term(56)
        ratio = block_flops("lepe", 216, 12544) / block_flops("lepe", 216, 3136)
        assert 4.0 < ratio < 8.0

    def test_ffn_toggle(self):
        base = gp_block_flops(216, 64, 3136, include_ffn=False)
        assert gp_block_flops(216, 64, 3136) - base == 2 * 3136 * 4 * 216 * 216
        assert block_flops("self-attn", 216, 196, include_ffn=True) > block_flops("self-attn", 216, 196)

    def test_channel_series_grows(self):
        costs = scaling_series_channels("gp", [216, 348, 432, 624], 3136)
        assert costs == sorted(costs)

    def test_table_columns(self):
        table = scaling_table(216, [196, 784])
        assert list(table.columns) == ["tokens", "self-attn", "window", "lepe", "gp-16", "gp-32", "gp-64"]
        assert table["tokens"].tolist() == [196, 784]


class TestCostReport:
    """Test the per-layer breakdown and its files"""

    @pytest.fixture(autouse=True)
    def setup_teardown(self, tmp_path):
        self.tmp_path = tmp_path
        self.report = emit_report(get_preset("gpvit-l1"), 224)
        yield

    def test_entries(self):
        """Test stem, twelve layers, head, and totals equal their sums"""
        layers = [e.layer for e in self.report.entries]
        assert layers == ["stem"] + [str(i) for i in range(12)] + ["head"]
        assert [e.kind for e in self.report.entries[1:13]].count("gp") == 4
        assert self.report.total_params == count_params(get_preset("gpvit-l1"))
        assert self.report.total_flops == count_flops(get_preset("gpvit-l1"), 224)
        assert self.report.convention == "mac"

    def test_json_round_trip(self):
        restored = CostReport.from_json(self.report.to_json())
        assert restored == self.report
        data = json.loads(self.report.to_json())
        assert data["total_params"] == self.report.total_params

    def test_write(self):
        json_path, csv_path = self.report.write(self.tmp_path / "out")
        assert json_path.name == "cost_report.json"
        frame = pd.read_csv(csv_path)
        assert list(frame.columns) == ["layer", "kind", "params", "flops"]
        assert frame["params"].sum() == self.report.total_params

    def test_write_failure_names_directory(self):
        blocker = self.tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="Cannot write cost report"):
            self.report.write(blocker / "sub")

    def test_other_input_size(self):
        """Test the token-dependent part shrinks with the input"""
        small = emit_report(get_preset("gpvit-l1"), 112)
        assert small.total_params == self.report.total_params
        assert small.total_flops < self.report.total_flops
