"""Test config parsing, validation and presets"""

import pytest

from gpvit_desk.config import (
    ModelConfig,
    config_digest,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from gpvit_desk.errors import ConfigError
from gpvit_desk.presets import ablation_presets, get_preset, list_presets
from tests.fixtures import sample_config_yaml, sample_tiny_config


class TestParseConfig:
    """Test YAML parsing into ModelConfig"""

    @pytest.fixture(autouse=True)
    def setup_teardown(self, tmp_path):
        self.tmp_path = tmp_path
        yield

    def test_parse_fields(self):
        """Test a flat mapping becomes a validated config"""
        cfg = parse_config(sample_config_yaml())
        assert cfg.name == "yaml-tiny"
        assert cfg.channels == 16
        assert cfg.depth == 3
        assert cfg.gp_positions == [1]
        assert cfg.layer_kinds() == ["lepe", "gp", "lepe"]
        assert cfg.grid == 4

    def test_empty_document_is_defaults(self):
        """Test an empty file yields the default (L1-shaped) config"""
        cfg = parse_config("")
        assert cfg.channels == 216
        assert cfg.gp_group_counts == [64, 32, 32, 16]

    def test_preset_key_with_override(self):
        """Test `preset:` starts from a preset and other keys override it"""
        cfg = parse_config("preset: gpvit-l2\nnum_classes: 10\ninput_size: 64\n")
        assert cfg.channels == 348
        assert cfg.num_classes == 10
        assert cfg.input_size == 64
        assert cfg.drop_path == 0.2

    def test_unknown_preset(self):
        """Test an unknown preset names the line"""
        with pytest.raises(ConfigError, match=r"cfg.yaml:2: preset: Unknown preset"):
            parse_config("num_classes: 3\npreset: gpvit-l9\n", source="cfg.yaml")

    def test_unknown_key(self):
        """Test an unknown key is rejected with its line"""
        with pytest.raises(ConfigError, match=r"cfg.yaml:3: chanels"):
            parse_config("name: x\ndepth: 2\nchanels: 8\n", source="cfg.yaml")

    def test_field_error_names_line_and_field(self):
        """Test a bad value reports file, line and field"""
        with pytest.raises(ConfigError, match=r"cfg.yaml:2: patch_size: .*8 or 16"):
            parse_config("name: x\npatch_size: 4\n", source="cfg.yaml")

    def test_schedule_position_out_of_range(self):
        """Test a GP position past the depth is attributed to gp_positions"""
        text = "depth: 3\nnum_heads: 2\nchannels: 8\ngp_positions: [5]\ngp_group_counts: [4]\n"
        with pytest.raises(ConfigError, match=r"cfg.yaml:4: gp_positions: .*outside"):
            parse_config(text, source="cfg.yaml")

    def test_schedule_length_mismatch(self):
        """Test positions and counts of different lengths are rejected"""
        with pytest.raises(ConfigError, match="gp_group_counts has 1"):
            parse_config("gp_positions: [1, 4]\ngp_group_counts: [8]\n")

    def test_invalid_yaml(self):
        """Test a syntax error carries the source"""
        with pytest.raises(ConfigError, match="cfg.yaml.*invalid YAML"):
            parse_config("depth: [1, 2\n", source="cfg.yaml")

    def test_not_a_mapping(self):
        """Test a list document is rejected"""
        with pytest.raises(ConfigError, match="mapping"):
            parse_config("- 1\n- 2\n")

    def test_dump_round_trip(self):
        """Test dump_config output parses back to an equal config"""
        cfg = sample_tiny_config(propagation="selfattn", drop_path=0.1)
        assert parse_config(dump_config(cfg)) == cfg

    def test_save_and_load(self):
        """Test save_config then load_config from disk"""
        path = self.tmp_path / "nested" / "model.yaml"
        cfg = sample_tiny_config()
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_load_missing_file(self):
        """Test an unreadable file raises OSError naming the path"""
        path = self.tmp_path / "missing.yaml"
        with pytest.raises(OSError, match="missing.yaml"):
            load_config(path)


class TestModelConfig:
    """Test cross-field validation and derived values"""

    def test_heads_must_divide_channels(self):
        with pytest.raises(ValueError, match="not divisible by num_heads"):
            sample_tiny_config(num_heads=5)

    def test_lepe_needs_even_heads(self):
        """Test LePE attention splits heads into two strip halves"""
        with pytest.raises(ValueError, match="even num_heads"):
            sample_tiny_config(channels=12, num_heads=3)

    def test_positions_strictly_increasing(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            sample_tiny_config(depth=4, gp_positions=[2, 1], gp_group_counts=[4, 4])

    def test_input_multiple_of_patch(self):
        with pytest.raises(ValueError, match="multiple of patch_size"):
            sample_tiny_config(input_size=30)

    def test_baseline_has_no_gp(self):
        with pytest.raises(ValueError, match="no GP positions"):
            sample_tiny_config(family="vit-baseline")

    def test_zero_group_count(self):
        with pytest.raises(ValueError, match="group counts must be >= 1"):
            sample_tiny_config(gp_group_counts=[0])

    def test_layer_kinds_with_override(self):
        """Test block_override replaces the GP layers only"""
        cfg = sample_tiny_config(depth=3, block_override="conv", attention="window")
        assert cfg.layer_kinds() == ["window", "conv", "window"]
        assert cfg.group_count_at(1) == 4
        assert cfg.group_count_at(0) is None

    def test_drop_path_rates_linear(self):
        cfg = sample_tiny_config(depth=3, drop_path=0.2)
        assert cfg.drop_path_rates() == pytest.approx([0.0, 0.1, 0.2])
        assert sample_tiny_config(depth=1, gp_positions=[0]).drop_path_rates() == [0.0]

    def test_digest_stable_and_sensitive(self):
        """Test equal configs share a digest and any field change alters it"""
        a = sample_tiny_config()
        assert config_digest(a) == config_digest(sample_tiny_config())
        assert len(config_digest(a)) == 32
        assert config_digest(a) != config_digest(sample_tiny_config(num_classes=5))


class TestPresets:
    """Test the shipped configurations"""

    def test_gpvit_widths(self):
        """Test the four widths share the L1 schedule"""
        for name, channels in (("gpvit-l1", 216), ("gpvit-l2", 348), ("gpvit-l3", 432), ("gpvit-l4", 624)):
            cfg = get_preset(name)
            assert cfg.channels == channels
            assert cfg.depth == 12
            assert cfg.gp_positions == [1, 4, 7, 10]
            assert cfg.gp_group_counts == [64, 32, 32, 16]
            assert cfg.patch_size == 8

    def test_baselines(self):
        cfg = get_preset("vit-d216-p16")
        assert cfg.family == "vit-baseline"
        assert cfg.gp_positions == []
        assert cfg.layer_kinds() == ["global"] * 12
        assert not cfg.stem_projection
        assert cfg.grid == 14

    def test_case_insensitive(self):
        assert get_preset("GPViT-L1").name == "gpvit-l1"

    def test_unknown(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            get_preset("gpvit-l9")

    def test_every_preset_builds(self):
        """Test every registered preset validates"""
        names = list_presets()
        assert len(names) == len(set(names))
        for name in names:
            assert isinstance(get_preset(name), ModelConfig)

    def test_ablation_rows(self):
        """Test the ablation presets cover blocks, groups and cores"""
        rows = ablation_presets()
        assert "l1-win-win-shift" in rows
        assert "l1-lepe-gp" in rows
        assert "l1-groups-16-32-32-64" in rows
        assert "l1-prop-selfattn" in rows
        assert get_preset("l1-win-local").layer_kinds()[:3] == ["window", "local", "window"]
        assert get_preset("l1-prop-none").propagation == "none"
