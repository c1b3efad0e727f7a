"""
Tests for fleet_config: presets, key=value rendering and parsing, override
layering and validation.
"""

import pytest

from fleet_config import (
    RunConfig,
    apply_overrides,
    parse_set_flags,
    read_key_values,
    resolve_config,
    validate_run_config,
)
from fleet_errors import ConfigError


def _levels(issues, key):
    return [i.level for i in issues if i.key == key]


# ============================================================================
# Presets / rendering
# ============================================================================


class TestPresets:
    """Named override sets over the dataclass defaults."""

    def test_published_defaults(self):
        cfg = RunConfig.from_preset("published")
        assert cfg.model.model_dim == cfg.tokenizer.model_dim == 512
        assert cfg.model.num_layers == 4
        assert cfg.tokenizer.patch_len == cfg.tokenizer.stride == 128
        assert cfg.training.mask_ratio == 0.3
        assert cfg.loss.alpha == 10.0
        assert cfg.finetune.trainable == "heads"

    def test_tiny(self):
        cfg = RunConfig.from_preset("tiny")
        assert cfg.model.model_dim == cfg.tokenizer.model_dim == 8
        assert cfg.data.source_fleets == ("tiny_a",)
        assert cfg.training.precision == "float64"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            RunConfig.from_preset("huge")

    @pytest.mark.parametrize("name", ["published", "desk", "tiny"])
    def test_presets_validate_cleanly(self, name):
        issues = validate_run_config(RunConfig.from_preset(name))
        assert not [i for i in issues if i.level == "error"]


class TestTextForm:
    """to_text / from_text and the config hash."""

    @pytest.mark.parametrize("name", ["published", "desk", "tiny"])
    def test_round_trip(self, name):
        cfg = RunConfig.from_preset(name)
        assert RunConfig.from_text(cfg.to_text()) == cfg
        assert cfg.copy() == cfg

    def test_sorted_keys(self):
        keys = [line.split("=", 1)[0] for line in RunConfig().to_text().splitlines()]
        assert keys == sorted(keys)

    def test_hash_is_stable_and_sensitive(self):
        a, b = RunConfig.from_preset("desk"), RunConfig.from_preset("desk")
        assert a.config_hash() == b.config_hash()
        assert len(a.config_hash()) == 16
        b.training.seed = 1
        assert a.config_hash() != b.config_hash()

    def test_read_key_values_skips_comments(self):
        pairs = read_key_values("# note\n\nmodel.num_layers = 3\nloss.alpha=7.5\n")
        assert pairs == [("model.num_layers", "3"), ("loss.alpha", "7.5")]

    def test_line_without_equals(self):
        with pytest.raises(ConfigError, match="line 2"):
            read_key_values("a=1\nnot a pair\n")


# ============================================================================
# Overrides
# ============================================================================


class TestOverrides:
    """Typed coercion, the width alias and unknown keys."""

    def test_types_are_coerced(self):
        cfg = apply_overrides(RunConfig(), [
            ("model.num_layers", "2"),
            ("loss.alpha", "12.5"),
            ("finetune.cache_features", "false"),
            ("data.fleets", "fleet_a, fleet_c"),
            ("data.split", "0.8,0.1,0.1"),
        ])
        assert cfg.model.num_layers == 2
        assert cfg.loss.alpha == 12.5
        assert cfg.finetune.cache_features is False
        assert cfg.data.fleets == ("fleet_a", "fleet_c")
        assert cfg.data.split == (0.8, 0.1, 0.1)

    def test_width_alias_sets_both(self):
        cfg = apply_overrides(RunConfig(), [("model.model_dim", "32")])
        assert cfg.model.model_dim == cfg.tokenizer.model_dim == 32

    @pytest.mark.parametrize("key", ["model.width", "optimizer.lr", "model"])
    def test_unknown_key(self, key):
        with pytest.raises(ConfigError, match="Unknown config key"):
            apply_overrides(RunConfig(), [(key, "1")])

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="model.num_layers"):
            apply_overrides(RunConfig(), [("model.num_layers", "four")])

    def test_set_flags(self):
        assert parse_set_flags(["a.b=1", " c.d = x=y "]) == [("a.b", "1"), ("c.d", "x=y")]
        assert parse_set_flags(None) == []
        with pytest.raises(ConfigError):
            parse_set_flags(["no_equals"])


# ============================================================================
# Resolution / validation
# ============================================================================


class TestResolve:
    """preset (or base) <- config file <- --set <- seed/precision."""

    def test_layering(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.num_layers=3\ntraining.lr=0.5\n")
        cfg = resolve_config("tiny", str(path), ["training.lr=0.25"], seed=9, precision="float32")
        assert cfg.model.model_dim == 8
        assert cfg.model.num_layers == 3
        assert cfg.training.lr == 0.25
        assert cfg.training.seed == 9
        assert cfg.training.precision == "float32"

    def test_base_replaces_preset(self):
        base = RunConfig.from_preset("tiny")
        base.training.seed = 5
        cfg = resolve_config("desk", base=base)
        assert cfg.model.model_dim == 8 and cfg.training.seed == 5
        assert base.training.seed == 5

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            resolve_config("tiny", str(tmp_path / "absent.cfg"))

    def test_invalid_result_raises(self):
        with pytest.raises(ConfigError, match="loss.alpha"):
            resolve_config("tiny", set_flags=["loss.alpha=0"])


class TestValidate:
    """Errors versus warnings."""

    def test_small_alpha_warns(self):
        cfg = RunConfig.from_preset("tiny")
        cfg.loss.alpha = 5.0
        assert _levels(validate_run_config(cfg), "loss.alpha") == ["warn"]

    @pytest.mark.parametrize("alpha", [0.0, -2.0])
    def test_non_positive_alpha_is_an_error(self, alpha):
        cfg = RunConfig.from_preset("tiny")
        cfg.loss.alpha = alpha
        assert _levels(validate_run_config(cfg), "loss.alpha") == ["error"]

    def test_heads_must_divide_width(self):
        cfg = apply_overrides(RunConfig.from_preset("tiny"), [("model.num_heads", "3")])
        assert "error" in _levels(validate_run_config(cfg), "model.num_heads")

    def test_stride_beyond_patch_warns(self):
        cfg = apply_overrides(RunConfig.from_preset("tiny"), [("tokenizer.stride", "8")])
        assert _levels(validate_run_config(cfg), "tokenizer.stride") == ["warn"]

    def test_mismatched_widths(self):
        cfg = RunConfig.from_preset("tiny")
        cfg.tokenizer.model_dim = 16
        assert "error" in _levels(validate_run_config(cfg), "model.model_dim")

    @pytest.mark.parametrize("key,value", [
        ("training.mask_ratio", "1.0"),
        ("training.precision", "float16"),
        ("finetune.trainable", "backbone"),
        ("finetune.label_fraction", "0"),
        ("model.dropout", "1.0"),
        ("data.split", "0.5,0.5,0.5"),
    ])
    def test_range_errors(self, key, value):
        cfg = apply_overrides(RunConfig.from_preset("tiny"), [(key, value)])
        with pytest.raises(ConfigError, match=key):
            validate_run_config(cfg, raise_on_error=True)
