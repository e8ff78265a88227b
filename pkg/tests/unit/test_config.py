"""Unit tests for the run configuration: YAML round trip, validation, overrides, ablations."""

from pathlib import Path

import pytest
from conftest import make_config

from mot_hra.config import (
    AblationFlags,
    ConfigError,
    RunConfig,
    ablation_flags,
    ablation_name,
    apply_ablation,
    config_digest,
    load_config,
    parse,
    render,
    with_overrides,
)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


class TestRoundTrip:
    def test_render_parse_is_lossless(self):
        config = make_config()
        assert parse(render(config)) == config
        assert config_digest(parse(render(config))) == config_digest(config)

    def test_defaults_without_a_file(self):
        assert load_config(None) == RunConfig()

    def test_default_file_matches_the_defaults(self):
        assert load_config(CONFIG_DIR / "default.yaml") == RunConfig()

    def test_desk_scale_file_loads(self):
        config = load_config(CONFIG_DIR / "desk-scale.yaml")
        assert config.optim.lr == pytest.approx(1.0e-3)

    def test_partial_file_keeps_defaults(self, tmp_path):
        path = tmp_path / "partial.yaml"
        path.write_text("sampling:\n  cfg_scale: 3.5\n", encoding="utf-8")
        config = load_config(path)
        assert config.sampling.cfg_scale == 3.5
        assert config.sampling.flow_steps == RunConfig().sampling.flow_steps

    def test_coord_range_is_a_tuple(self):
        config = parse("model:\n  coord_range: [-2.0, 2.0]\n")
        assert config.model.coord_range == (-2.0, 2.0)

    def test_digest_changes_with_content(self):
        assert config_digest(make_config()) != config_digest(make_config(seed__root=8))


class TestValidation:
    """Every bad input surfaces as ConfigError."""

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_invalid_yaml(self):
        with pytest.raises(ConfigError, match="invalid YAML"):
            parse("trunk: [unclosed")

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            parse("trainer:\n  steps: 3\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse("trunk:\n  layers: 3\n")

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            parse("trunk:\n  depth: deep\n")

    def test_width_must_divide_heads(self):
        with pytest.raises(ConfigError, match="divisible"):
            parse("trunk:\n  width: 10\n  heads: 4\n")

    @pytest.mark.parametrize(
        "text",
        [
            "model:\n  bins: 1\n",
            "model:\n  coord_range: [1.0, -1.0]\n",
            "sampling:\n  flow_steps: 0\n",
            "sampling:\n  instruction_dropout: 1.5\n",
            "schedule:\n  warmup_steps: 5000\n",
            "optim:\n  ema_decay: 1.0\n",
            "loss:\n  lambda_m: -1.0\n",
            "eval:\n  split: validation\n",
            "model:\n  dtype: float16\n",
        ],
    )
    def test_out_of_range_values(self, text):
        with pytest.raises(ConfigError):
            parse(text)


class TestOverrides:
    def test_none_values_are_skipped(self):
        config = make_config()
        assert with_overrides(config, {"sampling.cfg_scale": None}) == config

    def test_override_applies(self):
        config = with_overrides(make_config(), {"sampling.cfg_scale": 1.0, "seed.root": 3})
        assert config.sampling.cfg_scale == 1.0
        assert config.seed.root == 3

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            with_overrides(make_config(), {"sampling.guidance": 2.0})

    def test_override_is_validated(self):
        with pytest.raises(ConfigError):
            with_overrides(make_config(), {"sampling.flow_steps": 0})


class TestAblations:
    def test_named_flags(self):
        assert ablation_flags("none") == AblationFlags()
        assert ablation_flags("no-intention") == AblationFlags(no_intention=True)
        with pytest.raises(ConfigError, match="unknown ablation"):
            ablation_flags("no-vision")

    def test_disabled_components_lose_their_loss_weight(self):
        flags = AblationFlags(no_traj3d=True, no_intention=True, no_insulation=True)
        config = apply_ablation(make_config(), flags)
        assert config.loss.lambda_3d == 0.0
        assert config.loss.lambda_m == 0.0
        assert config.loss.lambda_a == 1.0
        assert config.trunk.insulate is False
        assert config.ablation == flags

    def test_no_flags_keeps_the_config(self):
        config = make_config()
        assert apply_ablation(config) == config

    def test_ablation_name(self):
        assert ablation_name(AblationFlags()) == "none"
        assert ablation_name(AblationFlags(no_traj3d=True, no_insulation=True)) == (
            "no-traj3d,no-insulation"
        )
