from pathlib import Path

import pytest
import yaml

from src.utils.config import RunConfig, build_config, dump_config, load_yaml, parse_config
from src.utils.errors import ConfigError, ConfigRangeError

ROOT = Path(__file__).resolve().parents[1]


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("", encoding="utf-8")
    assert parse_config(path) == RunConfig()


def test_repo_settings_match_defaults():
    assert parse_config(ROOT / "config" / "settings.yaml") == RunConfig()


def test_override_reflected():
    cfg = parse_config(None, ["diffusion.T=10", "data.shape=[16, 16, 4]"])
    assert cfg.diffusion.T == 10
    assert cfg.data.shape == (16, 16, 4)
    assert cfg.latent_shape == (8, 8, 2)


def test_file_then_override_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("diffusion:\n  T: 50\nseed: 3\n", encoding="utf-8")
    cfg = parse_config(path, ["diffusion.T=7"])
    assert cfg.diffusion.T == 7
    assert cfg.seed == 3


def test_indivisible_t_names_both_keys():
    with pytest.raises(ConfigRangeError) as err:
        parse_config(None, ["compression.t=3"])
    assert "data.shape" in err.value.keys
    assert "compression.t" in err.value.keys


def test_unknown_key():
    with pytest.raises(ConfigError) as err:
        build_config({"diffusion": {"steps": 3}})
    assert err.value.keys == ("diffusion.steps",)
    with pytest.raises(ConfigError):
        parse_config(None, ["nope.x=1"])


def test_bad_value_names_key_path():
    with pytest.raises(ConfigRangeError) as err:
        parse_config(None, ["diffusion.T=abc"])
    assert err.value.keys == ("diffusion.T",)
    with pytest.raises(ConfigRangeError):
        parse_config(None, ["diffusion.T=0"])


def test_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_config(None, ["diffusion.T"])


def test_env_substitution(tmp_path, monkeypatch):
    monkeypatch.setenv("MEDLSDM_TEST_OUT", "runs/from-env")
    path = tmp_path / "env.yaml"
    path.write_text('paths:\n  out_dir: "${MEDLSDM_TEST_OUT}"\n', encoding="utf-8")
    assert parse_config(path).paths.out_dir == "runs/from-env"


def test_malformed_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("data: [unclosed\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_yaml(path)


def test_dump_config_roundtrip(tmp_path):
    cfg = parse_config(None, ["diffusion.T=12", "segmentation.num_classes=2"])
    path = dump_config(cfg, tmp_path)
    assert path.name == "resolved_config.yaml"
    assert yaml.safe_load(path.read_text(encoding="utf-8"))["diffusion"]["T"] == 12
    assert parse_config(path) == cfg
    assert cfg.seg_classes == 2


def test_with_overrides_keeps_frozen_original():
    cfg = RunConfig()
    other = cfg.with_overrides(["seed=5"])
    assert cfg.seed == 0 and other.seed == 5


def test_segmenter_defaults_to_two_classes():
    assert RunConfig().seg_classes == 2
    assert parse_config(None).seg_classes == 2
    settings = Path(__file__).resolve().parents[1] / "config" / "settings.yaml"
    assert parse_config(settings).seg_classes == 2
    inherited = parse_config(None, ["segmentation.num_classes=null"])
    assert inherited.segmentation.num_classes is None
    assert inherited.seg_classes == inherited.data.num_classes == 3
