import json

import pytest

from config import DEFAULTS, ConfigError, load_config, parse_override, save_config


def test_defaults_without_file():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert cfg is not DEFAULTS
    assert cfg["graph.history"] == 3
    assert cfg["mpc.elite_fraction"] == 0.1


def test_file_then_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train.steps": 50, "oracle.stiffness": 20000}))
    cfg = load_config(path, ["train.steps=60", "oracle.observation_frame=world"])
    assert cfg["train.steps"] == 60
    assert cfg["oracle.stiffness"] == 20000.0
    assert isinstance(cfg["oracle.stiffness"], float)
    assert cfg["oracle.observation_frame"] == "world"


@pytest.mark.parametrize("override", ["train.stepz=5", "train.steps=many", "train.steps=1.5",
                                      "oracle.gravity=1", "epd.layers=true", "oracle.observation_frame=3"])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_parse_override():
    assert parse_override("mpc.horizon=10") == ("mpc.horizon", 10)
    assert parse_override(" oracle.gravity =true") == ("oracle.gravity", True)
    assert parse_override("oracle.observation_frame=tool") == ("oracle.observation_frame", "tool")
    with pytest.raises(ConfigError):
        parse_override("mpc.horizon")


def test_unknown_file_key(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"scene.dt": 0.001}))
    with pytest.raises(ConfigError, match="scene.dt"):
        load_config(path)


def test_malformed_files(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(broken)
    listing = tmp_path / "list.json"
    listing.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(listing)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_saved_config_loads_back(tmp_path):
    cfg = load_config(overrides=["seed=7", "mpc.samples=40"])
    save_config(cfg, tmp_path / "config.json")
    assert load_config(tmp_path / "config.json") == cfg
