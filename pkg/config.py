"""
Configuration Module
Flat dotted-key configuration shared by every subcommand:
- DEFAULTS mirrors the model, planner and training parameter tables
- JSON files are merged over the defaults (unknown keys rejected)
- key=value overrides from the command line are merged last
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

logger = logging.getLogger(__name__)


class ConfigError(KeyError):
    """Raised for unknown keys or values of the wrong type"""

    def __str__(self):
        return str(self.args[0]) if self.args else "configuration error"


DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "threads": 1,

    "graph.history": 3,
    "graph.radius": 0.01,

    "epd.latent": 128,
    "epd.hidden": 128,
    "epd.layers": 10,

    "oracle.substeps": 25,
    "oracle.stiffness": 1e4,
    "oracle.damping": 50.0,
    "oracle.tangential_damping": 500.0,
    "oracle.friction_scale": 1.0,
    "oracle.gravity": False,
    "oracle.observation_frame": "tool",
    "oracle.contact_points": "piece",
    "oracle.knots": 8,
    "oracle.force_scale": 1.0,
    "oracle.torque_scale": 0.002,
    "oracle.flip_z_probability": 0.5,
    "oracle.start_jitter": 0.005,
    "oracle.start_jitter_rot": 0.1,

    "gen.episodes": 100,
    "gen.steps": 200,

    "train.steps": 20000,
    "train.batch_size": 128,
    "train.noise": 1e-4,
    "train.rotate": True,
    "train.shuffle": True,
    "train.lr_start": 1e-3,
    "train.lr_end": 1e-4,
    "train.lambda_pos": 1.0,
    "train.lambda_force": 0.1,
    "train.lambda_torque": 0.1,
    "train.validation_fraction": 0.05,
    "train.validate_every": 500,
    "train.checkpoint_every": 1000,
    "train.log_every": 100,
    "train.max_checkpoints": 5,
    "train.norm_records": 2000,
    "train.workers": 0,

    "mpc.particles": 1,
    "mpc.horizon": 50,
    "mpc.samples": 20,
    "mpc.iterations": 5,
    "mpc.replan_freq": 5,
    "mpc.elite_fraction": 0.1,
    "mpc.noise_beta": 2.0,
    "mpc.momentum": 0.1,
    "mpc.std_floor": 1e-3,
    "mpc.init_std": 0.5,
    "mpc.force_limit": 1.0,
    "mpc.torque_limit": 0.002,
    "mpc.epsilon": 0.002,
    "mpc.max_steps": 150,

    "eval.rollout_len": 100,
    "eval.windows": 20,
}


def _coerce(key: str, value: Any) -> Any:
    """Check a value against the type of its default"""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


def merge(cfg: Dict[str, Any], updates: Dict[str, Any], source: str) -> Dict[str, Any]:
    unknown = sorted(set(updates) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{source}: unknown configuration keys: {', '.join(unknown)}")
    merged = dict(cfg)
    for key, value in updates.items():
        merged[key] = _coerce(key, value)
    return merged


def parse_override(text: str) -> Tuple[str, Any]:
    """'key=value' with the value read as JSON when possible, else as a string"""
    if "=" not in text:
        raise ConfigError(f"Override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw.strip()
    return key, value


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> Dict[str, Any]:
    """
    Defaults, then the JSON file (if any), then command-line overrides

    Args:
        path: JSON object of flat dotted keys
        overrides: 'key=value' strings

    Returns:
        Complete flat configuration dictionary
    """
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, "r") as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        cfg = merge(cfg, loaded, str(path))
        logger.info("Loaded %d configuration values from %s", len(loaded), path)
    if overrides:
        cfg = merge(cfg, dict(parse_override(o) for o in overrides), "--set")
    return cfg


def save_config(cfg: Dict[str, Any], path: Union[str, Path]):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
