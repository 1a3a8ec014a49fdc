"""Run configuration: YAML parsing with line-referenced errors, defaults and validation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .envs import CONTROLLER_KINDS, ENVS, FRAME_SIZES, MIN_EPISODE_LEN
from .params import MISPARAM_PRESETS

METHODS = ("autotune", "dr_baseline", "regression_baseline", "oracle_test")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, line: Optional[int] = None, source: Optional[str] = None):
        where = ""
        if source or line:
            where = f"{source or '<config>'}" + (f":{line}" if line else "") + ": "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    env_id: str
    seed: int = 0
    method: str = "autotune"
    r_sp: float = 1.0
    r_policy: float = 0.1
    r_dr: float = 0.5
    alpha: float = 0.05
    hi_threshold: float = 0.7
    lo_threshold: float = 0.3
    eta: float = 0.05
    rounds: int = 40
    pretrain_trajs: int = 200
    pretrain_steps: int = 1500
    sim_param_itrs: int = 300
    sp_rollouts_per_round: int = 20
    policy_rollouts_per_round: int = 10
    real_rollouts_per_update: int = 5
    batch_size: int = 128
    pairs_per_traj: int = 4
    eval_pairs: int = 32
    sp_capacity: int = 500
    policy_capacity: int = 1000
    misparam_preset: str = "2x-0.5x"
    # explicit per-parameter multipliers of the true values; overrides the preset
    misparam_factors: Optional[tuple] = None
    # per-parameter overrides of the shipped true values, by name
    real_params: Optional[dict] = None
    track_pred_bound: bool = True
    controller: str = "random"
    controller_hold: int = 5
    frame_size: int = 32
    episode_len: int = 60
    output_dir: str = "runs/default"
    save_checkpoints: bool = True

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["misparam_factors"] is not None:
            d["misparam_factors"] = list(d["misparam_factors"])
        return d

    def config_hash(self) -> str:
        """Stable digest of everything that influences results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}
_INT_FIELDS = {n for n, f in _FIELDS.items() if f.type == "int"}
_FLOAT_FIELDS = {n for n, f in _FIELDS.items() if f.type == "float"}
_POSITIVE = _INT_FIELDS - {"seed"} | _FLOAT_FIELDS


def _coerce(name, value, line, source):
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}", line, source)
        return value
    if name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}", line, source)
        return float(value)
    if name in ("track_pred_bound", "save_checkpoints"):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false", line, source)
        return value
    if name == "misparam_factors":
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError("misparam_factors must be a list of numbers", line, source)
        return tuple(float(v) for v in value)
    if name == "real_params":
        if value is None:
            return None
        if not isinstance(value, dict):
            raise ConfigError("real_params must be a mapping of parameter name to value", line, source)
        out = {}
        for k, v in value.items():
            if isinstance(v, dict):
                if "value" not in v:
                    raise ConfigError(f"real_params.{k} needs a 'value' entry", line, source)
                v = v["value"]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"real_params.{k} must be a number", line, source)
            out[str(k)] = float(v)
        return out
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}", line, source)
    return value


def validate(cfg: RunConfig, lines: Optional[dict] = None, source: Optional[str] = None) -> RunConfig:
    lines = lines or {}

    def fail(name, msg):
        raise ConfigError(msg, lines.get(name), source)

    if cfg.env_id not in ENVS:
        fail("env_id", f"unknown env_id {cfg.env_id!r}; choose from {sorted(ENVS)}")
    if cfg.method not in METHODS:
        fail("method", f"method must be one of {METHODS}")
    for name in sorted(_POSITIVE):
        if getattr(cfg, name) <= 0:
            fail(name, f"{name} must be positive")
    if cfg.seed < 0:
        fail("seed", "seed must be non-negative")
    if not cfg.r_policy < cfg.r_sp:
        fail("r_policy", f"r_policy ({cfg.r_policy}) must be smaller than r_sp ({cfg.r_sp})")
    if not 0.0 < cfg.lo_threshold < 0.5 < cfg.hi_threshold < 1.0:
        fail("hi_threshold" if "hi_threshold" in lines else "lo_threshold", "thresholds must satisfy 0 < lo < 0.5 < hi < 1")
    if cfg.alpha >= 1.0:
        fail("alpha", "alpha must be below 1")
    if cfg.eta >= 1.0:
        fail("eta", "eta must be below 1")
    if cfg.misparam_preset not in MISPARAM_PRESETS:
        fail("misparam_preset", f"misparam_preset must be one of {sorted(MISPARAM_PRESETS)}")
    schema = ENVS[cfg.env_id].schema
    if cfg.misparam_factors is not None:
        if len(cfg.misparam_factors) != len(schema):
            fail("misparam_factors", f"misparam_factors needs {len(schema)} entries for {cfg.env_id}")
        if any(f <= 0 for f in cfg.misparam_factors):
            fail("misparam_factors", "misparam_factors must be positive")
    if cfg.real_params is not None:
        for k, v in cfg.real_params.items():
            if k not in schema.names:
                fail("real_params", f"real_params: {cfg.env_id} has no parameter {k!r}")
            if v <= 0:
                fail("real_params", f"real_params.{k} must be positive")
    if cfg.controller not in CONTROLLER_KINDS:
        fail("controller", f"controller must be one of {CONTROLLER_KINDS}")
    if cfg.frame_size not in FRAME_SIZES:
        fail("frame_size", f"frame_size must be one of {FRAME_SIZES}")
    if cfg.episode_len < MIN_EPISODE_LEN:
        fail("episode_len", f"episode_len must be at least {MIN_EPISODE_LEN}")
    if cfg.method in ("autotune", "regression_baseline"):
        if cfg.pretrain_trajs < cfg.batch_size:
            fail("pretrain_trajs", "pretrain_trajs must be at least batch_size")
        if cfg.sp_capacity < cfg.pretrain_trajs:
            fail("sp_capacity", "sp_capacity must hold the pretraining trajectories")
    return cfg


def _line_map(text: str) -> dict:
    """Top-level key -> 1-based line number."""
    node = yaml.compose(text)
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("config must be a mapping", node.start_mark.line + 1)
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def from_mapping(data: dict, lines: Optional[dict] = None, source: Optional[str] = None, **overrides) -> RunConfig:
    lines = lines or {}
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, value in merged.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", lines.get(key), source)
        kwargs[key] = _coerce(key, value, lines.get(key), source)
    if "env_id" not in kwargs:
        raise ConfigError("env_id is required", None, source)
    return validate(RunConfig(**kwargs), lines, source)


def parse_config(path=None, text: Optional[str] = None, **overrides) -> RunConfig:
    """Load a YAML config from ``path`` or ``text``; keyword overrides win over file values."""
    source = None
    if text is None:
        if path is None:
            return from_mapping({}, **overrides)
        source = str(path)
        text = Path(path).read_text()
    try:
        lines = _line_map(text)
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", mark.line + 1 if mark else None, source)
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", 1, source)
    return from_mapping(data, lines, source, **overrides)


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return validate(dataclasses.replace(cfg, **changes))
