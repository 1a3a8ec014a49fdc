"""Tune simulator parameters from image trajectories with a learned pairwise comparator."""
from .autotune import UpdateRule, oracle_comparator, update_mean
from .config import ConfigError, RunConfig, parse_config
from .envs import ENVS, Controller, make_env_spec, make_pseudo_real, rollout
from .params import ParamDistribution, ParamSchema, misparametrize, percent_error

__version__ = "0.1.0"

__all__ = [
    "ENVS", "ConfigError", "Controller", "ParamDistribution", "ParamSchema", "RunConfig", "UpdateRule",
    "make_env_spec", "make_pseudo_real", "misparametrize", "oracle_comparator", "parse_config",
    "percent_error", "rollout", "update_mean",
]
