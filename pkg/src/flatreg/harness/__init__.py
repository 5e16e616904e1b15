"""Configuration, experiment drivers and the ``flatreg`` command line."""

from .config import ExperimentConfig, ModelSpec, config_from_dict, default_config, load_config, parse_config
from .experiments import (
    COMMANDS,
    RunArtifact,
    cmd_constants,
    cmd_couple,
    cmd_cycle,
    cmd_escape,
    cmd_limits,
    cmd_verify,
)

__all__ = [
    "ExperimentConfig",
    "ModelSpec",
    "config_from_dict",
    "default_config",
    "load_config",
    "parse_config",
    "RunArtifact",
    "COMMANDS",
    "cmd_verify",
    "cmd_escape",
    "cmd_cycle",
    "cmd_couple",
    "cmd_limits",
    "cmd_constants",
]
