"""Islanded unbalanced multi-microgrid simulator with a multi-function ESS controller."""

from .ia import IaState, ia_reset, ia_step
from .metrics import vuf
from .scenario import ConfigError, default_config, load_config, parse_config, run

__all__ = [
    "ConfigError",
    "IaState",
    "default_config",
    "ia_reset",
    "ia_step",
    "load_config",
    "parse_config",
    "run",
    "vuf",
]
__version__ = "0.1.0"
