"""Time-bin photon generation from a hole spin in a charged quantum dot."""

from .config import SimConfig, ConfigError, load_config, parse_config, dump_config

__version__ = "0.1.0"

__all__ = ["SimConfig", "ConfigError", "load_config", "parse_config", "dump_config"]
