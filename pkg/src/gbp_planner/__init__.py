"""Distributed multi-robot trajectory planning with Gaussian belief propagation."""

from .config import ScenarioConfig, load_config, parse_config
from .gaussian import CanonicalGaussian
from .simulator import RunResult, run

__all__ = ["CanonicalGaussian", "RunResult", "ScenarioConfig", "load_config", "parse_config", "run"]
__version__ = "0.1.0"
