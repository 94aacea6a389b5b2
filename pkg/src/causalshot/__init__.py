"""Causality-driven one-shot classification with BDC pooling."""

from .causality import CausalityMethod
from .config import ConfigError, RunConfig
from .model import CausalBDCNet, MetaLearner, evaluate

__version__ = "0.1.0"

__all__ = ["CausalityMethod", "CausalBDCNet", "ConfigError", "MetaLearner", "RunConfig", "evaluate"]
