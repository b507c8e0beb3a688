"""Linear-quadratic Nash equilibria for battery storage operators sharing a price."""

from .model import AgentParams, MarketModel, TimeGrid, load_config, validate_market
from .equilibrium import equilibrium_policy
from .scenarios import baseline_market, two_class_market
from .simulate import simulate_paths

__all__ = [
    "AgentParams",
    "MarketModel",
    "TimeGrid",
    "baseline_market",
    "equilibrium_policy",
    "load_config",
    "simulate_paths",
    "two_class_market",
    "validate_market",
]
