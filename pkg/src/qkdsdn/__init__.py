"""Discrete-event simulator for SDN-controlled, multi-domain QKD networks."""

from .engine import Engine, replay, run_scenario
from .scenario import Scenario, load_scenario, load_shipped

__version__ = "0.1.0"

__all__ = ["Engine", "Scenario", "load_scenario", "load_shipped", "replay", "run_scenario", "__version__"]
