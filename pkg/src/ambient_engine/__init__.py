"""Deterministic ambient-context orchestration engine for digital-human service desks."""

from .context import ContextSignal, SituationalState, StateEntry, Surface
from .engine import Engine, EngineConfig
from .simulator import RunReport, Scenario, load_scenario, run_scenario

__all__ = [
    "ContextSignal",
    "Engine",
    "EngineConfig",
    "RunReport",
    "Scenario",
    "SituationalState",
    "StateEntry",
    "Surface",
    "load_scenario",
    "run_scenario",
]

__version__ = "0.1.0"
