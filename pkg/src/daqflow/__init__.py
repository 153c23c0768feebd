"""Discrete-event simulator of a trigger/DAQ DataFlow pipeline."""

from .config import ScenarioConfig, load_config
from .scenario import run_scenario

__all__ = ["ScenarioConfig", "load_config", "run_scenario"]
