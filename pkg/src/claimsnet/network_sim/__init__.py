"""Deterministic message bus, fault injection and the scenario runner."""

from .bus import BusMessage, FaultAction, MessageBus, MessagePattern, inject_fault
from .runner import RunResult, Simulation, World, build_world, run_scenario
from .scenario import ConfigInvalid, ScenarioConfig, Settings

__all__ = [
    "BusMessage",
    "ConfigInvalid",
    "FaultAction",
    "MessageBus",
    "MessagePattern",
    "RunResult",
    "ScenarioConfig",
    "Settings",
    "Simulation",
    "World",
    "build_world",
    "inject_fault",
    "run_scenario",
]
