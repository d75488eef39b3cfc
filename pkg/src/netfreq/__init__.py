"""Distributed optimal frequency control for multi-area power networks (network power balance)."""
from .network import (
    Gains,
    NetworkModel,
    Scenario,
    ScenarioError,
    SimSettings,
    build_incidence,
    bundled_scenario_path,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)
from .simulator import SystemState, Trajectory, detect_equilibrium, monitor_constraints, simulate, step

__all__ = [
    "Gains", "NetworkModel", "Scenario", "ScenarioError", "SimSettings", "SystemState", "Trajectory",
    "build_incidence", "bundled_scenario_path", "detect_equilibrium", "load_scenario", "monitor_constraints",
    "scenario_from_dict", "scenario_to_dict", "simulate", "step", "validate_scenario",
]
