"""Vibration-driven locomotion sandbox: deterministic rigid-body simulation
on granular and hard terrain, plus the experiment harness built on it."""

__version__ = "0.1.0"

from .config import (
    GRAVITY,
    ControlProgram,
    IntegratorParams,
    Maneuver,
    ManeuverCommand,
    MaterialParams,
    PitSpec,
    RobotParams,
    RotorParams,
    SimConfig,
    TerrainParams,
    config_digest,
    config_from_dict,
    config_to_dict,
    digest_hex,
    dumps_config,
    loads_config,
    validate_config,
)
from .dynamics import ConfigError, Simulation, SimulationUnstable, backend_name
from .experiments import (
    cycle_decomposition,
    detect_stuck,
    run_escape,
    run_slope,
    run_sweep,
    run_trial,
    standard_metrics,
)
from .presets import robot_preset, standard_config, terrain_preset
from .telemetry import RunRecord, capture_record, load, persist
from .terrain import TerrainField, reset_fluidized

__all__ = [
    "GRAVITY",
    "ConfigError",
    "ControlProgram",
    "IntegratorParams",
    "Maneuver",
    "ManeuverCommand",
    "MaterialParams",
    "PitSpec",
    "RobotParams",
    "RotorParams",
    "RunRecord",
    "SimConfig",
    "Simulation",
    "SimulationUnstable",
    "TerrainField",
    "TerrainParams",
    "backend_name",
    "capture_record",
    "config_digest",
    "config_from_dict",
    "config_to_dict",
    "cycle_decomposition",
    "detect_stuck",
    "digest_hex",
    "dumps_config",
    "load",
    "loads_config",
    "persist",
    "reset_fluidized",
    "robot_preset",
    "run_escape",
    "run_slope",
    "run_sweep",
    "run_trial",
    "standard_config",
    "standard_metrics",
    "terrain_preset",
    "validate_config",
    "__version__",
]
