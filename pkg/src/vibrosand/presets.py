"""Shipped presets: terrain materials and the standard two-cube robot.

Preset files are YAML under vibrosand/presets/*.cfg, each carrying
schema_version 1 and a preset_kind of "material" or "robot". Granular
material values are fitted so that sweep speed optima land near their
reference voltages (glass 4.5 V, fine 6 V, coarse 6.5 V) while keeping
stiffness ordered glass <= fine <= coarse.
"""

from __future__ import annotations

from importlib import resources

import yaml

from . import config as config_mod
from .config import (ControlProgram, IntegratorParams, Maneuver, RobotParams,
                     SimConfig, TerrainParams)

TERRAIN_PRESETS = ("glass", "fine_sand", "coarse_sand", "hard")
ROBOT_PRESETS = ("bicube",)

_ALIASES = {"glass_sand": "glass", "fine": "fine_sand", "coarse": "coarse_sand",
            "rigid": "hard"}


def _load_file(name: str) -> dict:
    ref = resources.files("vibrosand").joinpath(f"presets/{name}.cfg")
    data = yaml.safe_load(ref.read_text())
    version = int(data.get("schema_version", -1))
    if version != config_mod.SCHEMA_VERSION:
        raise ValueError(f"preset {name}: unsupported schema_version {version}")
    return data


def canonical_name(name: str) -> str:
    return _ALIASES.get(name, name)


def terrain_preset(name: str) -> TerrainParams:
    name = canonical_name(name)
    if name not in TERRAIN_PRESETS:
        raise KeyError(f"unknown terrain preset {name!r}; have {TERRAIN_PRESETS}")
    data = _load_file(name)
    if data.get("preset_kind") != "material":
        raise ValueError(f"preset {name} is not a material preset")
    return config_mod._terrain_from_dict(data["terrain"])


def robot_preset(name: str = "bicube") -> RobotParams:
    if name not in ROBOT_PRESETS:
        raise KeyError(f"unknown robot preset {name!r}; have {ROBOT_PRESETS}")
    data = _load_file(name)
    if data.get("preset_kind") != "robot":
        raise ValueError(f"preset {name} is not a robot preset")
    return config_mod._robot_from_dict(data["robot"])


def standard_config(terrain: str = "coarse_sand", voltage: float = 6.0,
                    mode: Maneuver = Maneuver.FORWARD, duration: float = 10.0,
                    seed: int = 0, corridor_gap: float | None = 0.10,
                    incline_deg: float | None = None, robot: str = "bicube",
                    control: ControlProgram | None = None) -> SimConfig:
    """Straight-line protocol config: shipped robot on a preset terrain, one
    constant command, tank-and-corridor geometry."""
    tp = terrain_preset(terrain)
    if incline_deg is not None:
        from dataclasses import replace

        tp = replace(tp, incline_deg=incline_deg)
    program = control if control is not None \
        else ControlProgram.constant(mode, voltage)
    return SimConfig(
        robot=robot_preset(robot),
        terrain=tp,
        control=program,
        integrator=IntegratorParams(duration=duration),
        seed=seed,
        corridor_gap=corridor_gap,
    )
