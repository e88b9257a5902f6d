"""Parameter and state types for the simulator.

Everything a run needs is collected into a single immutable SimConfig so that
two runs with equal configs are bit-reproducible and a 64-bit digest can name
the configuration in telemetry and over the wire.

Units are SI throughout; angles are radians unless a field name says degrees.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import yaml

SCHEMA_VERSION = 1

GRAVITY = 9.81  # m/s^2, fixed

Vec3 = tuple[float, float, float]


def _vec3(v) -> Vec3:
    x, y, z = v
    return (float(x), float(y), float(z))


# ---------------------------------------------------------------------------
# actuator


@dataclass(frozen=True)
class ElectricalParams:
    """DC motor electrical model used for power accounting only."""

    winding_resistance: float = 2.3     # ohm
    back_emf_constant: float = 0.017    # V*s/rad
    no_load_current: float = 0.05       # A


@dataclass(frozen=True)
class RotorParams:
    """One eccentric rotating mass vibration motor rigidly mounted to the body.

    The rotating imbalance is characterized by the product eccentricity =
    m_e * r (kg*m); the force magnitude at speed omega is eccentricity*omega^2.
    ``axis`` is the spin axis in body coordinates; the force rotates in the
    plane perpendicular to it.
    """

    mount: Vec3 = (0.0, 0.0, 0.0)       # m, body frame, relative to COM
    axis: Vec3 = (1.0, 0.0, 0.0)        # unit vector, body frame
    eccentricity: float = 1.5e-4        # kg*m  (m_e * r)
    axial_offset: float = 0.0           # m, signed offset of the eccentric's whirl
                                        # plane from the mount along the axis; the
                                        # imbalance sits at one end of the shaft, so
                                        # its force acts there, not at the mount.
                                        # With the axis along travel this couples the
                                        # vertical oscillation into a pitch rock,
                                        # which is what ratchets the body forward.
    speed_constant: float = 53.41       # rad/s per volt, steady state
    spinup_tau: float = 0.05            # s, first-order lag time constant
    speed_noise_frac: float = 0.0       # rms speed wander as a fraction of the
                                        # setpoint; ERM units do not hold their
                                        # frequency better than a percent or two
    exact_spinup: bool = False          # exact exponential update instead of Euler
    spinup_reaction_torque: bool = False
    reaction_arm: float = 0.005         # m, effective radius for the optional reaction term
    load_sync: float = 0.0              # 0..1 coupling efficiency of the gravito-inertial
                                        # load torque on the eccentric; a running unit sags
                                        # and surges with the body's own acceleration, which
                                        # is what lets two equal-voltage units pull into phase
                                        # lock. 0 disables the coupling.
    rotor_inertia: float = 0.0          # kg*m^2, spin inertia about the axis; adds the
                                        # rotor's angular momentum to the body gyro term
                                        # (roll-yaw cross coupling). 0 disables.
    electrical: ElectricalParams = field(default_factory=ElectricalParams)


# ---------------------------------------------------------------------------
# robot


def cuboid_inertia(mass: float, extents: Vec3) -> Vec3:
    """Principal moments of a uniform cuboid, kg*m^2."""
    ax, ay, az = extents
    return (
        mass * (ay * ay + az * az) / 12.0,
        mass * (ax * ax + az * az) / 12.0,
        mass * (ax * ax + ay * ay) / 12.0,
    )


@dataclass(frozen=True)
class RobotParams:
    """Rigid body plus its rotors and bottom-face contact grid.

    kind selects the command mapping: "bicube" expects two rotors (left #1 at
    +y, right #2 at -y), "single" exactly one.
    """

    kind: str = "bicube"
    extents: Vec3 = (0.04, 0.08, 0.04)      # m, x (travel), y (lateral), z (up)
    mass: float = 0.147                      # kg
    inertia: Optional[Vec3] = None           # kg*m^2 diagonal; None -> uniform cuboid
    rotors: tuple[RotorParams, ...] = ()
    contact_grid: tuple[int, int] = (5, 10)  # points along x, y on the bottom face
    max_voltage: float = 8.0                 # V, actuator hard cap

    def inertia_diag(self) -> Vec3:
        if self.inertia is not None:
            return self.inertia
        return cuboid_inertia(self.mass, self.extents)

    @property
    def contact_point_area(self) -> float:
        nx, ny = self.contact_grid
        return (self.extents[0] * self.extents[1]) / (nx * ny)


# ---------------------------------------------------------------------------
# terrain


@dataclass(frozen=True)
class MaterialParams:
    """Surface material; kind is "granular" or "rigid".

    Granular normal response is per unit area and depth (stiffness N/m^3),
    rigid response is per contact point (point_stiffness N/m). Unused fields
    for the other kind are ignored.
    """

    kind: str = "granular"
    # granular
    stiffness: float = 8.0e6            # N/m^3
    damping: float = 4.0e4              # N*s/m^3
    unload_fraction: float = 0.1        # epsilon, fraction of stiffness on unloading
    friction: float = 0.55              # mu_g
    regularization_velocity: float = 1e-3   # m/s, tanh friction scale
    weakening_velocity: float = 0.0     # m/s, slip speed where shear strength
                                        # halves (agitation fluidizes the bed);
                                        # 0 disables the weakening
    plow_strength: float = 0.0          # N/m^3, frontal intrusion drag per unit
                                        # width and depth^2 (passive earth
                                        # pressure scale); 0 disables plowing
    repose_deg: float = 30.0            # angle of repose
    grain_diameter_um: float = 1100.0   # descriptive only
    plastic_rate: float = 1.0           # 1/s, crater deepening rate constant
    compaction_max: float = 1.0         # local stiffness multiplier ceiling under
                                        # repeated tamping (loose grains densify and
                                        # bear more); 1 disables compaction
    compaction_depth: float = 1.5e-3    # m, cumulative dig depth that spends most
                                        # of the densification budget
    loosening_rate: float = 0.0         # 1/s at the weakening velocity; agitation
                                        # undoes compaction, quadratically in the
                                        # impact speed, so a hard-driven body
                                        # re-fluidizes the seat it packed. 0 disables
    # rigid
    point_stiffness: float = 2.0e4      # N/m per contact point
    point_damping: float = 8.0          # N*s/m per contact point
    static_friction: float = 0.3
    kinetic_friction: float = 0.3


@dataclass(frozen=True)
class PitSpec:
    """Bowl-shaped depression carved after terrain reset."""

    center: tuple[float, float] = (0.2, 0.15)   # m, tank coordinates
    radius: float = 0.06                        # m
    depth: float = 0.012                        # m at the center


@dataclass(frozen=True)
class TerrainParams:
    material: MaterialParams = field(default_factory=MaterialParams)
    extent: tuple[float, float] = (0.6, 0.3)    # m, tank footprint
    cell_size: float = 0.005                    # m, heightfield resolution
    incline_deg: float = 0.0                    # tilt of the sand plane about y, +x uphill
    jitter_amplitude: float = 0.5e-3            # m, fluidized-reset surface noise
    stiffness_jitter: float = 0.1               # multiplier range [1-j, 1+j] per cell
    pit: Optional[PitSpec] = None
    obstacles: tuple[tuple[float, float, float], ...] = ()  # (cx, cy, radius) cylinders


# ---------------------------------------------------------------------------
# control


class Maneuver(Enum):
    FORWARD = "forward"
    LEFT = "left"
    RIGHT = "right"
    STOP = "stop"


@dataclass(frozen=True)
class ManeuverCommand:
    mode: Maneuver = Maneuver.STOP
    voltage: float = 0.0


@dataclass(frozen=True)
class ControlProgram:
    """Piecewise-constant command schedule; entries hold from t until the next."""

    entries: tuple[tuple[float, ManeuverCommand], ...] = ()

    @staticmethod
    def constant(mode: Maneuver, voltage: float) -> "ControlProgram":
        return ControlProgram(entries=((0.0, ManeuverCommand(mode, voltage)),))


# ---------------------------------------------------------------------------
# integration / run


@dataclass(frozen=True)
class IntegratorParams:
    dt: float = 2.0e-5                  # s, fixed step
    duration: float = 10.0              # s, simulated span after settling
    settle_time: float = 0.5            # s, motors-off settling before t=0
    pose_rate: float = 120.0            # Hz
    power_rate: float = 100.0           # Hz
    phase_rate: float = 2000.0          # Hz
    wall_stiffness: float = 5.0e3       # N/m, corridor walls and obstacles
    speed_limit: float = 100.0          # m/s, instability abort threshold


@dataclass(frozen=True)
class SimConfig:
    """Complete description of a run. Hashable; digest names it."""

    robot: RobotParams = field(default_factory=RobotParams)
    terrain: TerrainParams = field(default_factory=TerrainParams)
    control: ControlProgram = field(default_factory=ControlProgram)
    integrator: IntegratorParams = field(default_factory=IntegratorParams)
    seed: int = 0                        # uint64, terrain reset noise
    corridor_gap: Optional[float] = 0.10  # m, lateral wall spacing; None = open tank
    start: Optional[tuple[float, float, float]] = None  # (x, y, yaw); None = protocol default

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def _check(out: list[Violation], ok: bool, code: str, message: str) -> None:
    if not ok:
        out.append(Violation(code, message))


def validate_config(config: SimConfig) -> list[Violation]:
    """Return machine-readable violations; empty list means the config is usable."""
    v: list[Violation] = []
    robot, terrain, integ = config.robot, config.terrain, config.integrator
    mat = terrain.material

    _check(v, integ.dt > 0, "NonPositiveTimestep", f"dt must be positive, got {integ.dt}")
    _check(v, integ.duration >= integ.dt, "DurationShorterThanStep",
           f"duration {integ.duration} shorter than one step {integ.dt}")
    _check(v, integ.settle_time >= 0, "NegativeSettleTime", "settle_time must be >= 0")
    for name, rate in (("pose_rate", integ.pose_rate), ("power_rate", integ.power_rate),
                       ("phase_rate", integ.phase_rate)):
        if integ.dt > 0:
            _check(v, 0 < rate <= 1.0 / integ.dt, "BadTelemetryRate",
                   f"{name}={rate} must be in (0, 1/dt]")
    _check(v, integ.wall_stiffness > 0, "NonPositiveWallStiffness", "wall_stiffness must be > 0")
    _check(v, integ.speed_limit > 0, "NonPositiveSpeedLimit", "speed_limit must be > 0")

    _check(v, robot.mass > 0, "NonPositiveMass", "robot mass must be > 0")
    _check(v, all(e > 0 for e in robot.extents), "NonPositiveExtent", "extents must be > 0")
    _check(v, all(i > 0 for i in robot.inertia_diag()), "InertiaNotPositiveDefinite",
           "inertia diagonal must be positive")
    _check(v, robot.contact_grid[0] >= 1 and robot.contact_grid[1] >= 1,
           "EmptyContactGrid", "contact grid needs at least one point")
    _check(v, robot.max_voltage > 0, "NonPositiveVoltageCap", "max_voltage must be > 0")
    _check(v, robot.kind in ("bicube", "single"), "UnknownRobotKind",
           f"kind must be bicube or single, got {robot.kind!r}")
    if robot.kind == "bicube":
        _check(v, len(robot.rotors) == 2, "RotorCountMismatch",
               f"bicube needs 2 rotors, got {len(robot.rotors)}")
    elif robot.kind == "single":
        _check(v, len(robot.rotors) == 1, "RotorCountMismatch",
               f"single needs 1 rotor, got {len(robot.rotors)}")
    for i, r in enumerate(robot.rotors):
        n = math.sqrt(sum(a * a for a in r.axis))
        _check(v, abs(n - 1.0) < 1e-9, "RotorAxisNotUnit", f"rotor {i} axis norm {n}")
        _check(v, r.eccentricity > 0, "NonPositiveEccentricity", f"rotor {i} eccentricity")
        _check(v, r.speed_constant > 0, "NonPositiveSpeedConstant", f"rotor {i} speed_constant")
        _check(v, r.spinup_tau > 0, "NonPositiveSpinupTau", f"rotor {i} spinup_tau")
        _check(v, 0 <= r.speed_noise_frac < 0.2, "SpeedNoiseOutOfRange",
               f"rotor {i} speed_noise_frac must be in [0, 0.2)")
        _check(v, 0 <= r.load_sync <= 1, "LoadSyncOutOfRange",
               f"rotor {i} load_sync must be in [0, 1]")
        _check(v, not (r.load_sync > 0 and r.electrical.back_emf_constant <= 0),
               "LoadSyncNeedsBackEmf",
               f"rotor {i} load_sync requires a positive back-EMF constant")
        _check(v, r.rotor_inertia >= 0, "NegativeRotorInertia",
               f"rotor {i} rotor_inertia must be >= 0")
    if len(robot.rotors) == 2:
        a1, a2 = robot.rotors[0].axis, robot.rotors[1].axis
        cx = (a1[1] * a2[2] - a1[2] * a2[1],
              a1[2] * a2[0] - a1[0] * a2[2],
              a1[0] * a2[1] - a1[1] * a2[0])
        _check(v, math.sqrt(sum(c * c for c in cx)) < 1e-9, "RotorAxesNotParallel",
               "bicube rotor spin axes must be parallel lines")

    _check(v, mat.kind in ("granular", "rigid"), "UnknownMaterialKind",
           f"material kind {mat.kind!r}")
    if mat.kind == "granular":
        _check(v, mat.stiffness > 0, "NonPositiveStiffness", "granular stiffness must be > 0")
        _check(v, mat.damping >= 0, "NegativeDamping", "granular damping must be >= 0")
        _check(v, 0.0 <= mat.unload_fraction <= 1.0, "UnloadFractionOutOfRange",
               "unload_fraction must lie in [0, 1]")
        _check(v, mat.friction >= 0, "NegativeFriction", "friction must be >= 0")
        _check(v, mat.regularization_velocity > 0, "NonPositiveRegularizationVelocity",
               "regularization_velocity must be > 0")
        _check(v, mat.weakening_velocity >= 0, "NegativeWeakeningVelocity",
               "weakening_velocity must be >= 0")
        _check(v, mat.plow_strength >= 0, "NegativePlowStrength",
               "plow_strength must be >= 0")
        _check(v, 0 < mat.repose_deg < 90, "ReposeAngleOutOfRange",
               "repose_deg must lie in (0, 90)")
        _check(v, mat.plastic_rate >= 0, "NegativePlasticRate", "plastic_rate must be >= 0")
        _check(v, mat.compaction_max >= 1, "CompactionMaxBelowOne",
               "compaction_max must be >= 1")
        _check(v, mat.compaction_depth > 0, "NonPositiveCompactionDepth",
               "compaction_depth must be > 0")
        _check(v, mat.loosening_rate >= 0, "NegativeLooseningRate",
               "loosening_rate must be >= 0")
    else:
        _check(v, mat.point_stiffness > 0, "NonPositiveStiffness", "point_stiffness must be > 0")
        _check(v, mat.point_damping >= 0, "NegativeDamping", "point_damping must be >= 0")
        _check(v, mat.static_friction >= 0 and mat.kinetic_friction >= 0,
               "NegativeFriction", "friction coefficients must be >= 0")

    _check(v, terrain.cell_size > 0, "NonPositiveCellSize", "cell_size must be > 0")
    _check(v, terrain.extent[0] > 0 and terrain.extent[1] > 0,
           "NonPositiveExtent", "terrain extent must be > 0")
    _check(v, -45.0 <= terrain.incline_deg <= 45.0, "InclineOutOfRange",
           "incline_deg must lie in [-45, 45]")
    _check(v, terrain.jitter_amplitude >= 0, "NegativeJitter", "jitter_amplitude must be >= 0")
    _check(v, 0.0 <= terrain.stiffness_jitter < 1.0, "StiffnessJitterOutOfRange",
           "stiffness_jitter must lie in [0, 1)")
    if terrain.pit is not None:
        _check(v, terrain.pit.radius > 0 and terrain.pit.depth >= 0,
               "BadPitSpec", "pit radius must be > 0 and depth >= 0")
    for i, (ox, oy, orad) in enumerate(terrain.obstacles):
        _check(v, orad > 0, "BadObstacle", f"obstacle {i} radius must be > 0")

    if config.corridor_gap is not None:
        _check(v, config.corridor_gap >= robot.extents[1], "CorridorNarrowerThanRobot",
               f"corridor gap {config.corridor_gap} < robot width {robot.extents[1]}")

    _check(v, 0 <= config.seed < 2 ** 64, "SeedOutOfRange", "seed must be uint64")

    entries = config.control.entries
    for i in range(1, len(entries)):
        _check(v, entries[i][0] > entries[i - 1][0], "ScheduleNotIncreasing",
               f"schedule times must strictly increase at entry {i}")
    for t, cmd in entries:
        _check(v, t >= 0, "NegativeScheduleTime", f"schedule time {t} < 0")
        _check(v, 0.0 <= cmd.voltage <= robot.max_voltage, "VoltageOutOfRange",
               f"voltage {cmd.voltage} outside [0, {robot.max_voltage}]")

    # explicit stiffness-timestep stability guard: dt * sqrt(k_total/m) must stay
    # well under the oscillation limit
    if robot.mass > 0 and integ.dt > 0:
        n_pts = robot.contact_grid[0] * robot.contact_grid[1]
        if mat.kind == "granular":
            # spring constant per point ~ k_g * A_pt per meter of depth; depth scale
            # bounded by extent_z, and in practice by a few mm -- use 2 cm bound
            k_total = mat.stiffness * robot.contact_point_area * n_pts
        else:
            k_total = mat.point_stiffness * n_pts
        k_total = max(k_total, integ.wall_stiffness)
        _check(v, integ.dt * math.sqrt(k_total / robot.mass) < 0.2, "TimestepUnstable",
               f"dt {integ.dt} too large for contact stiffness {k_total:g} N/m")

    return v


# ---------------------------------------------------------------------------
# serialization

_MANEUVERS = {m.value: m for m in Maneuver}


def _electrical_to_dict(e: ElectricalParams) -> dict:
    return {
        "winding_resistance": e.winding_resistance,
        "back_emf_constant": e.back_emf_constant,
        "no_load_current": e.no_load_current,
    }


def _rotor_to_dict(r: RotorParams) -> dict:
    return {
        "mount": list(r.mount),
        "axis": list(r.axis),
        "eccentricity": r.eccentricity,
        "axial_offset": r.axial_offset,
        "speed_constant": r.speed_constant,
        "spinup_tau": r.spinup_tau,
        "speed_noise_frac": r.speed_noise_frac,
        "exact_spinup": r.exact_spinup,
        "load_sync": r.load_sync,
        "rotor_inertia": r.rotor_inertia,
        "spinup_reaction_torque": r.spinup_reaction_torque,
        "reaction_arm": r.reaction_arm,
        "electrical": _electrical_to_dict(r.electrical),
    }


def _rotor_from_dict(d: dict) -> RotorParams:
    e = d.get("electrical", {})
    return RotorParams(
        mount=_vec3(d.get("mount", (0, 0, 0))),
        axis=_vec3(d.get("axis", (1, 0, 0))),
        eccentricity=float(d.get("eccentricity", 1.5e-4)),
        axial_offset=float(d.get("axial_offset", 0.0)),
        speed_constant=float(d.get("speed_constant", 53.41)),
        spinup_tau=float(d.get("spinup_tau", 0.05)),
        speed_noise_frac=float(d.get("speed_noise_frac", 0.0)),
        exact_spinup=bool(d.get("exact_spinup", False)),
        load_sync=float(d.get("load_sync", 0.0)),
        rotor_inertia=float(d.get("rotor_inertia", 0.0)),
        spinup_reaction_torque=bool(d.get("spinup_reaction_torque", False)),
        reaction_arm=float(d.get("reaction_arm", 0.005)),
        electrical=ElectricalParams(
            winding_resistance=float(e.get("winding_resistance", 2.3)),
            back_emf_constant=float(e.get("back_emf_constant", 0.017)),
            no_load_current=float(e.get("no_load_current", 0.05)),
        ),
    )


def _robot_to_dict(r: RobotParams) -> dict:
    return {
        "kind": r.kind,
        "extents": list(r.extents),
        "mass": r.mass,
        "inertia": None if r.inertia is None else list(r.inertia),
        "rotors": [_rotor_to_dict(x) for x in r.rotors],
        "contact_grid": list(r.contact_grid),
        "max_voltage": r.max_voltage,
    }


def _robot_from_dict(d: dict) -> RobotParams:
    inertia = d.get("inertia")
    return RobotParams(
        kind=str(d.get("kind", "bicube")),
        extents=_vec3(d.get("extents", (0.08, 0.04, 0.04))),
        mass=float(d.get("mass", 0.147)),
        inertia=None if inertia is None else _vec3(inertia),
        rotors=tuple(_rotor_from_dict(x) for x in d.get("rotors", [])),
        contact_grid=(int(d.get("contact_grid", (10, 5))[0]),
                      int(d.get("contact_grid", (10, 5))[1])),
        max_voltage=float(d.get("max_voltage", 8.0)),
    )


def _material_to_dict(m: MaterialParams) -> dict:
    return {
        "kind": m.kind,
        "stiffness": m.stiffness,
        "damping": m.damping,
        "unload_fraction": m.unload_fraction,
        "friction": m.friction,
        "regularization_velocity": m.regularization_velocity,
        "weakening_velocity": m.weakening_velocity,
        "plow_strength": m.plow_strength,
        "compaction_max": m.compaction_max,
        "compaction_depth": m.compaction_depth,
        "loosening_rate": m.loosening_rate,
        "repose_deg": m.repose_deg,
        "grain_diameter_um": m.grain_diameter_um,
        "plastic_rate": m.plastic_rate,
        "point_stiffness": m.point_stiffness,
        "point_damping": m.point_damping,
        "static_friction": m.static_friction,
        "kinetic_friction": m.kinetic_friction,
    }


def _material_from_dict(d: dict) -> MaterialParams:
    base = MaterialParams()
    return MaterialParams(
        kind=str(d.get("kind", base.kind)),
        stiffness=float(d.get("stiffness", base.stiffness)),
        damping=float(d.get("damping", base.damping)),
        unload_fraction=float(d.get("unload_fraction", base.unload_fraction)),
        friction=float(d.get("friction", base.friction)),
        regularization_velocity=float(d.get("regularization_velocity",
                                            base.regularization_velocity)),
        weakening_velocity=float(d.get("weakening_velocity",
                                       base.weakening_velocity)),
        plow_strength=float(d.get("plow_strength", base.plow_strength)),
        repose_deg=float(d.get("repose_deg", base.repose_deg)),
        grain_diameter_um=float(d.get("grain_diameter_um", base.grain_diameter_um)),
        plastic_rate=float(d.get("plastic_rate", base.plastic_rate)),
        compaction_max=float(d.get("compaction_max", base.compaction_max)),
        compaction_depth=float(d.get("compaction_depth", base.compaction_depth)),
        loosening_rate=float(d.get("loosening_rate", base.loosening_rate)),
        point_stiffness=float(d.get("point_stiffness", base.point_stiffness)),
        point_damping=float(d.get("point_damping", base.point_damping)),
        static_friction=float(d.get("static_friction", base.static_friction)),
        kinetic_friction=float(d.get("kinetic_friction", base.kinetic_friction)),
    )


def _terrain_to_dict(t: TerrainParams) -> dict:
    return {
        "material": _material_to_dict(t.material),
        "extent": list(t.extent),
        "cell_size": t.cell_size,
        "incline_deg": t.incline_deg,
        "jitter_amplitude": t.jitter_amplitude,
        "stiffness_jitter": t.stiffness_jitter,
        "pit": None if t.pit is None else {
            "center": list(t.pit.center), "radius": t.pit.radius, "depth": t.pit.depth,
        },
        "obstacles": [list(o) for o in t.obstacles],
    }


def _terrain_from_dict(d: dict) -> TerrainParams:
    pit = d.get("pit")
    return TerrainParams(
        material=_material_from_dict(d.get("material", {})),
        extent=(float(d.get("extent", (0.6, 0.3))[0]), float(d.get("extent", (0.6, 0.3))[1])),
        cell_size=float(d.get("cell_size", 0.005)),
        incline_deg=float(d.get("incline_deg", 0.0)),
        jitter_amplitude=float(d.get("jitter_amplitude", 0.5e-3)),
        stiffness_jitter=float(d.get("stiffness_jitter", 0.1)),
        pit=None if pit is None else PitSpec(
            center=(float(pit["center"][0]), float(pit["center"][1])),
            radius=float(pit["radius"]), depth=float(pit["depth"]),
        ),
        obstacles=tuple((float(o[0]), float(o[1]), float(o[2]))
                        for o in d.get("obstacles", [])),
    )


def _control_to_dict(c: ControlProgram) -> dict:
    return {"entries": [[t, cmd.mode.value, cmd.voltage] for t, cmd in c.entries]}


def _control_from_dict(d: dict) -> ControlProgram:
    entries = []
    for row in d.get("entries", []):
        t, mode, voltage = row
        entries.append((float(t), ManeuverCommand(_MANEUVERS[str(mode)], float(voltage))))
    return ControlProgram(entries=tuple(entries))


def _integrator_to_dict(i: IntegratorParams) -> dict:
    return {
        "dt": i.dt,
        "duration": i.duration,
        "settle_time": i.settle_time,
        "pose_rate": i.pose_rate,
        "power_rate": i.power_rate,
        "phase_rate": i.phase_rate,
        "wall_stiffness": i.wall_stiffness,
        "speed_limit": i.speed_limit,
    }


def _integrator_from_dict(d: dict) -> IntegratorParams:
    base = IntegratorParams()
    return IntegratorParams(
        dt=float(d.get("dt", base.dt)),
        duration=float(d.get("duration", base.duration)),
        settle_time=float(d.get("settle_time", base.settle_time)),
        pose_rate=float(d.get("pose_rate", base.pose_rate)),
        power_rate=float(d.get("power_rate", base.power_rate)),
        phase_rate=float(d.get("phase_rate", base.phase_rate)),
        wall_stiffness=float(d.get("wall_stiffness", base.wall_stiffness)),
        speed_limit=float(d.get("speed_limit", base.speed_limit)),
    )


def config_to_dict(config: SimConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "robot": _robot_to_dict(config.robot),
        "terrain": _terrain_to_dict(config.terrain),
        "control": _control_to_dict(config.control),
        "integrator": _integrator_to_dict(config.integrator),
        "seed": config.seed,
        "corridor_gap": config.corridor_gap,
        "start": None if config.start is None else list(config.start),
    }


def config_from_dict(d: dict) -> SimConfig:
    version = int(d.get("schema_version", SCHEMA_VERSION))
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema_version {version}")
    start = d.get("start")
    return SimConfig(
        robot=_robot_from_dict(d.get("robot", {})),
        terrain=_terrain_from_dict(d.get("terrain", {})),
        control=_control_from_dict(d.get("control", {})),
        integrator=_integrator_from_dict(d.get("integrator", {})),
        seed=int(d.get("seed", 0)),
        corridor_gap=None if d.get("corridor_gap") is None else float(d["corridor_gap"]),
        start=None if start is None else _vec3(start),
    )


def dumps_config(config: SimConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)


def loads_config(text: str) -> SimConfig:
    return config_from_dict(yaml.safe_load(text))


def config_digest(config: SimConfig) -> int:
    """64-bit digest over the canonical serialized form."""
    canon = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"),
                       allow_nan=False)
    h = hashlib.sha256(canon.encode()).digest()
    return int.from_bytes(h[:8], "big")


def digest_hex(config: SimConfig) -> str:
    return f"{config_digest(config):016x}"
