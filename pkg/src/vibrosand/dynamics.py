"""Rigid-body simulation driver.

Owns the terrain field and engine instance for one run, translates the
command schedule into constant-setpoint segments, and collects telemetry.
The stepping itself happens in a backend kernel: the compiled extension
vibrosand._core when the build produced it, otherwise the pure-numpy mirror.
Both implement identical semantics; select_backend reports which one is live.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _engine_py, control, rotor as rotor_mod, terrain as terrain_mod
from .config import GRAVITY, Maneuver, ManeuverCommand, SimConfig, validate_config

try:  # compiled kernel is optional; fall back to the numpy engine
    from . import _core  # type: ignore[attr-defined]

    _HAVE_CORE = True
except ImportError:  # pragma: no cover - depends on the build
    _core = None
    _HAVE_CORE = False


def backend_name(force: str | None = None) -> str:
    if force in ("python", "compiled"):
        return force if (force == "python" or _HAVE_CORE) else "python"
    return "compiled" if _HAVE_CORE else "python"


class SimulationUnstable(RuntimeError):
    def __init__(self, status: int, t: float):
        self.status = status
        self.t = t
        super().__init__(f"{_engine_py.STATUS_NAMES.get(status, status)} at t={t:.6f}s")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = violations
        lines = "; ".join(f"{v.code}: {v.message}" for v in violations)
        super().__init__(f"invalid config: {lines}")


@dataclass
class WrenchBreakdown:
    """Per-source force/torque at one instant, world frame, torque about COM."""

    sources: dict[str, tuple[np.ndarray, np.ndarray]] = dc_field(default_factory=dict)

    def total(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.zeros(3)
        tau = np.zeros(3)
        for fs, ts in self.sources.values():
            f = f + fs
            tau = tau + ts
        return f, tau


def contact_points_body(config: SimConfig) -> np.ndarray:
    """Bottom-face contact grid in body coordinates, row-major over (x, y),
    followed by the four top corners. The corners never touch while the body
    rides upright; they exist so a tipped or tumbled body still collides with
    the ground instead of sinking through it."""
    ex, ey, ez = config.robot.extents
    nx, ny = config.robot.contact_grid
    pts = np.zeros((nx * ny + 4, 3))
    k = 0
    for ix in range(nx):
        for iy in range(ny):
            pts[k, 0] = -0.5 * ex + (ix + 0.5) * ex / nx
            pts[k, 1] = -0.5 * ey + (iy + 0.5) * ey / ny
            pts[k, 2] = -0.5 * ez
            k += 1
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            pts[k] = (0.5 * sx * ex, 0.5 * sy * ey, 0.5 * ez)
            k += 1
    return pts


def body_corners(config: SimConfig) -> np.ndarray:
    ex, ey, ez = config.robot.extents
    corners = np.zeros((8, 3))
    k = 0
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                corners[k] = (0.5 * sx * ex, 0.5 * sy * ey, 0.5 * sz * ez)
                k += 1
    return corners


def default_start(config: SimConfig) -> tuple[float, float, float]:
    """Protocol start pose: near the -x end, centered laterally, facing +x.
    Keeps the body more than 5 cm clear of the wall."""
    return (0.10, 0.5 * config.terrain.extent[1], 0.0)


# ERM units wander around their speed setpoint (brush contact, load, supply);
# the wander is slow compared to the rotation itself
OMEGA_NOISE_TAU = 0.3       # s, correlation time of the speed wander
OMEGA_NOISE_BLOCK = 0.01    # s, piecewise-constant track resolution


def _speed_noise_track(config: SimConfig, n_r: int) -> np.ndarray:
    """Per-rotor multiplicative speed offsets, one row per 10 ms block.

    Ornstein-Uhlenbeck in discrete form, seeded from the config seed so a
    trial replays exactly. The engines index it by step count and wrap, so
    the track only needs to cover the typical session."""
    integ = config.integrator
    fracs = np.array([r.speed_noise_frac for r in config.robot.rotors],
                     dtype=float)
    n_blocks = int(math.ceil(2.0 * integ.duration / OMEGA_NOISE_BLOCK)) + 2048
    track = np.zeros((n_blocks, n_r))
    if np.any(fracs > 0.0):
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, 0x0E2A])
        decay = math.exp(-OMEGA_NOISE_BLOCK / OMEGA_NOISE_TAU)
        kick = math.sqrt(1.0 - decay * decay)
        x = rng.standard_normal(n_r)
        for i in range(n_blocks):
            track[i] = x * fracs
            x = decay * x + kick * rng.standard_normal(n_r)
    return track


def _build_spec(config: SimConfig, field: terrain_mod.TerrainField,
                stop_x: float | None) -> dict:
    robot = config.robot
    mat = config.terrain.material
    integ = config.integrator
    n_r = len(robot.rotors)
    e1s = np.zeros((n_r, 3))
    e2s = np.zeros((n_r, 3))
    pull_coef = np.zeros(n_r)
    spin_n = np.zeros((n_r, 3))
    for i, r in enumerate(robot.rotors):
        e1, e2 = rotor_mod.perpendicular_basis(r.axis)
        e1s[i] = e1
        e2s[i] = e2
        # quasi-static speed sag per unit load torque is R/k_b^2; folding in
        # the eccentricity gives phase pull per unit body acceleration
        kb = r.electrical.back_emf_constant
        if r.load_sync > 0.0 and kb > 0.0:
            pull_coef[i] = (r.load_sync * r.eccentricity
                            * r.electrical.winding_resistance / (kb * kb))
        # positive-handedness spin direction; the runtime sign flips it
        spin_n[i] = r.rotor_inertia * np.cross(e1, e2)

    ext_x, ext_y = config.terrain.extent
    walls: list[tuple[int, float, float]] = [
        (0, 0.0, 1.0), (0, ext_x, -1.0), (1, 0.0, 1.0), (1, ext_y, -1.0),
    ]
    if config.corridor_gap is not None:
        start = config.start if config.start is not None else default_start(config)
        y_c = start[1]
        walls.append((1, y_c - 0.5 * config.corridor_gap, 1.0))
        walls.append((1, y_c + 0.5 * config.corridor_gap, -1.0))

    return {
        "dt": integ.dt,
        "mass": robot.mass,
        "inertia": np.asarray(robot.inertia_diag(), dtype=float),
        "wall_k": integ.wall_stiffness,
        "speed_limit": integ.speed_limit,
        "stop_x": math.inf if stop_x is None else stop_x,
        "cell": config.terrain.cell_size,
        "mat_kind": 0 if mat.kind == "granular" else 1,
        "k_g": mat.stiffness,
        "c_g": mat.damping,
        "eps": mat.unload_fraction,
        "mu_g": mat.friction,
        "v_reg": mat.regularization_velocity,
        "v_weak": mat.weakening_velocity,
        "plow": mat.plow_strength,
        "plastic_rate": mat.plastic_rate,
        "compact_cap": mat.compaction_max,
        "loosen_rate": mat.loosening_rate,
        "compact_inv_dref": (1.0 / mat.compaction_depth
                             if mat.compaction_max > 1.0 else 0.0),
        "tan_repose": math.tan(math.radians(mat.repose_deg)),
        "max_av_passes": 50,
        "k_h": mat.point_stiffness,
        "c_h": mat.point_damping,
        "mu_s": mat.static_friction,
        "mu_k": mat.kinetic_friction,
        "A_pt": robot.contact_point_area,
        "n_pts": robot.contact_grid[0] * robot.contact_grid[1] + 4,
        "n_rotors": n_r,
        "n_obstacles": len(config.terrain.obstacles),
        "pts": contact_points_body(config),
        "corners": body_corners(config),
        # torque arm is where the whirl force acts: the eccentric's plane,
        # offset from the mount along the spin axis
        "mounts": np.array(
            [np.asarray(r.mount, dtype=float)
             + r.axial_offset * np.asarray(r.axis, dtype=float)
             for r in robot.rotors], dtype=float).reshape(n_r, 3),
        "axes": np.array([r.axis for r in robot.rotors], dtype=float).reshape(n_r, 3),
        "e1s": e1s,
        "e2s": e2s,
        "ecc": np.array([r.eccentricity for r in robot.rotors], dtype=float),
        "pull_coef": pull_coef,
        "spin_n": spin_n,
        "kv": np.array([r.speed_constant for r in robot.rotors], dtype=float),
        "tau_r": np.array([r.spinup_tau for r in robot.rotors], dtype=float),
        "om_noise": _speed_noise_track(config, n_r),
        "noise_steps": max(1, int(round(OMEGA_NOISE_BLOCK / integ.dt))),
        "exact_spinup": np.array([1 if r.exact_spinup else 0 for r in robot.rotors],
                                 dtype=np.int64),
        "react": np.array([1 if r.spinup_reaction_torque else 0 for r in robot.rotors],
                          dtype=np.int64),
        "rarm": np.array([r.reaction_arm for r in robot.rotors], dtype=float),
        "keb": np.array([r.electrical.back_emf_constant for r in robot.rotors],
                        dtype=float),
        "Rw": np.array([r.electrical.winding_resistance for r in robot.rotors],
                       dtype=float),
        "I0": np.array([r.electrical.no_load_current for r in robot.rotors],
                       dtype=float),
        "obstacles": np.array(config.terrain.obstacles, dtype=float).reshape(-1, 3),
        "walls": walls,
        "pose_period": 1.0 / integ.pose_rate,
        "power_period": 1.0 / integ.power_rate,
        "phase_period": 1.0 / integ.phase_rate,
    }


def assemble_wrench(config: SimConfig, field: terrain_mod.TerrainField,
                    pos, quat, vel, omega_b, rotor_phases, rotor_speeds,
                    setpoints) -> WrenchBreakdown:
    """Instantaneous per-source wrench at a given body/rotor state.

    Diagnostic reference path; the engines accumulate the same sums inline.
    Sources: rotor_<i>, contact, wall, obstacle, gravity. World frame, torque
    about the COM.
    """
    robot = config.robot
    R = _engine_py.quat_to_mat(np.asarray(quat, dtype=float))
    pos = np.asarray(pos, dtype=float)
    vel = np.asarray(vel, dtype=float)
    omega_b = np.asarray(omega_b, dtype=float)
    out = WrenchBreakdown()

    for i, rp in enumerate(robot.rotors):
        fb, taub = rotor_mod.rotor_wrench(rotor_phases[i], rotor_speeds[i],
                                          setpoints[i].spin_sign, rp)
        out.sources[f"rotor_{i}"] = (R @ fb, R @ taub)

    pts = contact_points_body(config)
    mat = config.terrain.material
    area = robot.contact_point_area
    n_face = len(pts) - 4
    omega_w = R @ omega_b
    f_c = np.zeros(3)
    tau_c = np.zeros(3)
    ny, nx = field.shape
    for k_pt, p in enumerate(pts):
        r_w = R @ p
        X = pos + r_w
        v_pt = vel + np.cross(omega_w, r_w)
        h_loc = field.sample(X[0], X[1])
        if mat.kind == "granular":
            i_n = min(max(int(math.floor(X[0] / field.cell + 0.5)), 0), nx - 1)
            j_n = min(max(int(math.floor(X[1] / field.cell + 0.5)), 0), ny - 1)
            mult = float(field.stiffness_mult[j_n, i_n])
        else:
            mult = 1.0
        a_pt = area if k_pt < n_face else area * _engine_py.CORNER_AREA_FRAC
        f, _ = terrain_mod.contact_force(X[2], v_pt, h_loc, a_pt, mat, mult)
        f_c += f
        tau_c += np.cross(r_w, f)
    out.sources["contact"] = (f_c, tau_c)

    corners = body_corners(config)
    spec_walls = _build_spec(config, field, None)["walls"]
    f_w = np.zeros(3)
    tau_w = np.zeros(3)
    for axis, wall_pos, direction in spec_walls:
        for c in corners:
            cw = R @ c
            pen = (pos[axis] + cw[axis] - wall_pos) * -direction
            if pen > 0.0:
                f = np.zeros(3)
                f[axis] = direction * config.integrator.wall_stiffness * pen
                f_w += f
                tau_w += np.cross(cw, f)
    out.sources["wall"] = (f_w, tau_w)

    f_o = np.zeros(3)
    tau_o = np.zeros(3)
    for ox, oy, orad in config.terrain.obstacles:
        for c in corners:
            cw = R @ c
            dx = pos[0] + cw[0] - ox
            dy = pos[1] + cw[1] - oy
            dist = math.hypot(dx, dy)
            if 1e-12 < dist < orad:
                push = config.integrator.wall_stiffness * (orad - dist)
                f = np.array([push * dx / dist, push * dy / dist, 0.0])
                f_o += f
                tau_o += np.cross(cw, f)
    out.sources["obstacle"] = (f_o, tau_o)

    out.sources["gravity"] = (np.array([0.0, 0.0, -robot.mass * GRAVITY]), np.zeros(3))
    return out


class Simulation:
    """One configured run: terrain reset, settling, scheduled stepping,
    telemetry capture. Use run_recorded() for the standard span or step_to()
    for incremental driving (teleop)."""

    def __init__(self, config: SimConfig, engine: str | None = None,
                 stop_x: float | None = None, validate: bool = True):
        if validate:
            violations = validate_config(config)
            if violations:
                raise ConfigError(violations)
        self.config = config
        self.field = terrain_mod.reset_fluidized(config.terrain, config.seed)
        self.spec = _build_spec(config, self.field, stop_x)
        self.backend = backend_name(engine)
        if self.backend == "compiled":
            self.engine = _core.CoreEngine(self.spec, self.field.heights,
                                           self.field.stiffness_mult)
        else:
            self.engine = _engine_py.PyEngine(self.spec, self.field.heights,
                                              self.field.stiffness_mult)
        start = config.start if config.start is not None else default_start(config)
        x0, y0, yaw0 = start
        self.engine.pos[:] = (x0, y0, self._rest_height(x0, y0))
        self.engine.quat[:] = (math.cos(0.5 * yaw0), 0.0, 0.0, math.sin(0.5 * yaw0))
        self._buffers = None
        self.status = _engine_py.OK
        self.settled = False

    def _rest_height(self, x: float, y: float) -> float:
        # drop-in height: bottom face 2 mm above the local surface
        ez = self.config.robot.extents[2]
        return self.field.sample(x, y) + 0.5 * ez + 2e-3

    # -- engine state passthrough ------------------------------------------

    @property
    def pos(self) -> np.ndarray:
        return self.engine.pos

    @property
    def quat(self) -> np.ndarray:
        return self.engine.quat

    @property
    def vel(self) -> np.ndarray:
        return self.engine.vel

    @property
    def omega(self) -> np.ndarray:
        return self.engine.omega

    def time(self) -> float:
        return self.engine.time()

    def yaw(self) -> float:
        R = _engine_py.quat_to_mat(self.engine.quat)
        return math.atan2(R[1, 0], R[0, 0])

    def kinetic_energy(self) -> float:
        m = self.config.robot.mass
        inertia = self.spec["inertia"]
        v = self.engine.vel
        w = self.engine.omega
        return 0.5 * m * float(v @ v) + 0.5 * float(w @ (inertia * w))

    def potential_energy(self) -> float:
        return self.config.robot.mass * GRAVITY * float(self.engine.pos[2])

    # -- stepping -----------------------------------------------------------

    def _setpoint_arrays(self, command: ManeuverCommand):
        sps = control.resolve_command(command, self.config.robot.kind)
        signs = np.array([sp.spin_sign for sp in sps], dtype=np.int64)
        volts = np.array([sp.voltage for sp in sps], dtype=float)
        return signs, volts

    def settle(self, duration: float | None = None) -> None:
        """Motors-off settling; clock and tallies reset to zero afterwards."""
        dur = self.config.integrator.settle_time if duration is None else duration
        n = int(round(dur / self.config.integrator.dt))
        signs, volts = self._setpoint_arrays(ManeuverCommand(Maneuver.STOP, 0.0))
        status, done = self.engine.run(n, signs, volts, False, None, None, None)
        if status not in (_engine_py.OK, _engine_py.REACHED_STOP):
            raise SimulationUnstable(status, self.engine.time())
        self.engine.reset_clock()
        self.settled = True

    def _alloc_buffers(self, duration: float):
        integ = self.config.integrator
        n_r = self.spec["n_rotors"]
        cap = lambda rate: int(math.ceil(duration * rate)) + 4
        pose = np.zeros((cap(integ.pose_rate), 8))
        power = np.zeros((cap(integ.power_rate), 2))
        phase = np.zeros((cap(integ.phase_rate), 3 + 2 * n_r))
        return pose, power, phase

    def run_recorded(self, duration: float | None = None):
        """Settle (if not yet), then run the command schedule for the span,
        recording pose/power/phase channels. Returns raw channel arrays and
        bookkeeping used by telemetry.capture_record."""
        if not self.settled:
            self.settle()
        dur = self.config.integrator.duration if duration is None else duration
        dt = self.config.integrator.dt
        pose_buf, power_buf, phase_buf = self._alloc_buffers(dur)
        ke0, pe0 = self.kinetic_energy(), self.potential_energy()

        last_volts = np.zeros(self.spec["n_rotors"])
        stopped_early = False
        for t0, t1, cmd in control.schedule_segments(self.config.control, dur):
            signs, volts = self._setpoint_arrays(cmd)
            last_volts = volts
            n = int(round(t1 / dt)) - int(round(t0 / dt))
            status, done = self.engine.run(n, signs, volts, True,
                                           pose_buf, power_buf, phase_buf)
            if status == _engine_py.REACHED_STOP:
                stopped_early = True
                break
            if status != _engine_py.OK:
                raise SimulationUnstable(status, self.engine.time())

        # closing sample so every channel ends at the final state
        if self.engine.time() > (self.engine.pose_count - 1) * self.spec["pose_period"] + 1e-12:
            self.engine.emit_pose(pose_buf)
        if self.engine.time() > (self.engine.power_count - 1) * self.spec["power_period"] + 1e-12:
            self.engine.emit_power(power_buf, last_volts)
        if self.engine.time() > (self.engine.phase_count - 1) * self.spec["phase_period"] + 1e-12:
            self.engine.emit_phase(phase_buf)

        ke1, pe1 = self.kinetic_energy(), self.potential_energy()
        acc = self.engine.acc
        audit = {
            "work_in_J": float(acc[_engine_py.ACC_WORK_IN]),
            "delta_ke_J": ke1 - ke0,
            "delta_pe_J": pe1 - pe0,
            "dissipated_J": {
                "friction": float(acc[_engine_py.ACC_FRICTION]),
                "damping": float(acc[_engine_py.ACC_DAMPING]),
                "plastic": float(acc[_engine_py.ACC_PLASTIC]),
            },
            "quat_norm_drift_max": float(acc[_engine_py.ACC_QUAT_DRIFT]),
            "avalanche_overflow_steps": int(acc[_engine_py.ACC_AVALANCHE_OVERFLOW]),
        }
        diss = sum(audit["dissipated_J"].values())
        audit["dissipated_J"]["total"] = diss
        audit["residual_J"] = audit["work_in_J"] - audit["delta_ke_J"] \
            - audit["delta_pe_J"] - diss
        denom = abs(audit["work_in_J"])
        audit["residual_fraction"] = audit["residual_J"] / denom if denom > 0 else 0.0

        return {
            "pose": pose_buf[: self.engine.pose_count].copy(),
            "power": power_buf[: self.engine.power_count].copy(),
            "phase": phase_buf[: self.engine.phase_count].copy(),
            "audit": audit,
            "stopped_early": stopped_early,
            "final_time": self.engine.time(),
        }

    def step_for(self, duration: float, command: ManeuverCommand,
                 record_buffers=None) -> int:
        """Advance by a fixed span under one command (teleop driving).
        Returns the engine status code."""
        if not self.settled:
            self.settle()
        dt = self.config.integrator.dt
        n = max(1, int(round(duration / dt)))
        signs, volts = self._setpoint_arrays(command)
        if record_buffers is None:
            status, _ = self.engine.run(n, signs, volts, False, None, None, None)
        else:
            pose_buf, power_buf, phase_buf = record_buffers
            status, _ = self.engine.run(n, signs, volts, True,
                                        pose_buf, power_buf, phase_buf)
        self.status = status
        if status not in (_engine_py.OK, _engine_py.REACHED_STOP):
            raise SimulationUnstable(status, self.engine.time())
        return status


def energy_audit(run_output: dict) -> dict:
    """Energy closure report for a recorded run: work_in = dKE + dPE +
    dissipated + residual, residual reported as a fraction of the input work."""
    return run_output["audit"]
