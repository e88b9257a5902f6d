"""Experiment harness: standard trials, locomotion metrics, parameter sweeps,
slope and pit-escape scenarios, and preset calibration.

Protocols mirror the desk setup the simulator models: a 0.60 x 0.30 m tank, a
0.10 m corridor for straight-line runs, runs of 10 s after a 0.5 s settle,
three seeded trials per condition, speeds in cm/s measured after discarding
the first 2 s.
"""

from __future__ import annotations

import json
import math
import os
import time as time_mod
from dataclasses import dataclass, field

import numpy as np

from . import control, telemetry
from .config import (GRAVITY, ControlProgram, Maneuver, ManeuverCommand, SimConfig,
                     TerrainParams)
from .dynamics import Simulation
from .presets import standard_config
from .telemetry import RunRecord

COT_INEFFECTIVE = math.inf  # sentinel for runs with no usable forward progress
SPEED_DISCARD_S = 2.0
STUCK_WINDOW_S = 10.0
STUCK_THRESHOLD_M = 0.02    # half a body length


def trial_seed(base_seed: int, voltage: float, trial: int) -> int:
    """Deterministic per-trial terrain seed; trials differ only in this."""
    ss = np.random.SeedSequence([base_seed, int(round(voltage * 1000)), trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def run_trial(config: SimConfig, stop_at_far_end: bool = True,
              engine: str | None = None) -> RunRecord:
    """Settle, run the configured schedule, and return the captured record
    with standard metrics attached. The run ends early if the robot reaches
    the far end of the tank."""
    stop_x = None
    if stop_at_far_end:
        stop_x = config.terrain.extent[0] - 0.5 * config.robot.extents[0] - 0.01
    sim = Simulation(config, engine=engine, stop_x=stop_x)
    out = sim.run_recorded()
    record = telemetry.capture_record(config, out)
    record.metrics = standard_metrics(record)
    record.metrics["final_time_s"] = out["final_time"]
    record.metrics["reached_far_end"] = bool(out["stopped_early"])
    return record


def standard_metrics(record: RunRecord) -> dict:
    speed = mean_speed(record)
    power = mean_power(record)
    cot = cost_of_transport(record)
    stuck, onset = detect_stuck(record)
    return {
        "mean_speed_cmps": speed,
        "mean_power_w": power,
        "cot": None if cot == COT_INEFFECTIVE else cot,
        "cot_ineffective": cot == COT_INEFFECTIVE,
        "stuck": stuck,
        "stuck_onset_s": onset,
    }


def mean_speed(record: RunRecord, discard_s: float = SPEED_DISCARD_S) -> float:
    """Net forward (+x) speed in cm/s over the record after the discard span.
    Signed: net backward drift comes out negative."""
    pose = record.pose
    if pose.shape[0] < 2:
        return 0.0
    t = pose[:, 0]
    idx = int(np.searchsorted(t, discard_s))
    if idx >= pose.shape[0] - 1:
        idx = 0
    dt = t[-1] - t[idx]
    if dt <= 0:
        return 0.0
    return float((pose[-1, 1] - pose[idx, 1]) / dt * 100.0)


def mean_power(record: RunRecord, discard_s: float = SPEED_DISCARD_S) -> float:
    power = record.power
    if power.shape[0] == 0:
        return 0.0
    t = power[:, 0]
    idx = int(np.searchsorted(t, discard_s))
    if idx >= power.shape[0]:
        idx = 0
    return float(np.mean(power[idx:, 1]))


def cost_of_transport(record: RunRecord, discard_s: float = SPEED_DISCARD_S) -> float:
    """Dimensionless P / (m g v). Runs with no net forward progress get the
    sentinel COT_INEFFECTIVE (persisted as inf)."""
    v = mean_speed(record, discard_s) / 100.0
    if v <= 1e-6:
        return COT_INEFFECTIVE
    p = mean_power(record, discard_s)
    m = record.config.robot.mass
    return p / (m * GRAVITY * v)


@dataclass
class CycleTable:
    """Per rotor cycle: forward and backward x-distance and their difference."""

    start_t: np.ndarray
    d_forward: np.ndarray
    d_backward: np.ndarray

    @property
    def net(self) -> np.ndarray:
        return self.d_forward - self.d_backward

    def __len__(self) -> int:
        return len(self.start_t)


def cycle_decomposition(record: RunRecord, rotor_index: int = 0,
                        start_time: float = SPEED_DISCARD_S) -> CycleTable:
    """Split x-motion into per-rotor-revolution forward/backward components.

    Cycle boundaries are full 2*pi accumulations of the (unwrapped) rotor
    phase from the phase channel; within a cycle d_f sums positive x
    increments and d_b the magnitudes of negative ones, so net displacement
    per cycle is exactly d_f - d_b.
    """
    ph = record.phase
    if ph.shape[0] < 3:
        return CycleTable(np.zeros(0), np.zeros(0), np.zeros(0))
    t = ph[:, 0]
    x = ph[:, 1]
    phase = ph[:, 3 + 2 * rotor_index]
    i0 = int(np.searchsorted(t, start_time))
    if i0 >= len(t) - 2:
        i0 = 0
    t, x, phase = t[i0:], x[i0:], phase[i0:]
    unwrapped = np.unwrap(phase)
    total = np.abs(unwrapped - unwrapped[0])
    starts, d_f, d_b = [], [], []
    boundary = 0.0
    seg_f = seg_b = 0.0
    seg_start = t[0]
    for k in range(1, len(t)):
        dx = x[k] - x[k - 1]
        if dx >= 0.0:
            seg_f += dx
        else:
            seg_b -= dx
        if total[k] >= boundary + 2.0 * math.pi:
            starts.append(seg_start)
            d_f.append(seg_f)
            d_b.append(seg_b)
            boundary += 2.0 * math.pi
            seg_f = seg_b = 0.0
            seg_start = t[k]
    return CycleTable(np.array(starts), np.array(d_f), np.array(d_b))


def detect_stuck(record: RunRecord, window_s: float = STUCK_WINDOW_S,
                 threshold_m: float = STUCK_THRESHOLD_M) -> tuple[bool, float | None]:
    """Stuck when net planar displacement over some trailing window stays
    under the threshold. Returns (flag, onset time = end of the first such
    window, None when never stuck or the record is shorter than one window)."""
    pose = record.pose
    if pose.shape[0] < 2:
        return False, None
    t = pose[:, 0]
    if t[-1] - t[0] < window_s:
        return False, None
    xy = pose[:, 1:3]
    j = 0
    for i in range(len(t)):
        if t[i] - t[0] < window_s:
            continue
        while t[i] - t[j + 1] >= window_s:
            j += 1
        disp = math.hypot(xy[i, 0] - xy[j, 0], xy[i, 1] - xy[j, 1])
        if disp < threshold_m:
            return True, float(t[i])
    return False, None


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    preset: str
    voltages: np.ndarray
    rows: list[dict] = field(default_factory=list)      # one per (voltage, trial)
    summary: dict = field(default_factory=dict)

    def optimum_voltage(self) -> float | None:
        best_v, best_s = None, -math.inf
        for v in self.voltages:
            speeds = [r["mean_speed_cmps"] for r in self.rows if r["voltage_V"] == v]
            if speeds and float(np.mean(speeds)) > best_s:
                best_s = float(np.mean(speeds))
                best_v = float(v)
        return best_v


def run_sweep(preset: str, v_min: float = 3.0, v_max: float = 8.0,
              v_step: float = 0.5, trials: int = 3, duration: float = 10.0,
              seed: int = 0, out_dir: str | None = None,
              engine: str | None = None, keep_records: bool = False,
              mode: Maneuver = Maneuver.FORWARD) -> SweepResult:
    """Voltage sweep on one terrain preset: `trials` seeded runs per voltage,
    straight-line protocol. Writes sweep_<preset>.csv and
    sweep_<preset>_summary.json when out_dir is given."""
    voltages = np.round(np.arange(v_min, v_max + 0.5 * v_step, v_step), 9)
    result = SweepResult(preset=preset, voltages=voltages)
    records: list[RunRecord] = []
    for v in voltages:
        for trial in range(trials):
            ts = trial_seed(seed, float(v), trial)
            config = standard_config(preset, voltage=float(v), mode=mode,
                                     duration=duration, seed=ts)
            record = run_trial(config, engine=engine)
            cot = record.metrics["cot"]
            result.rows.append({
                "voltage_V": float(v),
                "trial": trial,
                "mean_speed_cmps": record.metrics["mean_speed_cmps"],
                "cot": COT_INEFFECTIVE if record.metrics["cot_ineffective"] else cot,
                "stuck": record.metrics["stuck"],
                "seed": ts,
            })
            if keep_records:
                records.append(record)
    result.summary = _summarize_sweep(result)
    if keep_records:
        result.records = records  # type: ignore[attr-defined]
    if out_dir is not None:
        write_sweep_outputs(result, out_dir)
    return result


def _summarize_sweep(result: SweepResult) -> dict:
    per_voltage = []
    for v in result.voltages:
        rows = [r for r in result.rows if r["voltage_V"] == v]
        speeds = np.array([r["mean_speed_cmps"] for r in rows])
        cots = np.array([r["cot"] for r in rows if math.isfinite(r["cot"])])
        per_voltage.append({
            "voltage_V": float(v),
            "mean_speed_cmps": float(np.mean(speeds)) if speeds.size else 0.0,
            "std_speed_cmps": float(np.std(speeds)) if speeds.size else 0.0,
            "mean_cot": float(np.mean(cots)) if cots.size else None,
            "std_cot": float(np.std(cots)) if cots.size else None,
            "stuck_trials": int(sum(1 for r in rows if r["stuck"])),
            "trials": len(rows),
        })
    return {
        "preset": result.preset,
        "per_voltage": per_voltage,
        "optimum_voltage_V": result.optimum_voltage(),
    }


def write_sweep_outputs(result: SweepResult, out_dir: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"sweep_{result.preset}.csv")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("voltage_V,trial,mean_speed_cmps,cot,stuck,seed\n")
        for r in result.rows:
            fh.write(f"{r['voltage_V']:.9g},{r['trial']},{r['mean_speed_cmps']:.9g},"
                     f"{r['cot']:.9g},{int(r['stuck'])},{r['seed']}\n")
    json_path = os.path.join(out_dir, f"sweep_{result.preset}_summary.json")
    with open(json_path, "w") as fh:
        json.dump(result.summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# slope and escape scenarios


def run_slope(preset: str = "coarse_sand", angles_deg=(0.0, 4.0, 8.0, 12.0),
              voltage: float = 6.0, trials: int = 3, duration: float = 10.0,
              seed: int = 0, out_dir: str | None = None,
              engine: str | None = None) -> dict:
    """Uphill runs at fixed voltage across incline angles; reports per-angle
    mean climbing speed and stuck counts."""
    per_angle = []
    for angle in angles_deg:
        speeds, stuck_count = [], 0
        for trial in range(trials):
            ts = trial_seed(seed, angle, trial)
            config = standard_config(preset, voltage=voltage, duration=duration,
                                     seed=ts, incline_deg=float(angle))
            record = run_trial(config, engine=engine)
            speeds.append(record.metrics["mean_speed_cmps"])
            if record.metrics["stuck"]:
                stuck_count += 1
        per_angle.append({
            "angle_deg": float(angle),
            "mean_speed_cmps": float(np.mean(speeds)),
            "std_speed_cmps": float(np.std(speeds)),
            "stuck_trials": stuck_count,
            "trials": trials,
        })
    out = {"preset": preset, "voltage_V": voltage, "per_angle": per_angle}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"slope_{preset}.json"), "w") as fh:
            json.dump(out, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return out


def run_escape(preset: str = "fine_sand", v_low: float = 3.0, v_high: float = 5.0,
               timeout_s: float = 30.0, seed: int = 0,
               pit_depth: float = 0.012, pit_radius: float = 0.06,
               engine: str | None = None) -> dict:
    """Two-phase pit scenario: drive at v_low until stuck (or timeout), then
    at v_high until the body center leaves the pit radius (or timeout).

    The robot starts inside the pit so the low-voltage phase tests holding
    power, the high-voltage phase climbing power.
    """
    from .presets import terrain_preset

    terrain = terrain_preset(preset)
    from .config import PitSpec

    pit_center = (0.2, 0.15)
    terrain = TerrainParams(
        material=terrain.material, extent=terrain.extent, cell_size=terrain.cell_size,
        incline_deg=terrain.incline_deg, jitter_amplitude=terrain.jitter_amplitude,
        stiffness_jitter=terrain.stiffness_jitter,
        pit=PitSpec(center=pit_center, radius=pit_radius, depth=pit_depth),
        obstacles=terrain.obstacles)
    config = standard_config(preset, voltage=v_low, duration=timeout_s, seed=seed,
                             corridor_gap=None)
    config = config.with_(terrain=terrain,
                          start=(pit_center[0], pit_center[1], 0.0))
    sim = Simulation(config, engine=engine)
    sim.settle()
    dt = config.integrator.dt
    chunk = 0.1
    cmd_low = ManeuverCommand(Maneuver.FORWARD, v_low)
    cmd_high = ManeuverCommand(Maneuver.FORWARD, v_high)

    # phase 1: drive at v_low, watch for a stuck trailing window
    window, thresh = STUCK_WINDOW_S, STUCK_THRESHOLD_M
    history: list[tuple[float, float, float]] = [(0.0, sim.pos[0], sim.pos[1])]
    stuck_at_low = False
    t_stuck = None
    while sim.time() < timeout_s:
        sim.step_for(chunk, cmd_low)
        history.append((sim.time(), float(sim.pos[0]), float(sim.pos[1])))
        if sim.time() >= window:
            t_now, x_now, y_now = history[-1]
            for t_old, x_old, y_old in history:
                if t_now - t_old <= window:
                    if math.hypot(x_now - x_old, y_now - y_old) < thresh:
                        stuck_at_low = True
                        t_stuck = sim.time()
                    break
        if stuck_at_low:
            break
    phase1_t = sim.time()

    escaped = False
    t_escape = None
    if stuck_at_low:
        # phase 2: raise the voltage, watch the body center against the pit rim
        t0 = sim.time()
        while sim.time() - t0 < timeout_s:
            sim.step_for(chunk, cmd_high)
            if math.hypot(sim.pos[0] - pit_center[0], sim.pos[1] - pit_center[1]) \
                    > pit_radius:
                escaped = True
                t_escape = sim.time() - t0
                break

    return {
        "preset": preset,
        "v_low": v_low,
        "v_high": v_high,
        "pit_depth_m": pit_depth,
        "pit_radius_m": pit_radius,
        "stuck_at_low": stuck_at_low,
        "stuck_time_s": t_stuck,
        "phase1_time_s": phase1_t,
        "escaped_at_high": escaped,
        "escape_time_s": t_escape,
    }


# ---------------------------------------------------------------------------
# calibration


def calibrate(targets: dict[str, float] | None = None, budget: int = 200,
              evaluate=None, v_step: float = 0.5, trials: int = 1,
              duration: float = 6.0, seed: int = 0,
              engine: str | None = None) -> dict:
    """Fit granular material parameters so each preset's sweep optimum lands
    on its target voltage, keeping stiffness and damping ordered
    glass <= fine <= coarse.

    Coordinate descent over (stiffness, friction, damping) per preset, each
    probe costing one sweep evaluation. ``evaluate(preset, params) ->
    optimum voltage`` may be injected (tests use a synthetic model); the
    default runs a real reduced sweep. Returns fitted parameters and the
    evaluation count; raises RuntimeError when the budget would be exceeded.
    """
    from .presets import terrain_preset

    if targets is None:
        targets = {"glass": 4.5, "fine_sand": 6.0, "coarse_sand": 6.5}
    order = [p for p in ("glass", "fine_sand", "coarse_sand") if p in targets]
    evals = {"n": 0}

    def default_evaluate(preset: str, params: dict) -> float:
        base = terrain_preset(preset)
        mat = base.material
        from dataclasses import replace

        mat = replace(mat, stiffness=params["stiffness"], friction=params["friction"],
                      damping=params["damping"])
        result = _sweep_with_material(preset, mat, v_step=v_step, trials=trials,
                                      duration=duration, seed=seed, engine=engine)
        opt = result.optimum_voltage()
        return math.nan if opt is None else opt

    ev = evaluate if evaluate is not None else default_evaluate

    def run_eval(preset: str, params: dict) -> float:
        if evals["n"] >= budget:
            raise RuntimeError(f"calibration budget of {budget} sweep evaluations exhausted")
        evals["n"] += 1
        return ev(preset, params)

    fitted: dict[str, dict] = {}
    floor = {"stiffness": 0.0, "damping": 0.0}
    for preset in order:
        base = terrain_preset(preset).material
        params = {"stiffness": max(base.stiffness, floor["stiffness"]),
                  "friction": base.friction,
                  "damping": max(base.damping, floor["damping"])}
        target = targets[preset]
        best_err = abs(run_eval(preset, params) - target)
        scales = {"stiffness": 1.25, "friction": 1.15, "damping": 1.25}
        for _round in range(3):
            improved = False
            for key, scale in scales.items():
                for factor in (scale, 1.0 / scale):
                    cand = dict(params)
                    cand[key] = params[key] * factor
                    if key in floor and cand[key] < floor[key]:
                        continue  # would break the cross-preset ordering
                    err = abs(run_eval(preset, cand) - target)
                    if err < best_err - 1e-9:
                        best_err, params, improved = err, cand, True
            if not improved or best_err <= 0.25:
                break
        fitted[preset] = {**params, "target_V": target, "error_V": best_err}
        floor = {"stiffness": params["stiffness"], "damping": params["damping"]}

    return {"fitted": fitted, "sweep_evaluations": evals["n"], "budget": budget}


def _sweep_with_material(preset: str, material, v_step: float, trials: int,
                         duration: float, seed: int, engine: str | None) -> SweepResult:
    from dataclasses import replace

    voltages = np.round(np.arange(3.0, 8.0 + 0.5 * v_step, v_step), 9)
    result = SweepResult(preset=preset, voltages=voltages)
    for v in voltages:
        for trial in range(trials):
            ts = trial_seed(seed, float(v), trial)
            config = standard_config(preset, voltage=float(v), duration=duration,
                                     seed=ts)
            config = config.with_(terrain=replace(config.terrain, material=material))
            record = run_trial(config, engine=engine)
            result.rows.append({
                "voltage_V": float(v), "trial": trial,
                "mean_speed_cmps": record.metrics["mean_speed_cmps"],
                "cot": COT_INEFFECTIVE if record.metrics["cot_ineffective"]
                else record.metrics["cot"],
                "stuck": record.metrics["stuck"], "seed": ts,
            })
    result.summary = _summarize_sweep(result)
    return result
