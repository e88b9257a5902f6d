"""Eccentric rotating mass vibration motor.

The imbalance spins at phase phi about a body-fixed axis a. With (e1, e2, a) a
right-handed orthonormal triple, the inertial force on the body is

    F(phi) = (m_e r) * omega^2 * (cos(phi) e1 + s sin(phi) e2)

where s = +1 spins counter-clockwise about +a and s = -1 clockwise. Averaged
over a full cycle at constant speed the force vanishes; locomotion comes
entirely from contact rectification, not from the rotor itself.

Speed follows a first-order lag toward k_v * V; phase integrates the speed
magnitude, with the spin direction entering only through s in the force.
Electrical power uses the standard brushed DC model and is accounting only
(no feedback into the mechanics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RotorParams

TWO_PI = 2.0 * math.pi


@dataclass
class RotorState:
    phase: float = 0.0      # rad, in [0, 2*pi)
    speed: float = 0.0      # rad/s, unsigned magnitude


def voltage_to_omega_ss(voltage: float, speed_constant: float = 53.41) -> float:
    """Steady-state speed magnitude, rad/s."""
    return speed_constant * abs(voltage)


def perpendicular_basis(axis) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (e1, e2) completing axis to a right-handed triple.

    Reference direction is world z unless the axis is nearly vertical, then x.
    e1 x e2 = axis exactly (up to normalization round-off).
    """
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    ref = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = ref - np.dot(ref, a) * a
    e1 = e1 / np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return e1, e2


def step_rotor(state: RotorState, voltage: float, params: RotorParams, dt: float,
               spin_sign: int) -> RotorState:
    """Advance speed then phase by one step (speed update first, phase uses the
    new speed). ``exact_spinup`` swaps the Euler relaxation for the exact
    exponential solution of the same lag."""
    omega_ss = voltage_to_omega_ss(voltage, params.speed_constant)
    if params.exact_spinup:
        speed = omega_ss + (state.speed - omega_ss) * math.exp(-dt / params.spinup_tau)
    else:
        speed = state.speed + (omega_ss - state.speed) * (dt / params.spinup_tau)
    phase = state.phase
    if spin_sign != 0:
        phase = math.fmod(phase + speed * dt, TWO_PI)
        if phase < 0.0:
            phase += TWO_PI
    return RotorState(phase=phase, speed=speed)


def rotor_force(phase: float, speed: float, spin_sign: int,
                params: RotorParams) -> np.ndarray:
    """Body-frame inertial force of the spinning imbalance."""
    e1, e2 = perpendicular_basis(params.axis)
    amp = params.eccentricity * speed * speed
    return amp * (math.cos(phase) * e1 + spin_sign * math.sin(phase) * e2)


def rotor_wrench(phase: float, speed: float, spin_sign: int, params: RotorParams,
                 speed_rate: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame (force, torque about COM).

    Torque is mount x force, plus an optional reaction to the imbalance being
    spun up (off by default; relevant only during the lag transient).
    """
    f = rotor_force(phase, speed, spin_sign, params)
    mount = np.asarray(params.mount, dtype=float)
    tau = np.cross(mount, f)
    if params.spinup_reaction_torque and spin_sign != 0:
        axis = np.asarray(params.axis, dtype=float)
        tau = tau - (spin_sign * params.eccentricity * params.reaction_arm
                     * speed_rate) * axis
    return f, tau


def electrical_power(voltage: float, speed: float, params: RotorParams) -> float:
    """Instantaneous electrical power draw, W. Current is clamped at zero; the
    model never generates."""
    e = params.electrical
    current = (voltage - e.back_emf_constant * speed) / e.winding_resistance \
        + e.no_load_current
    if current < 0.0:
        current = 0.0
    return voltage * current
