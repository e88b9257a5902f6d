"""Maneuver commands resolved to per-rotor setpoints, plus command scripts.

Bi-cube mapping (rotor #1 left at +y, rotor #2 right at -y):

    forward  ->  #1 CCW at V,  #2 CW at V
    left     ->  #1 off,       #2 CCW at V
    right    ->  #1 CW at V,   #2 off
    stop     ->  both off

Single cube: any positive-voltage command spins its one rotor (forward/left
CCW, right CW); stop turns it off.

Scripts are whitespace-separated lines "<time_s> <mode> <voltage>"; '#' starts
a comment. Commands hold until the next entry (hold-last semantics).
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ControlProgram, Maneuver, ManeuverCommand


@dataclass(frozen=True)
class MotorSetpoint:
    spin_sign: int      # +1 CCW about the rotor axis, -1 CW, 0 off
    voltage: float


_OFF = MotorSetpoint(0, 0.0)


def resolve_command(command: ManeuverCommand, kind: str = "bicube") -> tuple[MotorSetpoint, ...]:
    """Per-rotor (spin sign, voltage) for a maneuver command."""
    v = command.voltage
    mode = command.mode
    if kind == "bicube":
        if mode is Maneuver.FORWARD:
            return (MotorSetpoint(+1, v), MotorSetpoint(-1, v))
        if mode is Maneuver.LEFT:
            return (_OFF, MotorSetpoint(+1, v))
        if mode is Maneuver.RIGHT:
            return (MotorSetpoint(-1, v), _OFF)
        return (_OFF, _OFF)
    if kind == "single":
        if mode is Maneuver.STOP or v == 0.0:
            return (_OFF,)
        if mode is Maneuver.RIGHT:
            return (MotorSetpoint(-1, v),)
        return (MotorSetpoint(+1, v),)
    raise ValueError(f"unknown robot kind {kind!r}")


def command_at(program: ControlProgram, t: float) -> ManeuverCommand:
    """Active command at time t; stop before the first entry."""
    active = ManeuverCommand(Maneuver.STOP, 0.0)
    for t_k, cmd in program.entries:
        if t_k <= t:
            active = cmd
        else:
            break
    return active


def schedule_segments(program: ControlProgram, duration: float
                      ) -> list[tuple[float, float, ManeuverCommand]]:
    """Piecewise-constant (t_start, t_end, command) covering [0, duration)."""
    events: list[tuple[float, ManeuverCommand]] = []
    if not program.entries or program.entries[0][0] > 0.0:
        events.append((0.0, ManeuverCommand(Maneuver.STOP, 0.0)))
    for t_k, cmd in program.entries:
        if t_k < duration:
            events.append((t_k, cmd))
    segments = []
    for i, (t_k, cmd) in enumerate(events):
        t_end = events[i + 1][0] if i + 1 < len(events) else duration
        if t_end > t_k:
            segments.append((t_k, t_end, cmd))
    return segments


_MODES = {m.value: m for m in Maneuver}


def parse_script(text: str) -> ControlProgram:
    """Parse "<time_s> <mode> <voltage>" lines into a ControlProgram.

    Raises ValueError with the line number for malformed rows or
    non-increasing times.
    """
    entries: list[tuple[float, ManeuverCommand]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected '<time_s> <mode> <voltage>', got {raw!r}")
        try:
            t = float(parts[0])
            voltage = float(parts[2])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad number in {raw!r}") from exc
        mode = _MODES.get(parts[1].lower())
        if mode is None:
            raise ValueError(f"line {lineno}: unknown mode {parts[1]!r}")
        if t < 0:
            raise ValueError(f"line {lineno}: negative time {t}")
        if entries and t <= entries[-1][0]:
            raise ValueError(f"line {lineno}: time {t} not after previous {entries[-1][0]}")
        entries.append((t, ManeuverCommand(mode, voltage)))
    return ControlProgram(entries=tuple(entries))


def format_script(program: ControlProgram) -> str:
    lines = [f"{t:g} {cmd.mode.value} {cmd.voltage:g}" for t, cmd in program.entries]
    return "\n".join(lines) + ("\n" if lines else "")
