"""Run records and their on-disk form.

A RunRecord holds the decimated channels of one run plus its config and
summary metrics. Channel values are quantized to 9 significant digits at
capture so that the in-memory record and its CSV round-trip compare equal,
and so that repeated runs of the same config produce byte-identical files.

Disk layout for persist(record, dir):
    pose.csv    t_s,x_m,y_m,z_m,qw,qx,qy,qz
    power.csv   t_s,power_w
    phase.csv   t_s,x_m,z_m,phi0_rad,omega0_rads[,phi1_rad,omega1_rads,...]
    meta.json   schema, build, config, digest, metrics, audit, row counts and
                per-file sha256 checksums (written last; acts as the manifest)
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import SimConfig

SCHEMA_VERSION = 1
_FMT = "%.9g"


def quantize(arr: np.ndarray) -> np.ndarray:
    """Round every value to 9 significant digits (the CSV precision)."""
    flat = arr.reshape(-1)
    out = np.array([float(_FMT % v) for v in flat])
    return out.reshape(arr.shape)


def _phase_columns(n_rotors: int) -> list[str]:
    cols = ["t_s", "x_m", "z_m"]
    for r in range(n_rotors):
        cols += [f"phi{r}_rad", f"omega{r}_rads"]
    return cols


@dataclass
class RunRecord:
    config: SimConfig
    pose: np.ndarray        # (n, 8)
    power: np.ndarray       # (m, 2)
    phase: np.ndarray       # (k, 3 + 2*n_rotors)
    metrics: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    @property
    def n_rotors(self) -> int:
        return (self.phase.shape[1] - 3) // 2 if self.phase.size else \
            len(self.config.robot.rotors)

    def digest(self) -> int:
        return config_mod.config_digest(self.config)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunRecord):
            return NotImplemented
        return (config_mod.config_to_dict(self.config) == config_mod.config_to_dict(other.config)
                and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.power, other.power)
                and np.array_equal(self.phase, other.phase)
                and self.metrics == other.metrics)


def capture_record(config: SimConfig, run_output: dict, metrics: dict | None = None
                   ) -> RunRecord:
    """Build a RunRecord from a Simulation.run_recorded() result, quantizing
    channels to the persisted precision."""
    return RunRecord(
        config=config,
        pose=quantize(run_output["pose"]),
        power=quantize(run_output["power"]),
        phase=quantize(run_output["phase"]),
        metrics=dict(metrics or {}),
        audit=dict(run_output.get("audit", {})),
    )


def _write_csv(path: str, header: list[str], rows: np.ndarray) -> str:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_FMT % v for v in row) + "\n")
    return _sha256(path)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def persist(record: RunRecord, out_dir: str) -> None:
    """Write the channel CSVs, then meta.json as the closing manifest."""
    os.makedirs(out_dir, exist_ok=True)
    checks = {}
    checks["pose.csv"] = _write_csv(
        os.path.join(out_dir, "pose.csv"),
        ["t_s", "x_m", "y_m", "z_m", "qw", "qx", "qy", "qz"], record.pose)
    checks["power.csv"] = _write_csv(
        os.path.join(out_dir, "power.csv"), ["t_s", "power_w"], record.power)
    checks["phase.csv"] = _write_csv(
        os.path.join(out_dir, "phase.csv"), _phase_columns(record.n_rotors), record.phase)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "build": _build_version(),
        "config": config_mod.config_to_dict(record.config),
        "config_digest": f"{record.digest():016x}",
        "rows": {
            "pose.csv": int(record.pose.shape[0]),
            "power.csv": int(record.power.shape[0]),
            "phase.csv": int(record.phase.shape[0]),
        },
        "checksums": checks,
        "metrics": record.metrics,
        "audit": record.audit,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _build_version() -> str:
    from . import __version__

    return __version__


class RecordIntegrityError(RuntimeError):
    pass


def _read_csv(path: str, expect_cols: int) -> np.ndarray:
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float)
    if data.size == 0:
        return np.zeros((0, expect_cols))
    if data.ndim == 1:
        data = data.reshape(1, -1)
    if data.shape[1] != expect_cols:
        raise RecordIntegrityError(f"{path}: expected {expect_cols} columns, "
                                   f"got {data.shape[1]}")
    return data


def load(run_dir: str) -> RunRecord:
    """Load a persisted record, verifying checksums and row counts against
    the manifest."""
    meta_path = os.path.join(run_dir, "meta.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
        raise RecordIntegrityError(f"unsupported record schema {meta.get('schema_version')}")
    for name, want in meta["checksums"].items():
        got = _sha256(os.path.join(run_dir, name))
        if got != want:
            raise RecordIntegrityError(f"{name}: checksum mismatch")
    config = config_mod.config_from_dict(meta["config"])
    n_r = len(config.robot.rotors)
    pose = _read_csv(os.path.join(run_dir, "pose.csv"), 8)
    power = _read_csv(os.path.join(run_dir, "power.csv"), 2)
    phase = _read_csv(os.path.join(run_dir, "phase.csv"), 3 + 2 * n_r)
    for name, arr in (("pose.csv", pose), ("power.csv", power), ("phase.csv", phase)):
        if int(meta["rows"][name]) != arr.shape[0]:
            raise RecordIntegrityError(f"{name}: row count mismatch")
    return RunRecord(config=config, pose=pose, power=power, phase=phase,
                     metrics=meta.get("metrics", {}), audit=meta.get("audit", {}))
