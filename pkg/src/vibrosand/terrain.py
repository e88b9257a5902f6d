"""Granular heightfield terrain and the point-contact force law.

The bed is a regular grid of surface heights h[j, i] at nodes
(x, y) = (i, j) * cell, bilinearly interpolated between nodes. Each node owns
one cell^2 of footprint, so the bed volume is sum(h) * cell^2. Contact is
resolved per robot contact point against the interpolated surface:

  granular normal, loading   F_n = A * (k_g * d + c_g * v_pen)
  granular normal, unloading F_n = A * k_g * d * eps          (hysteresis)
  rigid normal               F_n = max(0, k_h * d + c_h * v_pen)   per point
  tangential (both)          F_t = -mu * F_n * tanh(|v_t| / v_reg) * v_t_hat

with d the penetration depth, v_pen the downward speed of the point, and A
the per-point footprint area (rigid ignores A). On the rigid kind mu blends
from static_friction at rest to kinetic_friction in sustained sliding.

Craters form by plastic flow: a penetrated node's height relaxes toward the
deepest contemporaneous contact depth at a finite rate, and the displaced
volume is deposited on the nearest non-penetrated neighbors (berms). An
avalanche pass then relaxes any slope steeper than the angle of repose by
moving material downhill. Both operations conserve volume exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import MaterialParams, TerrainParams

# neighbor offsets for plastic deposit rings and avalanche transfer
_NEIGHBORS8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass
class TerrainField:
    """Mutable runtime heightfield plus per-node stiffness multipliers."""

    params: TerrainParams
    heights: np.ndarray             # (ny, nx) surface height, m
    stiffness_mult: np.ndarray      # (ny, nx) multiplier on granular stiffness
    base_heights: np.ndarray        # post-reset snapshot, for crater diagnostics

    @property
    def cell(self) -> float:
        return self.params.cell_size

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape  # type: ignore[return-value]

    def volume(self) -> float:
        return float(np.sum(self.heights)) * self.cell * self.cell

    def plane_height(self, x: float) -> float:
        """Nominal (unjittered) surface height of the inclined plane at x."""
        return x * math.tan(math.radians(self.params.incline_deg))

    def sample(self, x: float, y: float) -> float:
        """Bilinear surface height at a world (x, y); edge heights extend
        beyond the grid."""
        return bilinear(self.heights, x / self.cell, y / self.cell)

    def export_rows_mm(self) -> np.ndarray:
        return self.heights * 1000.0


def bilinear(grid: np.ndarray, gx: float, gy: float) -> float:
    ny, nx = grid.shape
    i0 = int(math.floor(gx))
    j0 = int(math.floor(gy))
    if i0 < 0:
        i0, fx = 0, 0.0
    elif i0 > nx - 2:
        i0, fx = nx - 2, 1.0
    else:
        fx = gx - i0
    if j0 < 0:
        j0, fy = 0, 0.0
    elif j0 > ny - 2:
        j0, fy = ny - 2, 1.0
    else:
        fy = gy - j0
    h00 = grid[j0, i0]
    h10 = grid[j0, i0 + 1]
    h01 = grid[j0 + 1, i0]
    h11 = grid[j0 + 1, i0 + 1]
    return float((1 - fx) * (1 - fy) * h00 + fx * (1 - fy) * h10
                 + (1 - fx) * fy * h01 + fx * fy * h11)


def grid_shape(params: TerrainParams) -> tuple[int, int]:
    nx = int(round(params.extent[0] / params.cell_size)) + 1
    ny = int(round(params.extent[1] / params.cell_size)) + 1
    return ny, nx


def reset_fluidized(params: TerrainParams, seed: int) -> TerrainField:
    """Freshly stirred bed: inclined plane plus seeded surface jitter and
    per-node stiffness multipliers, then the pit (if any) carved out.

    Same seed, same params -> identical field.
    """
    ny, nx = grid_shape(params)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    xs = np.arange(nx) * params.cell_size
    plane = np.tile(xs * math.tan(math.radians(params.incline_deg)), (ny, 1))
    jitter = rng.uniform(-params.jitter_amplitude, params.jitter_amplitude, size=(ny, nx))
    heights = plane + jitter
    j = params.stiffness_jitter
    mult = rng.uniform(1.0 - j, 1.0 + j, size=(ny, nx))
    if params.material.kind == "rigid":
        # hard surface has no loose grains to stir
        heights = plane.copy()
        mult = np.ones((ny, nx))
    if params.pit is not None and params.material.kind == "granular":
        cx, cy = params.pit.center
        ys = np.arange(ny) * params.cell_size
        dx = xs[None, :] - cx
        dy = ys[:, None] - cy
        r = np.sqrt(dx * dx + dy * dy) / params.pit.radius
        bowl = np.where(r < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(r, 1.0))), 0.0)
        heights = heights - params.pit.depth * bowl
    return TerrainField(params=params, heights=heights, stiffness_mult=mult,
                        base_heights=heights.copy())


def contact_force(point_z: float, point_vel: np.ndarray, surface_h: float,
                  area: float, material: MaterialParams,
                  stiffness_mult: float = 1.0) -> tuple[np.ndarray, float]:
    """Force on the body at one contact point, world frame; also returns the
    penetration depth (0 when out of contact). Normal acts along +z only;
    tangential resistance lies in the horizontal plane.
    """
    d = surface_h - point_z
    f = np.zeros(3)
    if d <= 0.0:
        return f, 0.0
    v_pen = -point_vel[2]
    if material.kind == "granular":
        k = material.stiffness * stiffness_mult
        if v_pen >= 0.0:
            fn = area * (k * d + material.damping * v_pen)
        else:
            fn = area * k * d * material.unload_fraction
        mu = material.friction
        v_reg = material.regularization_velocity
        plow = material.plow_strength * math.sqrt(area)
    else:
        plow = 0.0
        fn = material.point_stiffness * d + material.point_damping * v_pen
        if fn < 0.0:
            fn = 0.0
        speed_t = math.hypot(point_vel[0], point_vel[1])
        mu = material.kinetic_friction + (
            material.static_friction - material.kinetic_friction
        ) * math.exp(-speed_t / (3.0 * material.regularization_velocity))
        v_reg = material.regularization_velocity
    f[2] = fn
    vt_x, vt_y = point_vel[0], point_vel[1]
    speed_t = math.hypot(vt_x, vt_y)
    ft_cap = mu * fn + plow * d * d
    if speed_t > 0.0 and ft_cap > 0.0:
        ft = ft_cap * math.tanh(speed_t / v_reg)
        f[0] = -ft * vt_x / speed_t
        f[1] = -ft * vt_y / speed_t
    return f, d


def apply_plasticity(field: TerrainField, contact_nodes: dict[tuple[int, int], float],
                     dt: float) -> list[tuple[int, int]]:
    """Relax each penetrated node toward its deepest contemporaneous contact.

    contact_nodes maps (j, i) -> lowest contact-point z at that node this
    step. Heights move a fraction min(1, plastic_rate*dt) of the gap per call
    and the removed volume is deposited equally on the nearest ring of
    non-penetrated in-bounds neighbors (growing the ring up to radius 6; if no
    target exists the node is left unchanged so volume is conserved). Returns
    the list of nodes whose height changed.
    """
    if field.params.material.kind != "granular" or not contact_nodes:
        return []
    frac = min(1.0, field.params.material.plastic_rate * dt)
    if frac <= 0.0:
        return []
    h = field.heights
    ny, nx = h.shape
    touched: list[tuple[int, int]] = []
    for (j, i), z_low in contact_nodes.items():
        drop = frac * (h[j, i] - z_low)
        if drop <= 0.0:
            continue
        targets: list[tuple[int, int]] = []
        for radius in range(1, 7):
            for dj in range(-radius, radius + 1):
                for di in range(-radius, radius + 1):
                    if max(abs(dj), abs(di)) != radius:
                        continue
                    jj, ii = j + dj, i + di
                    if 0 <= jj < ny and 0 <= ii < nx and (jj, ii) not in contact_nodes:
                        targets.append((jj, ii))
            if targets:
                break
        if not targets:
            continue
        h[j, i] -= drop
        share = drop / len(targets)
        for jj, ii in targets:
            h[jj, ii] += share
            touched.append((jj, ii))
        touched.append((j, i))
    return touched


def relax_avalanche(field: TerrainField, seeds: list[tuple[int, int]] | None = None,
                    max_passes: int = 50) -> int:
    """Move material downhill wherever the local slope exceeds the angle of
    repose, until stable or the pass budget runs out.

    Transfer between a node pair at height difference D over distance L moves
    (D - L*tan(repose))/2, which lands the pair exactly on the limiting slope.
    seeds=None relaxes the whole grid (standalone use); per-step calls pass
    the nodes plasticity just touched. Returns the number of passes used.
    """
    if field.params.material.kind != "granular":
        return 0
    h = field.heights
    ny, nx = h.shape
    cell = field.cell
    tan_r = math.tan(math.radians(field.params.material.repose_deg))
    if seeds is None:
        active = [(j, i) for j in range(ny) for i in range(nx)]
    else:
        active = list(dict.fromkeys(seeds))
    passes = 0
    while active and passes < max_passes:
        passes += 1
        next_active: dict[tuple[int, int], None] = {}
        for j, i in active:
            for dj, di in _NEIGHBORS8:
                jj, ii = j + dj, i + di
                if not (0 <= jj < ny and 0 <= ii < nx):
                    continue
                dist = cell * (math.sqrt(2.0) if dj != 0 and di != 0 else 1.0)
                diff = h[j, i] - h[jj, ii]
                limit = tan_r * dist
                if diff > limit * (1.0 + 1e-9):
                    q = 0.5 * (diff - limit)
                    h[j, i] -= q
                    h[jj, ii] += q
                    next_active[(j, i)] = None
                    next_active[(jj, ii)] = None
                elif -diff > limit * (1.0 + 1e-9):
                    q = 0.5 * (-diff - limit)
                    h[jj, ii] -= q
                    h[j, i] += q
                    next_active[(j, i)] = None
                    next_active[(jj, ii)] = None
        active = list(next_active)
    return passes


def max_slope(field: TerrainField) -> float:
    """Steepest height gradient between neighboring nodes, as tan(angle)."""
    h = field.heights
    cell = field.cell
    worst = 0.0
    for dj, di in ((0, 1), (1, 0), (1, 1), (1, -1)):
        dist = cell * (math.sqrt(2.0) if dj != 0 and di != 0 else 1.0)
        if dj == 0 and di == 1:
            diff = np.abs(h[:, 1:] - h[:, :-1])
        elif dj == 1 and di == 0:
            diff = np.abs(h[1:, :] - h[:-1, :])
        elif dj == 1 and di == 1:
            diff = np.abs(h[1:, 1:] - h[:-1, :-1])
        else:
            diff = np.abs(h[1:, :-1] - h[:-1, 1:])
        if diff.size:
            worst = max(worst, float(diff.max()) / dist)
    return worst


def export_heightfield(field: TerrainField, path: str) -> None:
    """Write the grid as text: a JSON header line, then rows of heights in mm."""
    import json

    ny, nx = field.shape
    header = {
        "cell_m": field.cell,
        "origin": [0.0, 0.0],
        "incline_deg": field.params.incline_deg,
        "nx": nx,
        "ny": ny,
        "units": "mm",
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for j in range(ny):
            fh.write(",".join(f"{v:.6f}" for v in field.heights[j] * 1000.0) + "\n")
