"""Pure-Python stepping engine.

Reference implementation of the fixed-step loop. vibrosand._core is a
compiled mirror of exactly these semantics: same statement order, same
branch structure, scalar arithmetic throughout, so the two backends agree to
float round-off even over impact-rich spans. Keep any change here in
lockstep with _core.pyx.

Step order: telemetry emit (pre-step state) -> rotor speed/phase -> force
assembly at the current body state with the new rotor state -> semi-implicit
Euler (velocity, then position with the new velocity; angular velocity via
Euler's equations with the gyroscopic term, then quaternion update and
renormalization) -> energy tallies -> plastic crater flow and avalanche
relaxation -> clock.
"""

from __future__ import annotations

import math

from .config import GRAVITY

# status codes returned by run()
OK = 0
REACHED_STOP = 1
UNSTABLE_SPEED = 2
NONFINITE_ROTOR = 3
NONFINITE_CONTACT = 4
NONFINITE_WALL = 5

STATUS_NAMES = {
    OK: "ok",
    REACHED_STOP: "reached_stop",
    UNSTABLE_SPEED: "unstable_speed",
    NONFINITE_ROTOR: "nonfinite_rotor_force",
    NONFINITE_CONTACT: "nonfinite_contact_force",
    NONFINITE_WALL: "nonfinite_wall_force",
}

# accumulator slots
ACC_WORK_IN = 0
ACC_FRICTION = 1
ACC_DAMPING = 2
ACC_PLASTIC = 3
ACC_QUAT_DRIFT = 4
ACC_AVALANCHE_OVERFLOW = 5
N_ACC = 6

# neighbor offsets shared by plastic deposit rings and avalanche transfer
NEIGHBORS8 = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))

# relaxation time of the bed agitation state, seconds
TAU_FLUIDIZE = 0.1
CORNER_AREA_FRAC = 0.1

MAX_DEPOSIT_RING = 6


def quat_to_mat(q):
    import numpy as np

    w, x, y, z = float(q[0]), float(q[1]), float(q[2]), float(q[3])
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class PyEngine:
    """Stepping kernel with state in plain numpy arrays; one instance per run."""

    backend_name = "python"

    def __init__(self, spec: dict, heights, stiffness_mult):
        import numpy as np

        self.spec = spec
        self.heights = heights
        self.mult = stiffness_mult
        self.pos = np.zeros(3)
        self.quat = np.array([1.0, 0.0, 0.0, 0.0])
        self.vel = np.zeros(3)
        self.omega = np.zeros(3)
        n_r = spec["n_rotors"]
        self.phase = np.zeros(n_r)
        self.speed = np.zeros(n_r)
        self.step_count = 0
        self.acc = np.zeros(N_ACC)
        self.agitation = 0.0
        # body-frame specific force minus gravity from the previous step;
        # the rotor load-sync coupling reads it one step delayed
        self.sync_ax = 0.0
        self.sync_ay = 0.0
        self.sync_az = 0.0
        self.pose_count = 0
        self.power_count = 0
        self.phase_count = 0

    def time(self) -> float:
        return self.step_count * self.spec["dt"]

    def reset_clock(self) -> None:
        self.step_count = 0
        self.acc[:] = 0.0
        self.pose_count = 0
        self.power_count = 0
        self.phase_count = 0

    def emit_pose(self, buf) -> None:
        row = self.pose_count
        buf[row, 0] = self.time()
        buf[row, 1] = self.pos[0]
        buf[row, 2] = self.pos[1]
        buf[row, 3] = self.pos[2]
        buf[row, 4] = self.quat[0]
        buf[row, 5] = self.quat[1]
        buf[row, 6] = self.quat[2]
        buf[row, 7] = self.quat[3]
        self.pose_count += 1

    def emit_power(self, buf, volts) -> None:
        s = self.spec
        p_total = 0.0
        for r in range(s["n_rotors"]):
            v = float(volts[r])
            cur = (v - s["keb"][r] * self.speed[r]) / s["Rw"][r] + s["I0"][r]
            if cur < 0.0:
                cur = 0.0
            p_total += v * cur
        row = self.power_count
        buf[row, 0] = self.time()
        buf[row, 1] = p_total
        self.power_count += 1

    def emit_phase(self, buf) -> None:
        row = self.phase_count
        buf[row, 0] = self.time()
        buf[row, 1] = self.pos[0]
        buf[row, 2] = self.pos[2]
        for r in range(self.spec["n_rotors"]):
            buf[row, 3 + 2 * r] = self.phase[r]
            buf[row, 4 + 2 * r] = self.speed[r]
        self.phase_count += 1

    def run(self, n_steps: int, signs, volts, record: bool,
            pose_buf, power_buf, phase_buf) -> tuple[int, int]:
        """Advance up to n_steps under constant setpoints; returns
        (status, steps_done)."""
        s = self.spec
        h = self.heights
        mult = self.mult
        dt = s["dt"]
        inv_mass = 1.0 / s["mass"]
        mass_g = s["mass"] * GRAVITY
        Ix, Iy, Iz = (float(s["inertia"][0]), float(s["inertia"][1]),
                      float(s["inertia"][2]))
        n_r = s["n_rotors"]
        n_pts = s["n_pts"]
        pts = s["pts"]
        corners = s["corners"]
        granular = s["mat_kind"] == 0
        area = s["A_pt"]
        # corner points carry a far smaller patch than face nodes: a point
        # load on a granular bed punches through instead of bearing, so a
        # tipped body finds no firm pivot to vault over
        n_face = n_pts - 4
        area_corner = area * CORNER_AREA_FRAC
        k_g, c_g, eps_u = s["k_g"], s["c_g"], s["eps"]
        mu_g, v_reg = s["mu_g"], s["v_reg"]
        v_weak = s["v_weak"]
        # frontal intrusion drag scale per node: plow_strength carries the
        # passive-pressure prefactor, sqrt(area) the width a node stands in for
        plow_face = s["plow"] * math.sqrt(area)
        plow_corner = s["plow"] * math.sqrt(area_corner)
        k_h, c_h = s["k_h"], s["c_h"]
        mu_s, mu_k = s["mu_s"], s["mu_k"]
        cell = s["cell"]
        inv_cell = 1.0 / cell
        ny, nx = h.shape
        pose_period = s["pose_period"]
        power_period = s["power_period"]
        phase_period = s["phase_period"]
        plastic_frac = min(1.0, s["plastic_rate"] * dt) if granular else 0.0
        compact_cap = s["compact_cap"]
        compact_inv = s["compact_inv_dref"]
        compact_span = (1.0 / (compact_cap - 1.0)
                        if compact_cap > 1.0 else 0.0)
        loosen_rate = s["loosen_rate"]
        tan_repose = s["tan_repose"]
        max_passes = s["max_av_passes"]
        walls = s["walls"]
        obstacles = s["obstacles"]
        n_obs = s["n_obstacles"]
        k_wall = s["wall_k"]
        stop_x = s["stop_x"]
        limit2 = s["speed_limit"] * s["speed_limit"]

        px, py, pz = float(self.pos[0]), float(self.pos[1]), float(self.pos[2])
        qw, qx, qy, qz = (float(self.quat[0]), float(self.quat[1]),
                          float(self.quat[2]), float(self.quat[3]))
        vx, vy, vz = float(self.vel[0]), float(self.vel[1]), float(self.vel[2])
        wx, wy, wz = (float(self.omega[0]), float(self.omega[1]),
                      float(self.omega[2]))
        phase = [float(p) for p in self.phase]
        speed = [float(v) for v in self.speed]
        omega_ss = [s["kv"][r] * abs(float(volts[r])) for r in range(n_r)]
        om_noise = s["om_noise"]
        noise_steps = s["noise_steps"]
        noise_blocks = om_noise.shape[0]
        pull_coef = s["pull_coef"]
        spin_n = s["spin_n"]
        bax, bay, baz = self.sync_ax, self.sync_ay, self.sync_az

        acc_work = float(self.acc[ACC_WORK_IN])
        acc_fric = float(self.acc[ACC_FRICTION])
        acc_damp = float(self.acc[ACC_DAMPING])
        acc_plast = float(self.acc[ACC_PLASTIC])
        acc_drift = float(self.acc[ACC_QUAT_DRIFT])
        acc_avover = float(self.acc[ACC_AVALANCHE_OVERFLOW])
        agit = float(self.agitation)

        # per-step scratch for plastic flow
        node_j: list[int] = []
        node_i: list[int] = []
        node_z: list[float] = []

        def sync_state():
            self.pos[0], self.pos[1], self.pos[2] = px, py, pz
            self.quat[0], self.quat[1], self.quat[2], self.quat[3] = qw, qx, qy, qz
            self.vel[0], self.vel[1], self.vel[2] = vx, vy, vz
            self.omega[0], self.omega[1], self.omega[2] = wx, wy, wz
            for r in range(n_r):
                self.phase[r] = phase[r]
                self.speed[r] = speed[r]
            self.acc[ACC_WORK_IN] = acc_work
            self.acc[ACC_FRICTION] = acc_fric
            self.acc[ACC_DAMPING] = acc_damp
            self.acc[ACC_PLASTIC] = acc_plast
            self.acc[ACC_QUAT_DRIFT] = acc_drift
            self.acc[ACC_AVALANCHE_OVERFLOW] = acc_avover
            self.agitation = agit
            self.sync_ax, self.sync_ay, self.sync_az = bax, bay, baz

        status = OK
        steps_done = n_steps
        for istep in range(n_steps):
            t = self.step_count * dt

            if record:
                if (t >= self.pose_count * pose_period - 1e-12
                        or t >= self.power_count * power_period - 1e-12
                        or t >= self.phase_count * phase_period - 1e-12):
                    sync_state()
                    if t >= self.pose_count * pose_period - 1e-12:
                        self.emit_pose(pose_buf)
                    if t >= self.power_count * power_period - 1e-12:
                        self.emit_power(power_buf, volts)
                    if t >= self.phase_count * phase_period - 1e-12:
                        self.emit_phase(phase_buf)

            # rotor first-order lag, then phase advance with the new speed
            f_rot_bx = f_rot_by = f_rot_bz = 0.0
            tau_rot_bx = tau_rot_by = tau_rot_bz = 0.0
            spin_lx = spin_ly = spin_lz = 0.0
            ib = (self.step_count // noise_steps) % noise_blocks
            for r in range(n_r):
                old = speed[r]
                om_t = omega_ss[r] * (1.0 + om_noise[ib, r])
                if om_t < 0.0:
                    om_t = 0.0
                if s["exact_spinup"][r]:
                    speed[r] = om_t + (old - om_t) \
                        * math.exp(-dt / s["tau_r"][r])
                else:
                    speed[r] = old + (om_t - old) * dt / s["tau_r"][r]
                sgn = int(signs[r])
                if sgn != 0:
                    rate = speed[r]
                    if pull_coef[r] > 0.0:
                        # the eccentric is a pendulum on an accelerating
                        # support: load torque m_e*r*(that accel) tangential
                        # to the whirl sags the rate through the motor's
                        # electrical stiffness. both units ride one body, so
                        # equal setpoints pull into phase lock
                        sn0 = math.sin(phase[r])
                        cs0 = math.cos(phase[r])
                        ttx = -sn0 * s["e1s"][r, 0] + sgn * cs0 * s["e2s"][r, 0]
                        tty = -sn0 * s["e1s"][r, 1] + sgn * cs0 * s["e2s"][r, 1]
                        ttz = -sn0 * s["e1s"][r, 2] + sgn * cs0 * s["e2s"][r, 2]
                        rate -= pull_coef[r] * (ttx * bax + tty * bay
                                                + ttz * baz)
                        if rate < 0.0:
                            rate = 0.0
                    # phase tracks the unsigned angle; sgn enters via the force
                    ph = math.fmod(phase[r] + rate * dt, 2.0 * math.pi)
                    if ph < 0.0:
                        ph += 2.0 * math.pi
                    phase[r] = ph
                    spin_lx += sgn * speed[r] * spin_n[r, 0]
                    spin_ly += sgn * speed[r] * spin_n[r, 1]
                    spin_lz += sgn * speed[r] * spin_n[r, 2]
                amp = s["ecc"][r] * speed[r] * speed[r]
                cp = math.cos(phase[r])
                sp = math.sin(phase[r]) * sgn
                fbx = amp * (cp * s["e1s"][r, 0] + sp * s["e2s"][r, 0])
                fby = amp * (cp * s["e1s"][r, 1] + sp * s["e2s"][r, 1])
                fbz = amp * (cp * s["e1s"][r, 2] + sp * s["e2s"][r, 2])
                f_rot_bx += fbx
                f_rot_by += fby
                f_rot_bz += fbz
                mx, my, mz = s["mounts"][r, 0], s["mounts"][r, 1], s["mounts"][r, 2]
                tau_rot_bx += my * fbz - mz * fby
                tau_rot_by += mz * fbx - mx * fbz
                tau_rot_bz += mx * fby - my * fbx
                if s["react"][r] and sgn != 0:
                    rate = (speed[r] - old) / dt
                    scale = sgn * s["ecc"][r] * s["rarm"][r] * rate
                    tau_rot_bx -= scale * s["axes"][r, 0]
                    tau_rot_by -= scale * s["axes"][r, 1]
                    tau_rot_bz -= scale * s["axes"][r, 2]

            # rotation matrix from the unit quaternion
            r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
            r01 = 2.0 * (qx * qy - qw * qz)
            r02 = 2.0 * (qx * qz + qw * qy)
            r10 = 2.0 * (qx * qy + qw * qz)
            r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
            r12 = 2.0 * (qy * qz - qw * qx)
            r20 = 2.0 * (qx * qz - qw * qy)
            r21 = 2.0 * (qy * qz + qw * qx)
            r22 = 1.0 - 2.0 * (qx * qx + qy * qy)

            f_rot_wx = r00 * f_rot_bx + r01 * f_rot_by + r02 * f_rot_bz
            f_rot_wy = r10 * f_rot_bx + r11 * f_rot_by + r12 * f_rot_bz
            f_rot_wz = r20 * f_rot_bx + r21 * f_rot_by + r22 * f_rot_bz
            if not (math.isfinite(f_rot_wx) and math.isfinite(f_rot_wy)
                    and math.isfinite(f_rot_wz)):
                status = NONFINITE_ROTOR
                steps_done = istep
                break

            # world angular velocity for point velocities
            owx = r00 * wx + r01 * wy + r02 * wz
            owy = r10 * wx + r11 * wy + r12 * wz
            owz = r20 * wx + r21 * wy + r22 * wz

            f_c_x = f_c_y = f_c_z = 0.0
            tau_c_x = tau_c_y = tau_c_z = 0.0
            node_j.clear()
            node_i.clear()
            node_z.clear()
            # pounded grains shear more easily: traction falls off with the
            # bed agitation level, tracked below as the load-weighted impact
            # speed so that it stays decoupled from the horizontal slip cycle.
            # a shaken bed also stops holding its slope, so the same factor
            # softens the repose limit and lets crater rims slump back under
            # a digging body instead of entombing it
            if v_weak > 0.0:
                rel = agit / v_weak
                soften = 1.0 / (1.0 + rel * rel)
                mu_g_step = mu_g * soften
                tan_step = tan_repose * soften
            else:
                mu_g_step = mu_g
                tan_step = tan_repose
            sum_fn = 0.0
            sum_fnimp = 0.0
            for p in range(n_pts):
                bx = pts[p, 0]
                by = pts[p, 1]
                bz = pts[p, 2]
                rwx = r00 * bx + r01 * by + r02 * bz
                rwy = r10 * bx + r11 * by + r12 * bz
                rwz = r20 * bx + r21 * by + r22 * bz
                X = px + rwx
                Y = py + rwy
                Z = pz + rwz
                # bilinear surface height with edge extension
                gx = X * inv_cell
                gy = Y * inv_cell
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
                h00 = h[j0, i0]
                h10 = h[j0, i0 + 1]
                h01 = h[j0 + 1, i0]
                h11 = h[j0 + 1, i0 + 1]
                h_loc = ((1.0 - fx) * (1.0 - fy) * h00 + fx * (1.0 - fy) * h10
                         + (1.0 - fx) * fy * h01 + fx * fy * h11)
                d = h_loc - Z
                if d <= 0.0:
                    continue
                vptx = vx + owy * rwz - owz * rwy
                vpty = vy + owz * rwx - owx * rwz
                vptz = vz + owx * rwy - owy * rwx
                v_pen = -vptz
                fp = 0.0
                if granular:
                    if p < n_face:
                        a_p = area
                        plow_p = plow_face
                    else:
                        a_p = area_corner
                        plow_p = plow_corner
                    i_n = int(math.floor(gx + 0.5))
                    if i_n < 0:
                        i_n = 0
                    elif i_n > nx - 1:
                        i_n = nx - 1
                    j_n = int(math.floor(gy + 0.5))
                    if j_n < 0:
                        j_n = 0
                    elif j_n > ny - 1:
                        j_n = ny - 1
                    k_loc = k_g * mult[j_n, i_n]
                    if v_pen >= 0.0:
                        fn = a_p * (k_loc * d + c_g * v_pen)
                        acc_damp += a_p * c_g * v_pen * v_pen * dt
                        acc_plast += (1.0 - eps_u) * a_p * k_loc * d * v_pen * dt
                    else:
                        fn = a_p * k_loc * d * eps_u
                    mu = mu_g_step
                    fp = plow_p * d * d
                    sum_fn += fn
                    if v_pen > 0.0:
                        sum_fnimp += fn * v_pen
                    if plastic_frac > 0.0:
                        found = -1
                        for q in range(len(node_j)):
                            if node_j[q] == j_n and node_i[q] == i_n:
                                found = q
                                break
                        if found < 0:
                            node_j.append(j_n)
                            node_i.append(i_n)
                            node_z.append(Z)
                        elif Z < node_z[found]:
                            node_z[found] = Z
                else:
                    raw = k_h * d + c_h * v_pen
                    if raw > 0.0:
                        fn = raw
                        acc_damp += c_h * v_pen * v_pen * dt
                    else:
                        fn = 0.0
                        if v_pen < 0.0:
                            # spring unloads with no force path: restitution loss
                            acc_plast += k_h * d * (-v_pen) * dt
                    # sqrt form, not math.hypot: CPython's hypot is not the
                    # libm one, and the backends must agree bit for bit
                    st0 = math.sqrt(vptx * vptx + vpty * vpty)
                    mu = mu_k + (mu_s - mu_k) * math.exp(-st0 / (3.0 * v_reg))
                st = math.sqrt(vptx * vptx + vpty * vpty)
                fx_t = fy_t = 0.0
                # plowing joins friction in the shear channel: both oppose
                # slip, but the plow term grows with depth, not load
                ft_c = mu * fn + fp
                if st > 0.0 and ft_c > 0.0:
                    ft = ft_c * math.tanh(st / v_reg)
                    fx_t = -ft * vptx / st
                    fy_t = -ft * vpty / st
                    acc_fric += ft * st * dt
                f_c_x += fx_t
                f_c_y += fy_t
                f_c_z += fn
                tau_c_x += rwy * fn - rwz * fy_t
                tau_c_y += rwz * fx_t - rwx * fn
                tau_c_z += rwx * fy_t - rwy * fx_t
            if not (math.isfinite(f_c_x) and math.isfinite(f_c_y)
                    and math.isfinite(f_c_z)):
                status = NONFINITE_CONTACT
                steps_done = istep
                break
            if granular and v_weak > 0.0:
                s_imp = sum_fnimp / sum_fn if sum_fn > 0.0 else 0.0
                agit += (dt / TAU_FLUIDIZE) * (s_imp - agit)

            # box walls, optional corridor, cylindrical obstacles: frictionless
            # penalty springs acting on the body corners
            f_w_x = f_w_y = f_w_z = 0.0
            tau_w_x = tau_w_y = tau_w_z = 0.0
            for ci in range(8):
                bx = corners[ci, 0]
                by = corners[ci, 1]
                bz = corners[ci, 2]
                cwx = r00 * bx + r01 * by + r02 * bz
                cwy = r10 * bx + r11 * by + r12 * bz
                cwz = r20 * bx + r21 * by + r22 * bz
                CX = px + cwx
                CY = py + cwy
                for wa in range(len(walls)):
                    axis = walls[wa][0]
                    wall_pos = walls[wa][1]
                    direction = walls[wa][2]
                    coord = CX if axis == 0 else CY
                    pen = (coord - wall_pos) * -direction
                    if pen > 0.0:
                        fmag = direction * k_wall * pen
                        if axis == 0:
                            f_w_x += fmag
                            tau_w_y += cwz * fmag
                            tau_w_z += -cwy * fmag
                        else:
                            f_w_y += fmag
                            tau_w_x += -cwz * fmag
                            tau_w_z += cwx * fmag
                for ob in range(n_obs):
                    dx_o = CX - obstacles[ob, 0]
                    dy_o = CY - obstacles[ob, 1]
                    dist = math.sqrt(dx_o * dx_o + dy_o * dy_o)
                    if 1e-12 < dist < obstacles[ob, 2]:
                        push = k_wall * (obstacles[ob, 2] - dist)
                        fox = push * dx_o / dist
                        foy = push * dy_o / dist
                        f_w_x += fox
                        f_w_y += foy
                        tau_w_x += -cwz * foy
                        tau_w_y += cwz * fox
                        tau_w_z += cwx * foy - cwy * fox
            if not (math.isfinite(f_w_x) and math.isfinite(f_w_y)):
                status = NONFINITE_WALL
                steps_done = istep
                break

            ftx = f_rot_wx + f_c_x + f_w_x
            fty = f_rot_wy + f_c_y + f_w_y
            ftz = f_rot_wz + f_c_z + f_w_z - mass_g

            # semi-implicit Euler: velocity first, position with the new velocity
            ax = ftx * inv_mass
            ay = fty * inv_mass
            az = ftz * inv_mass
            nvx = vx + ax * dt
            nvy = vy + ay * dt
            nvz = vz + az * dt
            vmx = 0.5 * (vx + nvx)
            vmy = 0.5 * (vy + nvy)
            vmz = 0.5 * (vz + nvz)
            vx, vy, vz = nvx, nvy, nvz
            px += vx * dt
            py += vy * dt
            pz += vz * dt

            # body-frame support acceleration for next step's rotor coupling;
            # gravity drops out because a free-falling eccentric feels no load
            ngz = az + GRAVITY
            bax = r00 * ax + r10 * ay + r20 * ngz
            bay = r01 * ax + r11 * ay + r21 * ngz
            baz = r02 * ax + r12 * ay + r22 * ngz

            # torques to body frame, Euler's equations with the gyroscopic term
            tcx = tau_c_x + tau_w_x
            tcy = tau_c_y + tau_w_y
            tcz = tau_c_z + tau_w_z
            tbx = tau_rot_bx + r00 * tcx + r10 * tcy + r20 * tcz
            tby = tau_rot_by + r01 * tcx + r11 * tcy + r21 * tcz
            tbz = tau_rot_bz + r02 * tcx + r12 * tcy + r22 * tcz
            # spinning eccentrics add their angular momentum to the gyro
            # term; for axis-aligned rotors this cross-couples roll and yaw
            gyx = wy * (Iz * wz + spin_lz) - wz * (Iy * wy + spin_ly)
            gyy = wz * (Ix * wx + spin_lx) - wx * (Iz * wz + spin_lz)
            gyz = wx * (Iy * wy + spin_ly) - wy * (Ix * wx + spin_lx)
            nwx = wx + dt * (tbx - gyx) / Ix
            nwy = wy + dt * (tby - gyy) / Iy
            nwz = wz + dt * (tbz - gyz) / Iz
            wmx = 0.5 * (wx + nwx)
            wmy = 0.5 * (wy + nwy)
            wmz = 0.5 * (wz + nwz)
            wx, wy, wz = nwx, nwy, nwz

            dqw = 0.5 * dt * (-qx * wx - qy * wy - qz * wz)
            dqx = 0.5 * dt * (qw * wx + qy * wz - qz * wy)
            dqy = 0.5 * dt * (qw * wy + qz * wx - qx * wz)
            dqz = 0.5 * dt * (qw * wz + qx * wy - qy * wx)
            qw += dqw
            qx += dqx
            qy += dqy
            qz += dqz
            norm = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            drift = abs(norm - 1.0)
            if drift > acc_drift:
                acc_drift = drift
            inv_norm = 1.0 / norm
            qw *= inv_norm
            qx *= inv_norm
            qy *= inv_norm
            qz *= inv_norm

            # rotor input work at midpoint velocities; dissipation tallies were
            # accumulated force-side during contact
            acc_work += (f_rot_wx * vmx + f_rot_wy * vmy + f_rot_wz * vmz
                         + tau_rot_bx * wmx + tau_rot_by * wmy
                         + tau_rot_bz * wmz) * dt

            if plastic_frac > 0.0 and node_j:
                if loosen_rate > 0.0 and v_weak > 0.0:
                    # vibration undoes packing: cells under a hard-pounded
                    # footprint drift back toward loose, quadratic in the
                    # impact speed so over-driving re-fluidizes the seat
                    rel = agit / v_weak
                    lf = loosen_rate * dt * rel * rel
                    if lf > 1.0:
                        lf = 1.0
                    for q in range(len(node_j)):
                        m0 = mult[node_j[q], node_i[q]]
                        if m0 > 1.0:
                            mult[node_j[q], node_i[q]] = m0 + (1.0 - m0) * lf
                overflow = _plastic_and_avalanche(
                    h, nx, ny, node_j, node_i, node_z, plastic_frac, cell,
                    tan_step, max_passes, mult, compact_cap, compact_inv,
                    compact_span)
                if overflow:
                    acc_avover += 1.0

            self.step_count += 1

            v2 = vx * vx + vy * vy + vz * vz
            if not math.isfinite(v2) or v2 > limit2:
                status = UNSTABLE_SPEED
                steps_done = istep + 1
                break
            if px >= stop_x:
                status = REACHED_STOP
                steps_done = istep + 1
                break

        sync_state()
        return status, steps_done


def _plastic_and_avalanche(h, nx, ny, node_j, node_i, node_z, frac, cell,
                           tan_repose, max_passes, mult, compact_cap,
                           compact_inv, compact_span) -> bool:
    """Crater flow for this step's contact nodes, then local avalanche
    relaxation seeded from every node whose height changed. Volume is moved,
    never created: each lowered amount is deposited on the nearest ring of
    non-contact nodes, and avalanche transfers are pairwise. Returns True
    when the pass budget ran out before the slopes settled."""
    n_nodes = len(node_j)
    touched_j: list[int] = []
    touched_i: list[int] = []
    for q in range(n_nodes):
        j = node_j[q]
        i = node_i[q]
        drop = frac * (h[j, i] - node_z[q])
        if drop <= 0.0:
            continue
        if compact_inv > 0.0:
            # tamped grains densify: each flush attempt spends part of the
            # cell's densification budget (stiffening it toward the cap) and
            # the dense fraction refuses to move, so a cell can only ever be
            # dug about compaction_depth before it behaves rigid
            m0 = mult[j, i]
            loose = (compact_cap - m0) * compact_span
            if loose > 1.0:
                loose = 1.0
            elif loose < 0.0:
                loose = 0.0
            gain = drop * compact_inv
            if gain > 1.0:
                gain = 1.0
            mult[j, i] = m0 + (compact_cap - m0) * gain
            drop *= loose
            if drop <= 0.0:
                continue
        # nearest ring of in-bounds nodes not under the footprint this step
        targets_j: list[int] = []
        targets_i: list[int] = []
        for radius in range(1, MAX_DEPOSIT_RING + 1):
            for dj in range(-radius, radius + 1):
                for di in range(-radius, radius + 1):
                    if (dj if dj >= 0 else -dj) != radius \
                            and (di if di >= 0 else -di) != radius:
                        continue
                    jj = j + dj
                    ii = i + di
                    if jj < 0 or jj >= ny or ii < 0 or ii >= nx:
                        continue
                    contact = False
                    for q2 in range(n_nodes):
                        if node_j[q2] == jj and node_i[q2] == ii:
                            contact = True
                            break
                    if not contact:
                        targets_j.append(jj)
                        targets_i.append(ii)
            if targets_j:
                break
        if not targets_j:
            continue
        h[j, i] -= drop
        share = drop / len(targets_j)
        for q2 in range(len(targets_j)):
            h[targets_j[q2], targets_i[q2]] += share
            touched_j.append(targets_j[q2])
            touched_i.append(targets_i[q2])
        touched_j.append(j)
        touched_i.append(i)

    if not touched_j:
        return False

    # avalanche: generation passes over the active set, 8-neighbor transfers
    # that land each offending pair exactly on the repose slope
    sqrt2 = math.sqrt(2.0)
    active_j = []
    active_i = []
    seen = set()
    for q in range(len(touched_j)):
        key = (touched_j[q], touched_i[q])
        if key not in seen:
            seen.add(key)
            active_j.append(touched_j[q])
            active_i.append(touched_i[q])
    passes = 0
    while active_j and passes < max_passes:
        passes += 1
        nxt_j: list[int] = []
        nxt_i: list[int] = []
        nxt_seen = set()
        for q in range(len(active_j)):
            j = active_j[q]
            i = active_i[q]
            for dj, di in NEIGHBORS8:
                jj = j + dj
                ii = i + di
                if jj < 0 or jj >= ny or ii < 0 or ii >= nx:
                    continue
                dist = cell * (sqrt2 if dj != 0 and di != 0 else 1.0)
                limit = tan_repose * dist
                diff = h[j, i] - h[jj, ii]
                if diff > limit * (1.0 + 1e-9):
                    qmove = 0.5 * (diff - limit)
                    h[j, i] -= qmove
                    h[jj, ii] += qmove
                elif -diff > limit * (1.0 + 1e-9):
                    qmove = 0.5 * (-diff - limit)
                    h[jj, ii] -= qmove
                    h[j, i] += qmove
                else:
                    continue
                for key in ((j, i), (jj, ii)):
                    if key not in nxt_seen:
                        nxt_seen.add(key)
                        nxt_j.append(key[0])
                        nxt_i.append(key[1])
        active_j = nxt_j
        active_i = nxt_i
    return bool(active_j)
