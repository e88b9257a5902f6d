# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernel.

Statement-for-statement mirror of vibrosand._engine_py.PyEngine.run(); see
that file for the semantics commentary. Any change must land in both files
together, in the same operation order, or the cross-backend agreement test
will catch the drift.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport (cos, exp, fabs, floor, fmod, isfinite, sin, sqrt,
                        tanh)

cnp.import_array()

ctypedef cnp.int64_t i64

cdef double TWO_PI = 6.283185307179586

# relaxation time of the bed agitation state, seconds
cdef double TAU_FLUIDIZE = 0.1
cdef double CORNER_AREA_FRAC = 0.1

# status codes, matching _engine_py
OK = 0
REACHED_STOP = 1
UNSTABLE_SPEED = 2
NONFINITE_ROTOR = 3
NONFINITE_CONTACT = 4
NONFINITE_WALL = 5

ACC_WORK_IN = 0
ACC_FRICTION = 1
ACC_DAMPING = 2
ACC_PLASTIC = 3
ACC_QUAT_DRIFT = 4
ACC_AVALANCHE_OVERFLOW = 5
N_ACC = 6

cdef int MAX_DEPOSIT_RING = 6

# order must match _engine_py.NEIGHBORS8
cdef int[8] N8_DJ = [1, -1, 0, 0, 1, 1, -1, -1]
cdef int[8] N8_DI = [0, 0, 1, -1, 1, -1, 1, -1]


cdef class CoreEngine:
    """Stepping kernel with state mirrored into numpy arrays for the driver."""

    cdef public object spec, heights, mult
    cdef public object pos, quat, vel, omega, phase, speed, acc
    cdef public long step_count, pose_count, power_count, phase_count
    cdef public double agitation
    cdef public double sync_ax, sync_ay, sync_az
    cdef double dt, mass, inv_mass, mass_g, Ix, Iy, Iz
    cdef double area, k_g, c_g, eps_u, mu_g, v_reg, v_weak, plow, k_h, c_h, mu_s, mu_k
    cdef double cell, inv_cell, k_wall, stop_x, limit2
    cdef double plastic_frac, tan_repose
    cdef double compact_cap, compact_inv, loosen_rate
    cdef long n_r, n_pts, n_obs, n_walls, max_passes
    cdef bint granular
    cdef double pose_period, power_period, phase_period
    cdef double[:, ::1] h_view, mult_view
    cdef double[:, ::1] pts, corners, mounts, e1s, e2s, axes, obstacles
    cdef double[::1] ecc, kv, tau_r, rarm, keb, Rw, I0
    cdef double[::1] pull_coef
    cdef double[:, ::1] spin_n
    cdef i64[::1] exact_spinup, react, wall_axis
    cdef double[:, ::1] om_noise
    cdef long noise_steps, noise_blocks
    cdef double[::1] wall_pos, wall_dir
    cdef long ny, nx
    # scratch for plastic flow / avalanche, sized once at construction
    cdef i64[::1] node_j, node_i
    cdef double[::1] node_z
    cdef i64[::1] touched_j, touched_i, active_j, active_i, next_j, next_i
    cdef i64[::1] contact_stamp, av_stamp
    cdef i64 stamp_marker

    @property
    def backend_name(self):
        return "compiled"

    def __init__(self, spec, heights, stiffness_mult):
        self.spec = spec
        self.heights = heights
        self.mult = stiffness_mult
        self.h_view = heights
        self.mult_view = stiffness_mult
        self.pos = np.zeros(3)
        self.quat = np.array([1.0, 0.0, 0.0, 0.0])
        self.vel = np.zeros(3)
        self.omega = np.zeros(3)
        n_r = spec["n_rotors"]
        self.phase = np.zeros(n_r)
        self.speed = np.zeros(n_r)
        self.acc = np.zeros(N_ACC)
        self.step_count = 0
        self.agitation = 0.0
        # body-frame specific force minus gravity from the previous step;
        # the rotor load-sync coupling reads it one step delayed
        self.sync_ax = 0.0
        self.sync_ay = 0.0
        self.sync_az = 0.0
        self.pose_count = 0
        self.power_count = 0
        self.phase_count = 0

        self.dt = spec["dt"]
        self.mass = spec["mass"]
        self.inv_mass = 1.0 / spec["mass"]
        self.mass_g = spec["mass"] * 9.81
        inertia = np.asarray(spec["inertia"], dtype=np.float64)
        self.Ix = inertia[0]
        self.Iy = inertia[1]
        self.Iz = inertia[2]
        self.area = spec["A_pt"]
        self.k_g = spec["k_g"]
        self.c_g = spec["c_g"]
        self.eps_u = spec["eps"]
        self.mu_g = spec["mu_g"]
        self.v_reg = spec["v_reg"]
        self.v_weak = spec["v_weak"]
        self.plow = spec["plow"]
        self.k_h = spec["k_h"]
        self.c_h = spec["c_h"]
        self.mu_s = spec["mu_s"]
        self.mu_k = spec["mu_k"]
        self.cell = spec["cell"]
        self.inv_cell = 1.0 / spec["cell"]
        self.k_wall = spec["wall_k"]
        self.stop_x = spec["stop_x"]
        self.limit2 = spec["speed_limit"] * spec["speed_limit"]
        self.granular = spec["mat_kind"] == 0
        if self.granular:
            self.plastic_frac = min(1.0, spec["plastic_rate"] * spec["dt"])
        else:
            self.plastic_frac = 0.0
        self.tan_repose = spec["tan_repose"]
        self.compact_cap = spec["compact_cap"]
        self.compact_inv = spec["compact_inv_dref"]
        self.loosen_rate = spec["loosen_rate"]
        self.max_passes = spec["max_av_passes"]
        self.n_r = spec["n_rotors"]
        self.n_pts = spec["n_pts"]
        self.n_obs = spec["n_obstacles"]
        self.pose_period = spec["pose_period"]
        self.power_period = spec["power_period"]
        self.phase_period = spec["phase_period"]

        self.pts = np.ascontiguousarray(spec["pts"], dtype=np.float64)
        self.corners = np.ascontiguousarray(spec["corners"], dtype=np.float64)
        self.mounts = np.ascontiguousarray(spec["mounts"], dtype=np.float64)
        self.e1s = np.ascontiguousarray(spec["e1s"], dtype=np.float64)
        self.e2s = np.ascontiguousarray(spec["e2s"], dtype=np.float64)
        self.axes = np.ascontiguousarray(spec["axes"], dtype=np.float64)
        self.obstacles = np.ascontiguousarray(spec["obstacles"], dtype=np.float64)
        self.ecc = np.ascontiguousarray(spec["ecc"], dtype=np.float64)
        self.pull_coef = np.ascontiguousarray(spec["pull_coef"], dtype=np.float64)
        self.spin_n = np.ascontiguousarray(spec["spin_n"], dtype=np.float64)
        self.kv = np.ascontiguousarray(spec["kv"], dtype=np.float64)
        self.tau_r = np.ascontiguousarray(spec["tau_r"], dtype=np.float64)
        self.rarm = np.ascontiguousarray(spec["rarm"], dtype=np.float64)
        self.keb = np.ascontiguousarray(spec["keb"], dtype=np.float64)
        self.Rw = np.ascontiguousarray(spec["Rw"], dtype=np.float64)
        self.I0 = np.ascontiguousarray(spec["I0"], dtype=np.float64)
        self.exact_spinup = np.ascontiguousarray(spec["exact_spinup"], dtype=np.int64)
        self.om_noise = np.ascontiguousarray(spec["om_noise"], dtype=np.float64)
        self.noise_steps = spec["noise_steps"]
        self.noise_blocks = self.om_noise.shape[0]
        self.react = np.ascontiguousarray(spec["react"], dtype=np.int64)

        walls = spec["walls"]
        self.n_walls = len(walls)
        self.wall_axis = np.array([w[0] for w in walls], dtype=np.int64)
        self.wall_pos = np.array([w[1] for w in walls], dtype=np.float64)
        self.wall_dir = np.array([w[2] for w in walls], dtype=np.float64)

        cdef long ny = heights.shape[0]
        cdef long nx = heights.shape[1]
        self.ny = ny
        self.nx = nx
        cdef long cap = self.n_pts + 4
        self.node_j = np.zeros(cap, dtype=np.int64)
        self.node_i = np.zeros(cap, dtype=np.int64)
        self.node_z = np.zeros(cap, dtype=np.float64)
        self.touched_j = np.zeros(cap * 50, dtype=np.int64)
        self.touched_i = np.zeros(cap * 50, dtype=np.int64)
        cdef long gcap = ny * nx
        self.active_j = np.zeros(gcap, dtype=np.int64)
        self.active_i = np.zeros(gcap, dtype=np.int64)
        self.next_j = np.zeros(gcap, dtype=np.int64)
        self.next_i = np.zeros(gcap, dtype=np.int64)
        self.contact_stamp = np.zeros(gcap, dtype=np.int64)
        self.av_stamp = np.zeros(gcap, dtype=np.int64)
        self.stamp_marker = 0

    def time(self):
        return self.step_count * self.dt

    def reset_clock(self):
        self.step_count = 0
        self.acc[:] = 0.0
        self.pose_count = 0
        self.power_count = 0
        self.phase_count = 0

    def emit_pose(self, buf):
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

    def emit_power(self, buf, volts):
        cdef double p_total = 0.0
        cdef double v, cur
        cdef long r
        for r in range(self.n_r):
            v = float(volts[r])
            cur = (v - self.keb[r] * self.speed[r]) / self.Rw[r] + self.I0[r]
            if cur < 0.0:
                cur = 0.0
            p_total += v * cur
        row = self.power_count
        buf[row, 0] = self.time()
        buf[row, 1] = p_total
        self.power_count += 1

    def emit_phase(self, buf):
        cdef long r
        row = self.phase_count
        buf[row, 0] = self.time()
        buf[row, 1] = self.pos[0]
        buf[row, 2] = self.pos[2]
        for r in range(self.n_r):
            buf[row, 3 + 2 * r] = self.phase[r]
            buf[row, 4 + 2 * r] = self.speed[r]
        self.phase_count += 1

    def run(self, n_steps, signs_in, volts_in, record,
            pose_buf, power_buf, phase_buf):
        """Advance up to n_steps under constant setpoints; returns
        (status, steps_done)."""
        cdef long nst = n_steps
        cdef bint do_record = bool(record)
        cdef i64[::1] signs = np.ascontiguousarray(signs_in, dtype=np.int64)
        cdef double[::1] volts = np.ascontiguousarray(volts_in, dtype=np.float64)
        cdef double[:, ::1] h = self.h_view
        cdef double[:, ::1] mult = self.mult_view
        cdef double dt = self.dt
        cdef double inv_mass = self.inv_mass
        cdef double mass_g = self.mass_g
        cdef double Ix = self.Ix, Iy = self.Iy, Iz = self.Iz
        cdef long n_r = self.n_r, n_pts = self.n_pts, n_obs = self.n_obs
        cdef bint granular = self.granular
        cdef double area = self.area
        cdef double k_g = self.k_g, c_g = self.c_g, eps_u = self.eps_u
        cdef double mu_g = self.mu_g, v_reg = self.v_reg, v_weak = self.v_weak
        cdef long n_face = n_pts - 4
        cdef double area_corner = area * CORNER_AREA_FRAC
        cdef double plow_face = self.plow * sqrt(area)
        cdef double plow_corner = self.plow * sqrt(area_corner)
        cdef double k_h = self.k_h, c_h = self.c_h
        cdef double mu_s = self.mu_s, mu_k = self.mu_k
        cdef double cell = self.cell, inv_cell = self.inv_cell
        cdef long ny = self.ny, nx = self.nx
        cdef double pose_period = self.pose_period
        cdef double power_period = self.power_period
        cdef double phase_period = self.phase_period
        cdef double plastic_frac = self.plastic_frac
        cdef double compact_cap = self.compact_cap
        cdef double compact_inv = self.compact_inv
        cdef double compact_span = (1.0 / (compact_cap - 1.0)
                                    if compact_cap > 1.0 else 0.0)
        cdef double loosen_rate = self.loosen_rate
        cdef double lf
        cdef double tan_repose = self.tan_repose
        cdef long max_passes = self.max_passes
        cdef long n_walls = self.n_walls
        cdef double k_wall = self.k_wall
        cdef double stop_x = self.stop_x
        cdef double limit2 = self.limit2

        cdef double px = self.pos[0], py = self.pos[1], pz = self.pos[2]
        cdef double qw = self.quat[0], qx = self.quat[1]
        cdef double qy = self.quat[2], qz = self.quat[3]
        cdef double vx = self.vel[0], vy = self.vel[1], vz = self.vel[2]
        cdef double wx = self.omega[0], wy = self.omega[1], wz = self.omega[2]

        # phase/speed memoryviews alias the attribute arrays, so emissions
        # always see the live values
        cdef double[::1] phase = self.phase
        cdef double[::1] speed = self.speed
        cdef double[::1] omega_ss = np.empty(n_r, dtype=np.float64)
        cdef long r
        for r in range(n_r):
            omega_ss[r] = self.kv[r] * fabs(volts[r])
        cdef double[:, ::1] om_noise = self.om_noise
        cdef long noise_steps = self.noise_steps
        cdef long noise_blocks = self.noise_blocks
        cdef long ib
        cdef double om_t

        cdef double acc_work = self.acc[ACC_WORK_IN]
        cdef double acc_fric = self.acc[ACC_FRICTION]
        cdef double acc_damp = self.acc[ACC_DAMPING]
        cdef double acc_plast = self.acc[ACC_PLASTIC]
        cdef double acc_drift = self.acc[ACC_QUAT_DRIFT]
        cdef double acc_avover = self.acc[ACC_AVALANCHE_OVERFLOW]
        cdef double agit = self.agitation

        cdef int status = OK
        cdef long steps_done = nst

        cdef long istep, p, q, q2, ci, wa, ob, sgn
        cdef long n_nodes, n_touched, n_active, n_next, n_targets
        cdef long i0, j0, i_n, j_n, i, j, jj, ii, radius, passes
        cdef long dj, di, nb
        cdef double t, old, ph, amp, cp, sp, fbx, fby, fbz, mx, my, mz
        cdef double rate, scale
        cdef double sn0, cs0, ttx, tty, ttz, ngz
        cdef double spin_lx, spin_ly, spin_lz
        cdef double bax = self.sync_ax
        cdef double bay = self.sync_ay
        cdef double baz = self.sync_az
        cdef double f_rot_bx, f_rot_by, f_rot_bz
        cdef double tau_rot_bx, tau_rot_by, tau_rot_bz
        cdef double r00, r01, r02, r10, r11, r12, r20, r21, r22
        cdef double f_rot_wx, f_rot_wy, f_rot_wz, owx, owy, owz
        cdef double f_c_x, f_c_y, f_c_z, tau_c_x, tau_c_y, tau_c_z
        cdef double bx, by, bz, rwx, rwy, rwz, X, Y, Z, gx, gy, fx, fy
        cdef double h00, h10, h01, h11, h_loc, d, vptx, vpty, vptz, v_pen
        cdef double k_loc, fn, mu, raw, st0, st, ft, fx_t, fy_t
        cdef double f_w_x, f_w_y, f_w_z, tau_w_x, tau_w_y, tau_w_z
        cdef double cwx, cwy, cwz, CX, CY, coord, pen, fmag
        cdef double dx_o, dy_o, dist, push, fox, foy
        cdef double ftx, fty, ftz, ax, ay, az, nvx, nvy, nvz
        cdef double vmx, vmy, vmz, tcx, tcy, tcz, tbx, tby, tbz
        cdef double gyx, gyy, gyz, nwx, nwy, nwz, wmx, wmy, wmz
        cdef double dqw, dqx, dqy, dqz, norm, drift, inv_norm, v2
        cdef double drop, share, qmove, diff, limit, dist_n, m0, gain, loose
        cdef double mu_g_step, rel, soften, tan_step, s_imp, sum_fn, sum_fnimp
        cdef double fp, ft_c, a_p, plow_p
        cdef double sqrt2 = sqrt(2.0)
        cdef bint found
        cdef i64 marker

        for istep in range(nst):
            t = self.step_count * dt

            if do_record:
                if (t >= self.pose_count * pose_period - 1e-12
                        or t >= self.power_count * power_period - 1e-12
                        or t >= self.phase_count * phase_period - 1e-12):
                    self.pos[0] = px
                    self.pos[1] = py
                    self.pos[2] = pz
                    self.quat[0] = qw
                    self.quat[1] = qx
                    self.quat[2] = qy
                    self.quat[3] = qz
                    self.vel[0] = vx
                    self.vel[1] = vy
                    self.vel[2] = vz
                    self.omega[0] = wx
                    self.omega[1] = wy
                    self.omega[2] = wz
                    self.agitation = agit
                    if t >= self.pose_count * pose_period - 1e-12:
                        self.emit_pose(pose_buf)
                    if t >= self.power_count * power_period - 1e-12:
                        self.emit_power(power_buf, volts_in)
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
                if self.exact_spinup[r]:
                    speed[r] = om_t + (old - om_t) \
                        * exp(-dt / self.tau_r[r])
                else:
                    speed[r] = old + (om_t - old) * dt / self.tau_r[r]
                sgn = signs[r]
                if sgn != 0:
                    rate = speed[r]
                    if self.pull_coef[r] > 0.0:
                        # the eccentric is a pendulum on an accelerating
                        # support: load torque m_e*r*(that accel) tangential
                        # to the whirl sags the rate through the motor's
                        # electrical stiffness. both units ride one body, so
                        # equal setpoints pull into phase lock
                        sn0 = sin(phase[r])
                        cs0 = cos(phase[r])
                        ttx = -sn0 * self.e1s[r, 0] + sgn * cs0 * self.e2s[r, 0]
                        tty = -sn0 * self.e1s[r, 1] + sgn * cs0 * self.e2s[r, 1]
                        ttz = -sn0 * self.e1s[r, 2] + sgn * cs0 * self.e2s[r, 2]
                        rate -= self.pull_coef[r] * (ttx * bax + tty * bay
                                                     + ttz * baz)
                        if rate < 0.0:
                            rate = 0.0
                    # phase tracks the unsigned angle; sgn enters via the force
                    ph = fmod(phase[r] + rate * dt, TWO_PI)
                    if ph < 0.0:
                        ph += TWO_PI
                    phase[r] = ph
                    spin_lx += sgn * speed[r] * self.spin_n[r, 0]
                    spin_ly += sgn * speed[r] * self.spin_n[r, 1]
                    spin_lz += sgn * speed[r] * self.spin_n[r, 2]
                amp = self.ecc[r] * speed[r] * speed[r]
                cp = cos(phase[r])
                sp = sin(phase[r]) * sgn
                fbx = amp * (cp * self.e1s[r, 0] + sp * self.e2s[r, 0])
                fby = amp * (cp * self.e1s[r, 1] + sp * self.e2s[r, 1])
                fbz = amp * (cp * self.e1s[r, 2] + sp * self.e2s[r, 2])
                f_rot_bx += fbx
                f_rot_by += fby
                f_rot_bz += fbz
                mx = self.mounts[r, 0]
                my = self.mounts[r, 1]
                mz = self.mounts[r, 2]
                tau_rot_bx += my * fbz - mz * fby
                tau_rot_by += mz * fbx - mx * fbz
                tau_rot_bz += mx * fby - my * fbx
                if self.react[r] and sgn != 0:
                    rate = (speed[r] - old) / dt
                    scale = sgn * self.ecc[r] * self.rarm[r] * rate
                    tau_rot_bx -= scale * self.axes[r, 0]
                    tau_rot_by -= scale * self.axes[r, 1]
                    tau_rot_bz -= scale * self.axes[r, 2]

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
            if not (isfinite(f_rot_wx) and isfinite(f_rot_wy)
                    and isfinite(f_rot_wz)):
                status = NONFINITE_ROTOR
                steps_done = istep
                break

            # world angular velocity for point velocities
            owx = r00 * wx + r01 * wy + r02 * wz
            owy = r10 * wx + r11 * wy + r12 * wz
            owz = r20 * wx + r21 * wy + r22 * wz

            f_c_x = f_c_y = f_c_z = 0.0
            tau_c_x = tau_c_y = tau_c_z = 0.0
            n_nodes = 0
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
                bx = self.pts[p, 0]
                by = self.pts[p, 1]
                bz = self.pts[p, 2]
                rwx = r00 * bx + r01 * by + r02 * bz
                rwy = r10 * bx + r11 * by + r12 * bz
                rwz = r20 * bx + r21 * by + r22 * bz
                X = px + rwx
                Y = py + rwy
                Z = pz + rwz
                # bilinear surface height with edge extension
                gx = X * inv_cell
                gy = Y * inv_cell
                i0 = <long>floor(gx)
                j0 = <long>floor(gy)
                if i0 < 0:
                    i0 = 0
                    fx = 0.0
                elif i0 > nx - 2:
                    i0 = nx - 2
                    fx = 1.0
                else:
                    fx = gx - i0
                if j0 < 0:
                    j0 = 0
                    fy = 0.0
                elif j0 > ny - 2:
                    j0 = ny - 2
                    fy = 1.0
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
                    # corner points carry a far smaller patch than face
                    # nodes: a point load on a granular bed punches through
                    # instead of bearing, so a tipped body finds no firm
                    # pivot to vault over
                    if p < n_face:
                        a_p = area
                        plow_p = plow_face
                    else:
                        a_p = area_corner
                        plow_p = plow_corner
                    i_n = <long>floor(gx + 0.5)
                    if i_n < 0:
                        i_n = 0
                    elif i_n > nx - 1:
                        i_n = nx - 1
                    j_n = <long>floor(gy + 0.5)
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
                        found = False
                        for q in range(n_nodes):
                            if self.node_j[q] == j_n and self.node_i[q] == i_n:
                                found = True
                                if Z < self.node_z[q]:
                                    self.node_z[q] = Z
                                break
                        if not found:
                            self.node_j[n_nodes] = j_n
                            self.node_i[n_nodes] = i_n
                            self.node_z[n_nodes] = Z
                            n_nodes += 1
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
                    st0 = sqrt(vptx * vptx + vpty * vpty)
                    mu = mu_k + (mu_s - mu_k) * exp(-st0 / (3.0 * v_reg))
                st = sqrt(vptx * vptx + vpty * vpty)
                fx_t = 0.0
                fy_t = 0.0
                # plowing joins friction in the shear channel: both oppose
                # slip, but the plow term grows with depth, not load
                ft_c = mu * fn + fp
                if st > 0.0 and ft_c > 0.0:
                    ft = ft_c * tanh(st / v_reg)
                    fx_t = -ft * vptx / st
                    fy_t = -ft * vpty / st
                    acc_fric += ft * st * dt
                f_c_x += fx_t
                f_c_y += fy_t
                f_c_z += fn
                tau_c_x += rwy * fn - rwz * fy_t
                tau_c_y += rwz * fx_t - rwx * fn
                tau_c_z += rwx * fy_t - rwy * fx_t
            if not (isfinite(f_c_x) and isfinite(f_c_y) and isfinite(f_c_z)):
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
                bx = self.corners[ci, 0]
                by = self.corners[ci, 1]
                bz = self.corners[ci, 2]
                cwx = r00 * bx + r01 * by + r02 * bz
                cwy = r10 * bx + r11 * by + r12 * bz
                cwz = r20 * bx + r21 * by + r22 * bz
                CX = px + cwx
                CY = py + cwy
                for wa in range(n_walls):
                    coord = CX if self.wall_axis[wa] == 0 else CY
                    pen = (coord - self.wall_pos[wa]) * -self.wall_dir[wa]
                    if pen > 0.0:
                        fmag = self.wall_dir[wa] * k_wall * pen
                        if self.wall_axis[wa] == 0:
                            f_w_x += fmag
                            tau_w_y += cwz * fmag
                            tau_w_z += -cwy * fmag
                        else:
                            f_w_y += fmag
                            tau_w_x += -cwz * fmag
                            tau_w_z += cwx * fmag
                for ob in range(n_obs):
                    dx_o = CX - self.obstacles[ob, 0]
                    dy_o = CY - self.obstacles[ob, 1]
                    dist = sqrt(dx_o * dx_o + dy_o * dy_o)
                    if 1e-12 < dist < self.obstacles[ob, 2]:
                        push = k_wall * (self.obstacles[ob, 2] - dist)
                        fox = push * dx_o / dist
                        foy = push * dy_o / dist
                        f_w_x += fox
                        f_w_y += foy
                        tau_w_x += -cwz * foy
                        tau_w_y += cwz * fox
                        tau_w_z += cwx * foy - cwy * fox
            if not (isfinite(f_w_x) and isfinite(f_w_y)):
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
            vx = nvx
            vy = nvy
            vz = nvz
            px += vx * dt
            py += vy * dt
            pz += vz * dt

            # body-frame support acceleration for next step's rotor coupling;
            # gravity drops out because a free-falling eccentric feels no load
            ngz = az + 9.81
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
            wx = nwx
            wy = nwy
            wz = nwz

            dqw = 0.5 * dt * (-qx * wx - qy * wy - qz * wz)
            dqx = 0.5 * dt * (qw * wx + qy * wz - qz * wy)
            dqy = 0.5 * dt * (qw * wy + qz * wx - qx * wz)
            dqz = 0.5 * dt * (qw * wz + qx * wy - qy * wx)
            qw += dqw
            qx += dqx
            qy += dqy
            qz += dqz
            norm = sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
            drift = fabs(norm - 1.0)
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

            if plastic_frac > 0.0 and n_nodes > 0:
                if loosen_rate > 0.0 and v_weak > 0.0:
                    # vibration undoes packing: cells under a hard-pounded
                    # footprint drift back toward loose, quadratic in the
                    # impact speed so over-driving re-fluidizes the seat
                    rel = agit / v_weak
                    lf = loosen_rate * dt * rel * rel
                    if lf > 1.0:
                        lf = 1.0
                    for q in range(n_nodes):
                        m0 = mult[self.node_j[q], self.node_i[q]]
                        if m0 > 1.0:
                            mult[self.node_j[q], self.node_i[q]] = m0 + (1.0 - m0) * lf
                # crater flow, mirroring _engine_py._plastic_and_avalanche;
                # stamp grids replace its linear membership scans and seen-sets
                n_touched = 0
                self.stamp_marker += 1
                marker = self.stamp_marker
                for q in range(n_nodes):
                    self.contact_stamp[self.node_j[q] * nx + self.node_i[q]] = marker
                for q in range(n_nodes):
                    j = self.node_j[q]
                    i = self.node_i[q]
                    drop = plastic_frac * (h[j, i] - self.node_z[q])
                    if drop <= 0.0:
                        continue
                    if compact_inv > 0.0:
                        # tamped grains densify: each flush attempt spends
                        # part of the cell's densification budget (stiffening
                        # it toward the cap) and the dense fraction refuses
                        # to move, so a cell can only ever be dug about
                        # compaction_depth before it behaves rigid
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
                    # nearest ring of in-bounds nodes not under the footprint;
                    # targets stage at the tail of the touched arrays
                    n_targets = 0
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
                                if self.contact_stamp[jj * nx + ii] == marker:
                                    continue
                                self.touched_j[n_touched + n_targets] = jj
                                self.touched_i[n_touched + n_targets] = ii
                                n_targets += 1
                        if n_targets > 0:
                            break
                    if n_targets == 0:
                        continue
                    h[j, i] -= drop
                    share = drop / <double>n_targets
                    for q2 in range(n_targets):
                        h[self.touched_j[n_touched + q2],
                          self.touched_i[n_touched + q2]] += share
                    n_touched += n_targets
                    self.touched_j[n_touched] = j
                    self.touched_i[n_touched] = i
                    n_touched += 1

                if n_touched > 0:
                    # avalanche generations seeded from the touched nodes,
                    # first occurrence wins the ordering
                    self.stamp_marker += 1
                    marker = self.stamp_marker
                    n_active = 0
                    for q in range(n_touched):
                        j = self.touched_j[q]
                        i = self.touched_i[q]
                        if self.av_stamp[j * nx + i] != marker:
                            self.av_stamp[j * nx + i] = marker
                            self.active_j[n_active] = j
                            self.active_i[n_active] = i
                            n_active += 1
                    passes = 0
                    while n_active > 0 and passes < max_passes:
                        passes += 1
                        self.stamp_marker += 1
                        marker = self.stamp_marker
                        n_next = 0
                        for q in range(n_active):
                            j = self.active_j[q]
                            i = self.active_i[q]
                            for nb in range(8):
                                dj = N8_DJ[nb]
                                di = N8_DI[nb]
                                jj = j + dj
                                ii = i + di
                                if jj < 0 or jj >= ny or ii < 0 or ii >= nx:
                                    continue
                                if dj != 0 and di != 0:
                                    dist_n = cell * sqrt2
                                else:
                                    dist_n = cell
                                limit = tan_step * dist_n
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
                                if self.av_stamp[j * nx + i] != marker:
                                    self.av_stamp[j * nx + i] = marker
                                    self.next_j[n_next] = j
                                    self.next_i[n_next] = i
                                    n_next += 1
                                if self.av_stamp[jj * nx + ii] != marker:
                                    self.av_stamp[jj * nx + ii] = marker
                                    self.next_j[n_next] = jj
                                    self.next_i[n_next] = ii
                                    n_next += 1
                        for q in range(n_next):
                            self.active_j[q] = self.next_j[q]
                            self.active_i[q] = self.next_i[q]
                        n_active = n_next
                    if n_active > 0:
                        acc_avover += 1.0

            self.step_count += 1

            v2 = vx * vx + vy * vy + vz * vz
            if not isfinite(v2) or v2 > limit2:
                status = UNSTABLE_SPEED
                steps_done = istep + 1
                break
            if px >= stop_x:
                status = REACHED_STOP
                steps_done = istep + 1
                break

        self.pos[0] = px
        self.pos[1] = py
        self.pos[2] = pz
        self.quat[0] = qw
        self.quat[1] = qx
        self.quat[2] = qy
        self.quat[3] = qz
        self.vel[0] = vx
        self.vel[1] = vy
        self.vel[2] = vz
        self.omega[0] = wx
        self.omega[1] = wy
        self.omega[2] = wz
        self.acc[ACC_WORK_IN] = acc_work
        self.acc[ACC_FRICTION] = acc_fric
        self.acc[ACC_DAMPING] = acc_damp
        self.acc[ACC_PLASTIC] = acc_plast
        self.acc[ACC_QUAT_DRIFT] = acc_drift
        self.acc[ACC_AVALANCHE_OVERFLOW] = acc_avover
        self.agitation = agit
        self.sync_ax = bax
        self.sync_ay = bay
        self.sync_az = baz
        return status, steps_done
