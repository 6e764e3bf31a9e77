# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled closed-loop rollout kernel.

Mirrors dragplan.engine.pyloop step for step: spline evaluation by Horner
differentiation, geometric controller, quad-X allocation with clamping,
fixed-step Dormand-Prince integration and post-step renormalization.
Packed parameter layouts are defined in dragplan.engine.pack_params /
pack_gains.
"""

from libc.math cimport sqrt, sin, cos, atan2, fabs, isfinite

cdef double DIVERGENCE_LIMIT = 1e6
cdef double SINGULAR_EPS = 1e-6

# Dormand-Prince stage coefficients (5th-order weights).
cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0
cdef double A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0
cdef double A63 = 46732.0 / 5247.0, A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0
cdef double B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0


cdef inline double dot3(double* a, double* b) noexcept:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline void cross3(double* a, double* b, double* out) noexcept:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void mat_vec(double* m, double* v, double* out) noexcept:
    out[0] = m[0] * v[0] + m[1] * v[1] + m[2] * v[2]
    out[1] = m[3] * v[0] + m[4] * v[1] + m[5] * v[2]
    out[2] = m[6] * v[0] + m[7] * v[1] + m[8] * v[2]


cdef inline void mat_tvec(double* m, double* v, double* out) noexcept:
    out[0] = m[0] * v[0] + m[3] * v[1] + m[6] * v[2]
    out[1] = m[1] * v[0] + m[4] * v[1] + m[7] * v[2]
    out[2] = m[2] * v[0] + m[5] * v[1] + m[8] * v[2]


cdef void eval_flat(const double[::1] coeffs, const double[::1] durations,
                    int order, int segments, double t, double* flat) noexcept:
    """Flat state [p3, v3, a3, j3, s3, yaw, yaw_rate] at t (clamped)."""
    cdef double total = 0.0
    cdef int i, seg, ch, d, n1
    for i in range(segments):
        total += durations[i]
    if t < 0.0:
        t = 0.0
    if t > total:
        t = total
    cdef double end = 0.0
    seg = 0
    while seg < segments:
        end += durations[seg]
        if t < end:
            break
        seg += 1
    if seg >= segments:
        seg = segments - 1
        end = total
    cdef double tau = t - (end - durations[seg])

    n1 = order + 1
    cdef int base = seg * 4 * n1
    cdef double r0, r1, r2, r3, r4, a
    for ch in range(3):
        r0 = r1 = r2 = r3 = r4 = 0.0
        for i in range(order, -1, -1):
            a = coeffs[base + ch * n1 + i]
            r4 = r4 * tau + r3
            r3 = r3 * tau + r2
            r2 = r2 * tau + r1
            r1 = r1 * tau + r0
            r0 = r0 * tau + a
        flat[0 + ch] = r0
        flat[3 + ch] = r1
        flat[6 + ch] = 2.0 * r2
        flat[9 + ch] = 6.0 * r3
        flat[12 + ch] = 24.0 * r4
    r0 = r1 = 0.0
    for i in range(order, -1, -1):
        a = coeffs[base + 3 * n1 + i]
        r1 = r1 * tau + r0
        r0 = r0 * tau + a
    flat[15] = r0
    flat[16] = r1


cdef int attitude_from_thrust(double* f_vec, double yaw, double* r_out) noexcept:
    """Columns [b1 b2 b3] with b3 along f_vec; returns 1 on zero norm."""
    cdef double n = sqrt(dot3(f_vec, f_vec))
    if n < SINGULAR_EPS:
        return 1
    cdef double b3[3], b1[3], b2[3], xc[3], yc[3]
    cdef double n2
    b3[0] = f_vec[0] / n
    b3[1] = f_vec[1] / n
    b3[2] = f_vec[2] / n
    xc[0] = cos(yaw)
    xc[1] = sin(yaw)
    xc[2] = 0.0
    cross3(b3, xc, b2)
    n2 = sqrt(dot3(b2, b2))
    if n2 < 1e-8:
        yc[0] = -sin(yaw)
        yc[1] = cos(yaw)
        yc[2] = 0.0
        cross3(yc, b3, b1)
        n2 = sqrt(dot3(b1, b1))
        b1[0] /= n2
        b1[1] /= n2
        b1[2] /= n2
        cross3(b3, b1, b2)
    else:
        b2[0] /= n2
        b2[1] /= n2
        b2[2] /= n2
        cross3(b2, b3, b1)
    r_out[0] = b1[0]; r_out[1] = b2[0]; r_out[2] = b3[0]
    r_out[3] = b1[1]; r_out[4] = b2[1]; r_out[5] = b3[1]
    r_out[6] = b1[2]; r_out[7] = b2[2]; r_out[8] = b3[2]
    return 0


cdef int reference_rates(double* flat, double gravity, double* omega_d) noexcept:
    """Flatness-map body rates of the reference; returns 1 when singular."""
    cdef double tvec[3], rr[9], b3dot[3], xc[3], yc[3], tmp[3]
    cdef double norm_t, wx, wy, wz, denom
    tvec[0] = flat[6]
    tvec[1] = flat[7]
    tvec[2] = flat[8] + gravity
    norm_t = sqrt(dot3(tvec, tvec))
    if norm_t < SINGULAR_EPS:
        return 1
    if attitude_from_thrust(tvec, flat[15], rr):
        return 1
    # b3dot = (jerk - (b3 . jerk) b3) / |t|
    cdef double b1[3], b2[3], b3[3]
    b1[0] = rr[0]; b1[1] = rr[3]; b1[2] = rr[6]
    b2[0] = rr[1]; b2[1] = rr[4]; b2[2] = rr[7]
    b3[0] = rr[2]; b3[1] = rr[5]; b3[2] = rr[8]
    cdef double proj = b3[0] * flat[9] + b3[1] * flat[10] + b3[2] * flat[11]
    b3dot[0] = (flat[9] - proj * b3[0]) / norm_t
    b3dot[1] = (flat[10] - proj * b3[1]) / norm_t
    b3dot[2] = (flat[11] - proj * b3[2]) / norm_t
    wx = -dot3(b2, b3dot)
    wy = dot3(b1, b3dot)
    xc[0] = cos(flat[15]); xc[1] = sin(flat[15]); xc[2] = 0.0
    yc[0] = -xc[1]; yc[1] = xc[0]; yc[2] = 0.0
    cross3(yc, b3, tmp)
    denom = sqrt(dot3(tmp, tmp))
    if denom < 1e-8:
        wz = flat[16]
    else:
        wz = (flat[16] * dot3(xc, b1) + wy * dot3(yc, b3)) / denom
    omega_d[0] = wx
    omega_d[1] = wy
    omega_d[2] = wz
    return 0


cdef int se3_control(double* y, double* flat, double* gains, double* par,
                     double* cf_out, double* tau_out) noexcept:
    """Geometric controller; state packed [p, v, R, w]. Returns 1 on singularity."""
    cdef double mass = par[0], gravity = par[1]
    cdef double f_des[3], e_p[3], e_v[3]
    cdef int i
    for i in range(3):
        e_p[i] = y[i] - flat[i]
        e_v[i] = y[3 + i] - flat[3 + i]
        f_des[i] = mass * (-gains[i] * e_p[i] - gains[3 + i] * e_v[i] + flat[6 + i])
    f_des[2] += mass * gravity
    cdef double norm_f = sqrt(dot3(f_des, f_des))
    if norm_f < SINGULAR_EPS:
        return 1
    # collective thrust: f_des . (R e3)
    cf_out[0] = f_des[0] * y[8] + f_des[1] * y[11] + f_des[2] * y[14]

    cdef double r_des[9], omega_d[3]
    if attitude_from_thrust(f_des, flat[15], r_des):
        return 1
    if reference_rates(flat, gravity, omega_d):
        return 1

    # attitude error 0.5 * vee(Rd^T R - R^T Rd); m1 = Rd^T R (row-major)
    cdef double m1[9]
    cdef double* r = &y[6]
    cdef int a, b, k
    for a in range(3):
        for b in range(3):
            m1[3 * a + b] = 0.0
            for k in range(3):
                m1[3 * a + b] += r_des[3 * k + a] * r[3 * k + b]
    cdef double e_r[3]
    e_r[0] = 0.5 * (m1[7] - m1[5])
    e_r[1] = 0.5 * (m1[2] - m1[6])
    e_r[2] = 0.5 * (m1[3] - m1[1])

    cdef double tmp[3], omega_ff[3], e_w[3], att[3], jw[3], gyro[3]
    mat_vec(r_des, omega_d, tmp)
    mat_tvec(r, tmp, omega_ff)
    for i in range(3):
        e_w[i] = y[15 + i] - omega_ff[i]
        att[i] = -gains[6 + i] * e_r[i] - gains[9 + i] * e_w[i]
    cdef double* jmat = &par[2]
    cdef double* jinv = &par[11]
    mat_vec(jmat, omega_ff, jw)
    cross3(omega_ff, jw, gyro)
    mat_vec(jmat, att, tau_out)
    for i in range(3):
        tau_out[i] += gyro[i]
    return 0


cdef void allocate(double cf, double* tau, double* par, double* speeds) noexcept:
    cdef double a = par[27] / sqrt(2.0)
    cdef double g = par[28] / par[26]
    cdef double k_eta = par[26]
    cdef double lo = par[29], hi = par[30]
    cdef double f[4]
    f[0] = 0.25 * (cf + tau[0] / a - tau[1] / a + tau[2] / g)
    f[1] = 0.25 * (cf + tau[0] / a + tau[1] / a - tau[2] / g)
    f[2] = 0.25 * (cf - tau[0] / a + tau[1] / a + tau[2] / g)
    f[3] = 0.25 * (cf - tau[0] / a - tau[1] / a - tau[2] / g)
    cdef int i
    cdef double s
    for i in range(4):
        s = sqrt((f[i] if f[i] > 0.0 else 0.0) / k_eta)
        if s < lo:
            s = lo
        if s > hi:
            s = hi
        speeds[i] = s


cdef void wrench(double* speeds, double* par, double* cf_out, double* tau_out) noexcept:
    cdef double a = par[27] / sqrt(2.0)
    cdef double g = par[28] / par[26]
    cdef double f[4]
    cdef int i
    for i in range(4):
        f[i] = par[26] * speeds[i] * speeds[i]
    cf_out[0] = f[0] + f[1] + f[2] + f[3]
    tau_out[0] = a * (f[0] + f[1] - f[2] - f[3])
    tau_out[1] = a * (-f[0] + f[1] + f[2] - f[3])
    tau_out[2] = g * (f[0] - f[1] + f[2] - f[3])


cdef void derivatives(double* y, double cf, double* tau, double eta_s,
                      double* par, double* out) noexcept:
    cdef double* v = &y[3]
    cdef double* r = &y[6]
    cdef double* w = &y[15]
    cdef double v_body[3], f_body[3], jw[3], wxjw[3], tmp[3]
    cdef double speed = sqrt(dot3(v, v))
    cdef int i
    mat_tvec(r, v, v_body)
    for i in range(3):
        f_body[i] = -(par[20 + i] * speed) * v_body[i] - (par[23 + i] * eta_s) * v_body[i]
    f_body[2] += cf
    mat_vec(r, f_body, tmp)
    out[0] = v[0]
    out[1] = v[1]
    out[2] = v[2]
    out[3] = tmp[0] / par[0]
    out[4] = tmp[1] / par[0]
    out[5] = tmp[2] / par[0] - par[1]
    # dR = R hat(w)
    for i in range(3):
        out[6 + 3 * i + 0] = r[3 * i + 1] * w[2] - r[3 * i + 2] * w[1]
        out[6 + 3 * i + 1] = -r[3 * i + 0] * w[2] + r[3 * i + 2] * w[0]
        out[6 + 3 * i + 2] = r[3 * i + 0] * w[1] - r[3 * i + 1] * w[0]
    mat_vec(&par[2], w, jw)
    cross3(w, jw, wxjw)
    for i in range(3):
        tmp[i] = tau[i] + par[31 + i] - wxjw[i]
    mat_vec(&par[11], tmp, &out[15])


cdef int renormalize(double* r) noexcept:
    """Newton projection toward SO(3); returns 1 when it cannot converge."""
    cdef double e[9], rtr[9]
    cdef double defect
    cdef int it, a, b, k
    for it in range(5):
        for a in range(3):
            for b in range(3):
                rtr[3 * a + b] = r[a] * r[b] + r[3 + a] * r[3 + b] + r[6 + a] * r[6 + b]
        defect = 0.0
        for a in range(3):
            for b in range(3):
                e[3 * a + b] = rtr[3 * a + b] - (1.0 if a == b else 0.0)
                if fabs(e[3 * a + b]) > defect:
                    defect = fabs(e[3 * a + b])
        if defect <= 1e-13:
            break
        # R <- R (1.5 I - 0.5 R^T R)
        for a in range(3):
            for b in range(3):
                rtr[3 * a + b] = -0.5 * rtr[3 * a + b] + (1.5 if a == b else 0.0)
        for a in range(3):
            for b in range(3):
                e[3 * a + b] = 0.0
                for k in range(3):
                    e[3 * a + b] += r[3 * a + k] * rtr[3 * k + b]
        for a in range(9):
            r[a] = e[a]
    for a in range(3):
        for b in range(3):
            defect = r[a] * r[b] + r[3 + a] * r[3 + b] + r[6 + a] * r[6 + b] \
                - (1.0 if a == b else 0.0)
            # NaN-safe: a non-finite defect must also count as unrecoverable
            if not (fabs(defect) <= 1e-9):
                return 1
    return 0


cdef int rk5_step(double* y, double cf, double* tau, double eta_s, double dt,
                  double* par, double* y_new) noexcept:
    """One fixed step; returns 1 on divergence."""
    cdef double k1[18], k2[18], k3[18], k4[18], k5[18], k6[18], yi[18]
    cdef int i
    derivatives(y, cf, tau, eta_s, par, k1)
    for i in range(18):
        yi[i] = y[i] + dt * (A21 * k1[i])
    derivatives(yi, cf, tau, eta_s, par, k2)
    for i in range(18):
        yi[i] = y[i] + dt * (A31 * k1[i] + A32 * k2[i])
    derivatives(yi, cf, tau, eta_s, par, k3)
    for i in range(18):
        yi[i] = y[i] + dt * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
    derivatives(yi, cf, tau, eta_s, par, k4)
    for i in range(18):
        yi[i] = y[i] + dt * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
    derivatives(yi, cf, tau, eta_s, par, k5)
    for i in range(18):
        yi[i] = y[i] + dt * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i])
    derivatives(yi, cf, tau, eta_s, par, k6)
    for i in range(18):
        y_new[i] = y[i] + dt * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i])
    for i in range(18):
        if not isfinite(y_new[i]) or fabs(y_new[i]) > DIVERGENCE_LIMIT:
            return 1
    return renormalize(&y_new[6])


def run_tracking_rollout(const double[::1] coeffs, const double[::1] durations,
                         int order, double dt, double w_pos, double w_vel,
                         int n_steps, const double[::1] par_in,
                         const double[::1] gains_in, double[::1] err_series):
    """Closed-loop rollout; returns (err_sum, ctrl_sum, crashed, filled)."""
    cdef double par[34], gains[12]
    cdef int i, k
    for i in range(34):
        par[i] = par_in[i]
    for i in range(12):
        gains[i] = gains_in[i]
    cdef int segments = durations.shape[0]

    cdef double flat[17], y[18], y_new[18]
    cdef double cf, ctau[3], speeds[4], cf_a, tau_a[3], eta_s
    cdef double dp0, dp1, dp2, dv0, dv1, dv2, e2
    cdef double err_sum = 0.0, ctrl_sum = 0.0
    cdef int crashed = 0, filled = 0

    eval_flat(coeffs, durations, order, segments, 0.0, flat)
    cdef double cy = cos(flat[15]), sy = sin(flat[15])
    for i in range(18):
        y[i] = 0.0
    y[0] = flat[0]
    y[1] = flat[1]
    y[2] = flat[2]
    y[6] = cy;  y[7] = -sy
    y[9] = sy;  y[10] = cy
    y[14] = 1.0

    for k in range(n_steps):
        eval_flat(coeffs, durations, order, segments, k * dt, flat)
        dp0 = y[0] - flat[0]; dp1 = y[1] - flat[1]; dp2 = y[2] - flat[2]
        dv0 = y[3] - flat[3]; dv1 = y[4] - flat[4]; dv2 = y[5] - flat[5]
        e2 = dp0 * dp0 + dp1 * dp1 + dp2 * dp2
        err_series[k] = sqrt(e2)
        filled = k + 1
        err_sum += w_pos * e2 + w_vel * (dv0 * dv0 + dv1 * dv1 + dv2 * dv2)
        if se3_control(y, flat, gains, par, &cf, ctau):
            crashed = 1
            break
        ctrl_sum += cf * cf + dot3(ctau, ctau)
        allocate(cf, ctau, par, speeds)
        wrench(speeds, par, &cf_a, tau_a)
        eta_s = speeds[0] + speeds[1] + speeds[2] + speeds[3]
        if rk5_step(y, cf_a, tau_a, eta_s, dt, par, y_new):
            crashed = 1
            break
        for i in range(18):
            y[i] = y_new[i]

    if not crashed:
        eval_flat(coeffs, durations, order, segments, n_steps * dt, flat)
        dp0 = y[0] - flat[0]; dp1 = y[1] - flat[1]; dp2 = y[2] - flat[2]
        dv0 = y[3] - flat[3]; dv1 = y[4] - flat[4]; dv2 = y[5] - flat[5]
        e2 = dp0 * dp0 + dp1 * dp1 + dp2 * dp2
        err_series[n_steps] = sqrt(e2)
        filled = n_steps + 1
        err_sum += w_pos * e2 + w_vel * (dv0 * dv0 + dv1 * dv1 + dv2 * dv2)

    return err_sum, ctrl_sum, crashed, filled
