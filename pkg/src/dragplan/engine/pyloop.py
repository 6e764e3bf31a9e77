"""Pure-Python rollout backend built on the public dynamics and controller.

Semantics are the reference for the compiled kernel: error samples at
k*dt for k = 0..n_steps, control accumulated over the first n_steps
samples, crash on controller singularity or integrator divergence.
"""

from __future__ import annotations

import math

from ..control import SingularThrustError, se3_control
from ..spline import eval_spline
from ..vehicle import DivergenceError, QuadState, step_dynamics


def run_tracking_rollout(spline, gains, params, dt, w_pos, w_vel, n_steps,
                         err_series) -> tuple[float, float, bool, int]:
    ref0 = eval_spline(spline, 0.0)
    state = QuadState.hover(params, ref0.position, ref0.yaw)
    err_sum = 0.0
    ctrl_sum = 0.0
    crashed = False
    filled = 0
    for k in range(n_steps):
        ref = eval_spline(spline, k * dt)
        dp = state.position - ref.position
        dv = state.velocity - ref.velocity
        err_series[k] = math.sqrt(float(dp @ dp))
        filled = k + 1
        err_sum += w_pos * float(dp @ dp) + w_vel * float(dv @ dv)
        try:
            u = se3_control(state, ref, gains, params)
        except SingularThrustError:
            crashed = True
            break
        ctrl_sum += u.collective_thrust ** 2 + float(u.torques @ u.torques)
        try:
            state = step_dynamics(state, u, dt, params)
        except DivergenceError:
            crashed = True
            break
    if not crashed:
        ref = eval_spline(spline, n_steps * dt)
        dp = state.position - ref.position
        dv = state.velocity - ref.velocity
        err_series[n_steps] = math.sqrt(float(dp @ dp))
        filled = n_steps + 1
        err_sum += w_pos * float(dp @ dp) + w_vel * float(dv @ dv)
    return err_sum, ctrl_sum, crashed, filled
