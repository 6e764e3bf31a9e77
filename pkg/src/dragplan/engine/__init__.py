"""Closed-loop rollout engine with compiled and pure-Python backends.

The tracking rollout (controller + RK5 dynamics per step) dominates dataset
generation, so a Cython kernel implements it when available; a numpy
fallback with identical semantics is selected otherwise. Force a choice
with the environment variable DRAGPLAN_BACKEND={auto,compiled,python}.
Results of the two backends agree to floating-point accumulation error but
are not guaranteed bit-identical; per-backend runs are deterministic.
"""

from __future__ import annotations

import importlib
import math
import os

import numpy as np

from . import pyloop

_fastloop = None
_choice = os.environ.get("DRAGPLAN_BACKEND", "auto").lower()
if _choice not in ("auto", "compiled", "python"):
    raise ValueError(f"DRAGPLAN_BACKEND must be auto|compiled|python, got {_choice!r}")
if _choice in ("auto", "compiled"):
    try:
        _fastloop = importlib.import_module(__name__ + "._fastloop")
    except ImportError:
        _fastloop = None
        if _choice == "compiled":
            raise ImportError(
                "DRAGPLAN_BACKEND=compiled but the dragplan.engine._fastloop "
                "extension is not built; run `pip install -e .` with a C compiler")


def active_backend() -> str:
    return "compiled" if _fastloop is not None else "python"


def pack_params(params) -> np.ndarray:
    """Flatten VehicleParams for the compiled kernel."""
    return np.concatenate([
        [params.mass, params.gravity],
        params.inertia.ravel(),
        params.inertia_inv.ravel(),
        params.parasitic_drag,
        params.rotor_drag,
        [params.thrust_coeff, params.arm_length, params.yaw_torque_coeff,
         params.rotor_speed_min, params.rotor_speed_max],
        params.aero_moment,
    ]).astype(float)


def pack_gains(gains) -> np.ndarray:
    return np.concatenate([gains.k_p, gains.k_v, gains.k_r, gains.k_omega]).astype(float)


def n_rollout_steps(total_duration: float, dt: float) -> int:
    """Shared step-count convention: samples at k*dt for k = 0..n."""
    return int(math.floor(total_duration / dt))


def run_tracking_rollout(spline, gains, params, dt: float, w_pos: float,
                         w_vel: float, backend: str | None = None):
    """Roll the closed loop over the spline horizon.

    Returns (err_sum, ctrl_sum, crashed, err_series): the accumulated
    weighted position/velocity error including the terminal sample, the
    accumulated squared control norm, whether the rollout diverged, and the
    per-sample position error norms (truncated at a crash).
    """
    n_steps = n_rollout_steps(spline.total_duration, dt)
    err_series = np.zeros(n_steps + 1)
    use_compiled = _fastloop is not None if backend is None else backend == "compiled"
    if use_compiled and _fastloop is None:
        raise ValueError("compiled backend requested but not available")
    if use_compiled:
        err_sum, ctrl_sum, crashed_i, filled = _fastloop.run_tracking_rollout(
            np.ascontiguousarray(spline.coefficients),
            np.ascontiguousarray(spline.durations),
            int(spline.order), float(dt), float(w_pos), float(w_vel),
            int(n_steps), pack_params(params), pack_gains(gains), err_series)
        crashed = bool(crashed_i)
    else:
        err_sum, ctrl_sum, crashed, filled = pyloop.run_tracking_rollout(
            spline, gains, params, dt, w_pos, w_vel, n_steps, err_series)
    return err_sum, ctrl_sum, crashed, err_series[:filled]
