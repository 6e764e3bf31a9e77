"""Quadrotor rigid-body dynamics with parasitic and rotor drag.

State evolves as

    p'     = v
    v'     = (1/m) R ([0, 0, c_f]^T + f_a) - g e3
    R'     = R [omega]_x
    omega' = J^-1 (tau + m_a - omega x J omega)

with body-frame aerodynamic force

    f_a = -C ||v|| R^T v - K eta_s R^T v

where C and K are the parasitic- and rotor-drag diagonals and eta_s is the
sum of the four rotor speeds. Commands are mixed to rotor speeds through a
quad-X allocation, clamped to the speed limits, and the achieved wrench is
what the integrator sees, so saturation feeds back into the dynamics.

Integration is a fixed-step explicit Runge-Kutta method of order 5
(Dormand-Prince stages, no adaptive control) so that rollouts are
deterministic. The rotation is re-orthonormalized after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import VehicleParams

_E3 = np.array([0.0, 0.0, 1.0])

# Dormand-Prince coefficients: 6 stages combined with the 5th-order weights.
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """A state component exceeded the divergence limit (crashed rollout)."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = hat(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def orthonormalize(rotation: np.ndarray, tol: float = 1e-13, max_iters: int = 5) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3).

    Newton iteration R <- R (3I - R^T R) / 2 toward the orthogonal polar
    factor; quadratic convergence from the small per-step drift.
    """
    r = np.array(rotation, dtype=float)
    eye = np.eye(3)
    for _ in range(max_iters):
        err = r.T @ r - eye
        if np.max(np.abs(err)) <= tol:
            break
        r = r @ (1.5 * eye - 0.5 * (r.T @ r))
    return r


@dataclass(frozen=True)
class QuadState:
    """Full rigid-body state plus rotor speeds.

    rotation maps body to world; body_rates are expressed in the body frame.
    """

    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray
    body_rates: np.ndarray
    rotor_speeds: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _readonly(self.position).reshape(3))
        object.__setattr__(self, "velocity", _readonly(self.velocity).reshape(3))
        object.__setattr__(self, "rotation", _readonly(self.rotation).reshape(3, 3))
        object.__setattr__(self, "body_rates", _readonly(self.body_rates).reshape(3))
        object.__setattr__(self, "rotor_speeds", _readonly(self.rotor_speeds).reshape(4))
        defect = np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3)))
        if not defect <= 1e-9:
            raise ValueError(f"rotation not orthonormal (defect {defect:.2e})")
        if not abs(np.linalg.det(self.rotation) - 1.0) <= 1e-9:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def hover(cls, params: VehicleParams, position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "QuadState":
        c, s = np.cos(yaw), np.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        eta = np.clip(params.hover_rotor_speed, params.rotor_speed_min, params.rotor_speed_max)
        return cls(position, np.zeros(3), rotation, np.zeros(3), np.full(4, eta))

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))


@dataclass(frozen=True)
class ControlInput:
    """Collective thrust (N) and body-frame torques (N m)."""

    collective_thrust: float
    torques: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "collective_thrust", float(self.collective_thrust))
        object.__setattr__(self, "torques", _readonly(self.torques).reshape(3))


def aero_forces(state: QuadState, params: VehicleParams) -> np.ndarray:
    """Body-frame aerodynamic force from parasitic and rotor drag."""
    v_body = state.rotation.T @ state.velocity
    speed = float(np.linalg.norm(state.velocity))
    eta_s = float(np.sum(state.rotor_speeds))
    return -(params.parasitic_drag * speed) * v_body - (params.rotor_drag * eta_s) * v_body


def mixer_matrix(params: VehicleParams) -> np.ndarray:
    """Map per-rotor thrusts to (collective thrust, torques) for a quad-X frame.

    Rotors are numbered counterclockwise from front-right at (+-a, +-a) with
    a = arm_length / sqrt(2) and alternating spin directions.
    """
    a = params.arm_length / np.sqrt(2.0)
    g = params.yaw_torque_coeff / params.thrust_coeff
    return np.array([
        [1.0, 1.0, 1.0, 1.0],
        [a, a, -a, -a],
        [-a, a, a, -a],
        [g, -g, g, -g],
    ])


def rotor_wrench(rotor_speeds: np.ndarray, params: VehicleParams) -> ControlInput:
    """Forward allocation: per-rotor speeds to achieved thrust and torques."""
    thrusts = params.thrust_coeff * np.asarray(rotor_speeds, dtype=float) ** 2
    u = mixer_matrix(params) @ thrusts
    return ControlInput(u[0], u[1:])


def allocate_rotors(u: ControlInput, params: VehicleParams) -> tuple[np.ndarray, bool]:
    """Invert the allocation map and clamp speeds to the rotor limits.

    Returns the achieved rotor speeds and whether any clamp was active
    (including rejection of negative per-rotor thrust demands).
    """
    a = params.arm_length / np.sqrt(2.0)
    g = params.yaw_torque_coeff / params.thrust_coeff
    cf = u.collective_thrust
    tx, ty, tz = u.torques
    # Analytic inverse of mixer_matrix; rows follow the rotor numbering.
    thrusts = 0.25 * np.array([
        cf + tx / a - ty / a + tz / g,
        cf + tx / a + ty / a - tz / g,
        cf - tx / a + ty / a + tz / g,
        cf - tx / a - ty / a - tz / g,
    ])
    saturated = bool(np.any(thrusts < 0.0))
    speeds = np.sqrt(np.maximum(thrusts, 0.0) / params.thrust_coeff)
    lo, hi = params.rotor_speed_min, params.rotor_speed_max
    saturated = saturated or bool(np.any(speeds < lo)) or bool(np.any(speeds > hi))
    return np.clip(speeds, lo, hi), saturated


def _derivatives(y: np.ndarray, cf: float, torques: np.ndarray, eta_s: float,
                 params: VehicleParams) -> np.ndarray:
    """Time derivative of the packed state [p, v, R.ravel(), omega]."""
    v = y[3:6]
    r = y[6:15].reshape(3, 3)
    w = y[15:18]
    v_body = r.T @ v
    speed = float(np.linalg.norm(v))
    f_a = -(params.parasitic_drag * speed) * v_body - (params.rotor_drag * eta_s) * v_body
    thrust_body = f_a + np.array([0.0, 0.0, cf])
    dv = (r @ thrust_body) / params.mass - params.gravity * _E3
    dr = r @ hat(w)
    jw = params.inertia @ w
    dw = params.inertia_inv @ (torques + params.aero_moment - np.cross(w, jw))
    out = np.empty(18)
    out[0:3] = v
    out[3:6] = dv
    out[6:15] = dr.ravel()
    out[15:18] = dw
    return out


def step_dynamics(state: QuadState, u: ControlInput, dt: float,
                  params: VehicleParams) -> QuadState:
    """Advance the state one fixed step under a zero-order-hold command.

    The command is mixed to rotor speeds first, so the integrated wrench and
    the drag term's total rotor speed both reflect actuator clamping.
    Raises DivergenceError when the post-step state is non-finite or any
    component exceeds DIVERGENCE_LIMIT.
    """
    if not 0.0 < dt <= 0.05:
        raise ValueError(f"dt must lie in (0, 0.05], got {dt}")
    speeds, _ = allocate_rotors(u, params)
    achieved = rotor_wrench(speeds, params)
    cf = achieved.collective_thrust
    torques = achieved.torques
    eta_s = float(np.sum(speeds))

    y = np.empty(18)
    y[0:3] = state.position
    y[3:6] = state.velocity
    y[6:15] = state.rotation.ravel()
    y[15:18] = state.body_rates

    ks = []
    for stage in range(6):
        yi = y
        if stage:
            acc = _DP_A[stage][0] * ks[0]
            for j in range(1, stage):
                acc = acc + _DP_A[stage][j] * ks[j]
            yi = y + dt * acc
        ks.append(_derivatives(yi, cf, torques, eta_s, params))
    acc = _DP_B[0] * ks[0]
    for j in range(1, 6):
        acc = acc + _DP_B[j] * ks[j]
    y_new = y + dt * acc

    if not np.all(np.isfinite(y_new)) or np.max(np.abs(y_new)) > DIVERGENCE_LIMIT:
        raise DivergenceError("state diverged during integration step")

    with np.errstate(over="ignore", invalid="ignore"):
        rotation = orthonormalize(y_new[6:15].reshape(3, 3))
        defect = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
    if not defect <= 1e-9:
        # The rotation left the projection's convergence basin: the step was
        # integrated far outside the stable region, i.e. the rollout crashed.
        raise DivergenceError(
            f"rotation unrecoverable after step (defect {defect:.2e})")
    return QuadState(y_new[0:3], y_new[3:6], rotation, y_new[15:18], speeds)
