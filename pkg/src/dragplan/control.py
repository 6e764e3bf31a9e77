"""Differential-flatness reference mapping and SE(3) tracking control.

The flat output (position, yaw) and its derivatives fully determine the
desired attitude, collective thrust and body rates; the geometric
controller then feeds back position/velocity error into the thrust vector
and attitude/rate error into torques. Both functions are pure and
stateless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import Se3Gains, VehicleParams
from .vehicle import ControlInput, QuadState

_E3 = np.array([0.0, 0.0, 1.0])

SINGULAR_THRUST_EPS = 1e-6


class SingularThrustError(ValueError):
    """Free-fall singularity: desired thrust vector has (near-)zero norm."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class FlatState:
    """17-dimensional flat output: position through snap, yaw and yaw rate."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    snap: np.ndarray
    yaw: float
    yaw_rate: float

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration", "jerk", "snap"):
            object.__setattr__(self, name, _readonly(getattr(self, name)).reshape(3))
        object.__setattr__(self, "yaw", float(self.yaw))
        object.__setattr__(self, "yaw_rate", float(self.yaw_rate))
        if not np.isfinite(self.as_vector()).all():
            raise ValueError("flat state entries must be finite")

    @classmethod
    def hover(cls, position=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "FlatState":
        z = np.zeros(3)
        return cls(position, z, z, z, z, yaw, 0.0)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            self.position, self.velocity, self.acceleration, self.jerk,
            self.snap, [self.yaw, self.yaw_rate],
        ])


def _attitude_from_thrust_vector(thrust_vec: np.ndarray, yaw: float) -> np.ndarray:
    """Rotation whose body z-axis aligns with thrust_vec, heading toward yaw."""
    b3 = thrust_vec / np.linalg.norm(thrust_vec)
    x_c = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    b2 = np.cross(b3, x_c)
    n2 = np.linalg.norm(b2)
    if n2 < 1e-8:
        # Thrust nearly parallel to the heading: fall back to the yaw y-axis.
        y_c = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
        b1 = np.cross(y_c, b3)
        b1 = b1 / np.linalg.norm(b1)
        b2 = np.cross(b3, b1)
    else:
        b2 = b2 / n2
        b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


def flat_to_reference(flat: FlatState, params: VehicleParams) -> tuple[np.ndarray, float, np.ndarray]:
    """Desired rotation, collective thrust and body rates for a flat state."""
    t_vec = flat.acceleration + params.gravity * _E3
    norm_t = float(np.linalg.norm(t_vec))
    if norm_t < SINGULAR_THRUST_EPS:
        raise SingularThrustError(
            f"thrust vector norm {norm_t:.3e} below {SINGULAR_THRUST_EPS:.0e}")
    rotation = _attitude_from_thrust_vector(t_vec, flat.yaw)
    thrust = params.mass * norm_t
    b1, b2, b3 = rotation[:, 0], rotation[:, 1], rotation[:, 2]

    # d(b3)/dt from the jerk, then rates via R' = R hat(omega).
    b3_dot = (flat.jerk - float(b3 @ flat.jerk) * b3) / norm_t
    w_x = -float(b2 @ b3_dot)
    w_y = float(b1 @ b3_dot)
    x_c = np.array([np.cos(flat.yaw), np.sin(flat.yaw), 0.0])
    y_c = np.array([-np.sin(flat.yaw), np.cos(flat.yaw), 0.0])
    denom = float(np.linalg.norm(np.cross(y_c, b3)))
    if denom < 1e-8:
        w_z = flat.yaw_rate
    else:
        w_z = (flat.yaw_rate * float(x_c @ b1) + w_y * float(y_c @ b3)) / denom
    return rotation, thrust, np.array([w_x, w_y, w_z])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of the hat map for a skew-symmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def se3_control(state: QuadState, flat_ref: FlatState, gains: Se3Gains,
                params: VehicleParams) -> ControlInput:
    """Geometric tracking command (pre-saturation) for one flat reference.

    The thrust vector combines position/velocity feedback with gravity and
    acceleration feedforward; the desired attitude aligns the body z-axis
    with it. Torques feed back the vee-map attitude error and the rate
    error against the flatness-derived reference rates.
    """
    e_p = state.position - flat_ref.position
    e_v = state.velocity - flat_ref.velocity
    f_des = params.mass * (
        -gains.k_p * e_p - gains.k_v * e_v
        + params.gravity * _E3 + flat_ref.acceleration)
    norm_f = float(np.linalg.norm(f_des))
    if norm_f < SINGULAR_THRUST_EPS:
        raise SingularThrustError(
            f"commanded thrust vector norm {norm_f:.3e} below {SINGULAR_THRUST_EPS:.0e}")

    r = state.rotation
    collective = float(f_des @ (r @ _E3))

    r_des = _attitude_from_thrust_vector(f_des, flat_ref.yaw)
    _, _, omega_des = flat_to_reference(flat_ref, params)

    e_r = 0.5 * vee(r_des.T @ r - r.T @ r_des)
    omega_ff = r.T @ (r_des @ omega_des)
    e_w = state.body_rates - omega_ff
    torques = params.inertia @ (-gains.k_r * e_r - gains.k_omega * e_w) \
        + np.cross(omega_ff, params.inertia @ omega_ff)
    return ControlInput(collective, torques)
