"""Vehicle and controller parameters plus the flat key-value config format.

All quantities are SI. Defaults are Crazyflie-scale and are configuration,
not contract: every value can be overridden through a config file whose
keys are documented in the README.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed config files or invalid parameter values."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def _default_inertia() -> np.ndarray:
    return _readonly(np.diag([1.43e-5, 1.43e-5, 2.89e-5]))


@dataclass(frozen=True)
class VehicleParams:
    """Rigid-body, rotor and drag parameters of the quadrotor.

    parasitic_drag holds the diagonal of the quadratic airframe-drag matrix
    (N s^2/m^2); rotor_drag the diagonal of the drag matrix linear in
    airspeed and total rotor speed (N s/(m rad/s)). thrust_coeff maps a
    single rotor's squared speed to thrust, yaw_torque_coeff to its yaw
    moment.
    """

    mass: float = 0.03
    gravity: float = 9.81
    inertia: np.ndarray = field(default_factory=_default_inertia)
    # Payload-scale parasitic drag: heavy enough that aggressive references
    # produce substantial tracking error, which is the regime the planner is
    # built for. Bare-airframe values are ~10x smaller (see README).
    parasitic_drag: np.ndarray = field(
        default_factory=lambda: _readonly([0.030, 0.030, 0.050]))
    rotor_drag: np.ndarray = field(
        default_factory=lambda: _readonly([1.0e-7, 1.0e-7, 3.0e-7]))
    thrust_coeff: float = 2.3e-8
    arm_length: float = 0.043
    yaw_torque_coeff: float = 7.8e-10
    rotor_speed_min: float = 0.0
    rotor_speed_max: float = 2500.0
    aero_moment: np.ndarray = field(default_factory=lambda: _readonly([0.0, 0.0, 0.0]))

    def __post_init__(self):
        object.__setattr__(self, "inertia", _readonly(self.inertia).reshape(3, 3))
        object.__setattr__(self, "parasitic_drag", _readonly(self.parasitic_drag).reshape(3))
        object.__setattr__(self, "rotor_drag", _readonly(self.rotor_drag).reshape(3))
        object.__setattr__(self, "aero_moment", _readonly(self.aero_moment).reshape(3))
        if self.mass <= 0:
            raise ConfigError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T):
            raise ConfigError("inertia must be symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ConfigError("inertia must be positive definite")
        if np.any(self.parasitic_drag < 0) or np.any(self.rotor_drag < 0):
            raise ConfigError("drag coefficients must be nonnegative")
        if not self.rotor_speed_min < self.rotor_speed_max:
            raise ConfigError("rotor_speed_min must be below rotor_speed_max")
        object.__setattr__(self, "inertia_inv", _readonly(np.linalg.inv(self.inertia)))

    inertia_inv: np.ndarray = field(init=False, repr=False, default=None)

    @property
    def hover_rotor_speed(self) -> float:
        return float(np.sqrt(self.mass * self.gravity / (4.0 * self.thrust_coeff)))

    @property
    def max_collective_thrust(self) -> float:
        return 4.0 * self.thrust_coeff * self.rotor_speed_max ** 2


@dataclass(frozen=True)
class Se3Gains:
    """Gains of the geometric tracking controller.

    k_p (1/s^2) and k_v (1/s) act on position/velocity error and are
    multiplied by mass; k_r (1/s^2) and k_omega (1/s) act on attitude and
    rate error and are multiplied by the inertia matrix.
    """

    k_p: np.ndarray = field(default_factory=lambda: _readonly([49.0, 49.0, 49.0]))
    k_v: np.ndarray = field(default_factory=lambda: _readonly([14.0, 14.0, 14.0]))
    k_r: np.ndarray = field(default_factory=lambda: _readonly([2500.0, 2500.0, 400.0]))
    k_omega: np.ndarray = field(default_factory=lambda: _readonly([100.0, 100.0, 40.0]))

    def __post_init__(self):
        for name in ("k_p", "k_v", "k_r", "k_omega"):
            object.__setattr__(self, name, _readonly(getattr(self, name)).reshape(3))
            if np.any(getattr(self, name) <= 0):
                raise ConfigError(f"{name} entries must be positive")


def parse_config_file(path: str | Path) -> dict[str, float | str]:
    """Parse a flat ``key = value`` config file.

    Blank lines and ``#`` comments are ignored. Values are floats unless
    they fail to parse, in which case they are kept as strings.
    """
    values: dict[str, float | str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        try:
            values[key] = float(value)
        except ValueError:
            values[key] = value
    return values


def _triple(cfg: dict, prefix: str, default: np.ndarray) -> np.ndarray:
    out = np.array(default, dtype=float)
    for i, axis in enumerate(("x", "y", "z")):
        key = f"{prefix}_{axis}"
        if key in cfg:
            out[i] = float(cfg[key])
    return out


def vehicle_params_from_config(cfg: dict) -> VehicleParams:
    base = VehicleParams()
    inertia = np.array(base.inertia)
    for key, (i, j) in {"inertia_xx": (0, 0), "inertia_yy": (1, 1), "inertia_zz": (2, 2)}.items():
        if key in cfg:
            inertia[i, j] = float(cfg[key])
    return VehicleParams(
        mass=float(cfg.get("mass", base.mass)),
        gravity=float(cfg.get("gravity", base.gravity)),
        inertia=inertia,
        parasitic_drag=_triple(cfg, "parasitic_drag", base.parasitic_drag),
        rotor_drag=_triple(cfg, "rotor_drag", base.rotor_drag),
        thrust_coeff=float(cfg.get("thrust_coeff", base.thrust_coeff)),
        arm_length=float(cfg.get("arm_length", base.arm_length)),
        yaw_torque_coeff=float(cfg.get("yaw_torque_coeff", base.yaw_torque_coeff)),
        rotor_speed_min=float(cfg.get("rotor_speed_min", base.rotor_speed_min)),
        rotor_speed_max=float(cfg.get("rotor_speed_max", base.rotor_speed_max)),
        aero_moment=_triple(cfg, "aero_moment", base.aero_moment),
    )


def se3_gains_from_config(cfg: dict) -> Se3Gains:
    base = Se3Gains()
    return Se3Gains(
        k_p=_triple(cfg, "k_p", base.k_p),
        k_v=_triple(cfg, "k_v", base.k_v),
        k_r=_triple(cfg, "k_r", base.k_r),
        k_omega=_triple(cfg, "k_omega", base.k_omega),
    )


def config_hash(cfg: dict) -> str:
    """Short stable hash of a resolved configuration dict."""
    canon = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
