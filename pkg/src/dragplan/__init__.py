"""Drag-aware quadrotor trajectory generation toolkit."""

from .params import Se3Gains, VehicleParams
from .spline import PolySpline, WaypointSet, plan_minsnap

__version__ = "0.1.0"

__all__ = [
    "Se3Gains",
    "VehicleParams",
    "PolySpline",
    "WaypointSet",
    "plan_minsnap",
    "__version__",
]
