"""Polynomial spline trajectories and the minimum-snap quadratic program.

A trajectory is one polynomial of fixed order per segment and channel
(x, y, z, yaw), each segment parameterized by local time in [0, T_i].
Coefficients are stored in a single flat vector ordered segment-major,
then channel, then ascending power:

    index(seg, ch, k) = (seg * 4 + ch) * (order + 1) + k

The snap cost integrates the squared 4th position derivative plus the
weighted squared yaw rate; the constraint system pins keyframes, rest
boundary conditions and derivative continuity up to jerk (yaw rate for the
yaw channel). The equality-constrained QP is solved through its KKT saddle
system.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .control import FlatState

CHANNELS = 4  # x, y, z, yaw

SPLINE_SCHEMA = "polyspline-v1"


class SingularSystemError(RuntimeError):
    """The (regularized) KKT system could not be solved to tolerance."""


class ConstraintRankError(RuntimeError):
    """Constraint assembly produced a rank-deficient system (internal error)."""


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class WaypointSet:
    """Keyframe positions and yaw angles, with optional cumulative times."""

    positions: np.ndarray           # (k, 3)
    yaws: np.ndarray                # (k,)
    times: np.ndarray | None = None  # cumulative seconds, len k, starting at 0

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(np.atleast_2d(self.positions)))
        object.__setattr__(self, "yaws", _readonly(self.yaws).reshape(-1))
        if self.times is not None:
            object.__setattr__(self, "times", _readonly(self.times).reshape(-1))
        if self.positions.shape[0] < 2:
            raise ValueError("need at least 2 keyframes")
        if self.positions.shape[0] != self.yaws.shape[0]:
            raise ValueError("positions and yaws must have equal length")
        if not np.isfinite(self.positions).all() or not np.isfinite(self.yaws).all():
            raise ValueError("keyframes must be finite")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class PolySpline:
    """Per-segment polynomial coefficients for x, y, z and yaw."""

    coefficients: np.ndarray
    durations: np.ndarray
    order: int = 7

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _readonly(self.coefficients).reshape(-1))
        object.__setattr__(self, "durations", _readonly(self.durations).reshape(-1))
        if np.any(self.durations <= 0):
            raise ValueError("segment durations must be positive")
        expect = CHANNELS * self.segments * (self.order + 1)
        if self.coefficients.size != expect:
            raise ValueError(
                f"coefficient vector has size {self.coefficients.size}, expected {expect}")

    @property
    def segments(self) -> int:
        return self.durations.size

    @property
    def total_duration(self) -> float:
        return float(np.sum(self.durations))

    def channel_coeffs(self, seg: int, ch: int) -> np.ndarray:
        n1 = self.order + 1
        start = (seg * CHANNELS + ch) * n1
        return self.coefficients[start:start + n1]

    def locate(self, t: float) -> tuple[int, float, bool]:
        """Segment index and local time for t; flags out-of-range clamping.

        Right-continuous at junctions: an interior boundary belongs to the
        segment that starts there.
        """
        total = self.total_duration
        clamped = t < 0.0 or t > total
        t = min(max(t, 0.0), total)
        ends = np.cumsum(self.durations)
        seg = int(np.searchsorted(ends, t, side="right"))
        if seg >= self.segments:
            seg = self.segments - 1
        start = float(ends[seg] - self.durations[seg])
        return seg, t - start, clamped

    def to_json_dict(self) -> dict:
        return {
            "schema": SPLINE_SCHEMA,
            "order": int(self.order),
            "segments": int(self.segments),
            "durations": [float(d) for d in self.durations],
            "coefficients": [float(c) for c in self.coefficients],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "PolySpline":
        if data.get("schema", SPLINE_SCHEMA) != SPLINE_SCHEMA:
            raise ValueError(f"unsupported spline schema {data.get('schema')!r}")
        spline = cls(np.array(data["coefficients"], dtype=float),
                     np.array(data["durations"], dtype=float),
                     order=int(data["order"]))
        if spline.segments != int(data["segments"]):
            raise ValueError("segment count does not match durations")
        return spline

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolySpline":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QpSystem:
    """Assembled quadratic program: snap cost H with constraints A c = b."""

    h: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h", _readonly(self.h))
        object.__setattr__(self, "a", _readonly(self.a))
        object.__setattr__(self, "b", _readonly(self.b).reshape(-1))
        if self.h.shape[0] != self.h.shape[1]:
            raise ValueError("H must be square")
        if not np.allclose(self.h, self.h.T):
            raise ValueError("H must be symmetric")
        if np.linalg.eigvalsh(self.h).min() < -1e-9:
            raise ValueError("H must be positive semidefinite")
        if self.a.shape != (self.b.size, self.h.shape[0]):
            raise ValueError("A and b dimensions must match H")

    def solve(self) -> np.ndarray:
        return solve_minsnap(self.h, self.a, self.b)


def build_qp(w: WaypointSet, durations: np.ndarray, order: int = 7,
             yaw_rate_weight: float = 1.0) -> QpSystem:
    """Snap cost and constraint system for one waypoint problem."""
    h = build_snap_cost(order, durations, yaw_rate_weight)
    a, b = build_constraints(w, durations, order)
    return QpSystem(h, a, b)


def allocate_times(w: WaypointSet, avg_speed: float, floor: float = 0.1) -> np.ndarray:
    """Straight-path distance over average speed per segment, floored."""
    if avg_speed <= 0:
        raise ValueError("avg_speed must be positive")
    dists = np.linalg.norm(np.diff(w.positions, axis=0), axis=1)
    return np.maximum(dists / avg_speed, floor)


def poly_eval_derivs(coeffs: np.ndarray, tau: float, highest: int) -> np.ndarray:
    """Value and derivatives 1..highest of a monomial polynomial at tau.

    Horner recurrences for all orders in one sweep; coeffs may be (n+1,) or
    (n+1, channels) for simultaneous evaluation.
    """
    regs = [np.zeros_like(coeffs[0], dtype=float) for _ in range(highest + 1)]
    for a in coeffs[::-1]:
        for d in range(highest, 0, -1):
            regs[d] = regs[d] * tau + regs[d - 1]
        regs[0] = regs[0] * tau + a
    fact = 1.0
    out = [regs[0]]
    for d in range(1, highest + 1):
        fact *= d
        out.append(regs[d] * fact)
    return np.array(out)


def eval_spline(spline: PolySpline, t: float) -> FlatState:
    """Flat state of the spline at time t (clamped to the time range).

    Use PolySpline.locate to observe whether clamping occurred.
    """
    seg, tau, _ = spline.locate(t)
    n1 = spline.order + 1
    base = seg * CHANNELS * n1
    pos_coeffs = spline.coefficients[base:base + 3 * n1].reshape(3, n1).T
    pos = poly_eval_derivs(pos_coeffs, tau, 4)          # (5, 3)
    yaw = poly_eval_derivs(spline.coefficients[base + 3 * n1:base + 4 * n1], tau, 1)
    return FlatState(pos[0], pos[1], pos[2], pos[3], pos[4],
                     float(yaw[0]), float(yaw[1]))


def deriv_row(order: int, deriv: int, tau: float) -> np.ndarray:
    """Row r with r @ coeffs = d^deriv/dt^deriv of the polynomial at tau."""
    row = np.zeros(order + 1)
    for j in range(deriv, order + 1):
        fall = math.factorial(j) // math.factorial(j - deriv)
        row[j] = fall * tau ** (j - deriv)
    return row


def snap_cost_block(order: int, duration: float) -> np.ndarray:
    """Gram matrix of the squared 4th derivative over one segment."""
    n1 = order + 1
    h = np.zeros((n1, n1))
    for k in range(4, n1):
        fk = math.factorial(k) // math.factorial(k - 4)
        for l in range(4, n1):
            fl = math.factorial(l) // math.factorial(l - 4)
            h[k, l] = fk * fl * duration ** (k + l - 7) / (k + l - 7)
    return h


def yaw_rate_cost_block(order: int, duration: float) -> np.ndarray:
    """Gram matrix of the squared 1st derivative over one segment."""
    n1 = order + 1
    h = np.zeros((n1, n1))
    for k in range(1, n1):
        for l in range(1, n1):
            h[k, l] = k * l * duration ** (k + l - 1) / (k + l - 1)
    return h


def build_snap_cost(order: int, durations: np.ndarray,
                    yaw_rate_weight: float = 1.0) -> np.ndarray:
    """Block-diagonal quadratic cost over the full coefficient vector."""
    if order < 4:
        raise ValueError("order must be at least 4 for a snap cost")
    durations = np.asarray(durations, dtype=float)
    n1 = order + 1
    dim = CHANNELS * durations.size * n1
    h = np.zeros((dim, dim))
    for seg, t_seg in enumerate(durations):
        pos_block = snap_cost_block(order, float(t_seg))
        yaw_block = yaw_rate_weight * yaw_rate_cost_block(order, float(t_seg))
        for ch in range(CHANNELS):
            start = (seg * CHANNELS + ch) * n1
            block = yaw_block if ch == 3 else pos_block
            h[start:start + n1, start:start + n1] = block
    return h


def build_constraints(w: WaypointSet, durations: np.ndarray,
                      order: int) -> tuple[np.ndarray, np.ndarray]:
    """Equality constraints A c = b for keyframes, rest ends and continuity.

    Per channel: interpolation of every keyframe at segment boundaries,
    zero derivatives at the trajectory start and end (up to jerk for
    position, yaw rate for yaw), and matching derivatives across interior
    junctions up to the same orders.
    """
    durations = np.asarray(durations, dtype=float)
    m = durations.size
    if w.count != m + 1:
        raise ValueError(f"{w.count} keyframes inconsistent with {m} segments")
    n1 = order + 1
    dim = CHANNELS * m * n1
    rows: list[np.ndarray] = []
    vals: list[float] = []

    def channel_row(seg: int, ch: int, deriv: int, tau: float) -> np.ndarray:
        row = np.zeros(dim)
        start = (seg * CHANNELS + ch) * n1
        row[start:start + n1] = deriv_row(order, deriv, tau)
        return row

    def keyframe_value(idx: int, ch: int) -> float:
        return float(w.positions[idx, ch]) if ch < 3 else float(w.yaws[idx])

    for ch in range(CHANNELS):
        top = 3 if ch < 3 else 1  # highest constrained derivative
        for seg in range(m):
            rows.append(channel_row(seg, ch, 0, 0.0))
            vals.append(keyframe_value(seg, ch))
            rows.append(channel_row(seg, ch, 0, float(durations[seg])))
            vals.append(keyframe_value(seg + 1, ch))
        for deriv in range(1, top + 1):
            rows.append(channel_row(0, ch, deriv, 0.0))
            vals.append(0.0)
            rows.append(channel_row(m - 1, ch, deriv, float(durations[m - 1])))
            vals.append(0.0)
        for seg in range(m - 1):
            for deriv in range(1, top + 1):
                row = channel_row(seg, ch, deriv, float(durations[seg])) \
                    - channel_row(seg + 1, ch, deriv, 0.0)
                rows.append(row)
                vals.append(0.0)

    a = np.array(rows)
    b = np.array(vals)
    rank = np.linalg.matrix_rank(a)
    if rank < a.shape[0]:
        a, b = _drop_redundant_rows(a, b)
        if np.linalg.matrix_rank(a) < a.shape[0]:
            raise ConstraintRankError(
                "constraint system rank-deficient after redundancy elimination")
    return a, b


def _drop_redundant_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep a maximal independent subset of rows (greedy Gram-Schmidt)."""
    kept: list[int] = []
    basis: list[np.ndarray] = []
    for i, row in enumerate(a):
        res = row.astype(float).copy()
        for q in basis:
            res -= (q @ res) * q
        norm = np.linalg.norm(res)
        if norm > 1e-10 * max(1.0, np.linalg.norm(row)):
            basis.append(res / norm)
            kept.append(i)
    return a[kept], b[kept]


def solve_minsnap(h: np.ndarray, a: np.ndarray, b: np.ndarray,
                  residual_tol: float = 1e-8) -> np.ndarray:
    """Coefficients minimizing c^T H c subject to A c = b via the KKT system.

    A singular saddle matrix (H directions unconstrained by A) is retried
    with a 1e-9 Tikhonov term on H.
    """
    n = h.shape[0]
    m = a.shape[0]

    def attempt(h_eff: np.ndarray) -> np.ndarray | None:
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = 2.0 * h_eff
        kkt[:n, n:] = a.T
        kkt[n:, :n] = a
        rhs = np.concatenate([np.zeros(n), b])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        # One refinement pass tightens the feasibility residual.
        sol += np.linalg.solve(kkt, rhs - kkt @ sol)
        c = sol[:n]
        if not np.isfinite(c).all():
            return None
        if np.max(np.abs(a @ c - b)) > residual_tol:
            return None
        return c

    c = attempt(h)
    if c is None:
        c = attempt(h + 1e-9 * np.eye(n))
    if c is None:
        raise SingularSystemError("KKT system unsolvable even after regularization")
    return c


def plan_minsnap(w: WaypointSet, avg_speed: float = 2.0, order: int = 7,
                 yaw_rate_weight: float = 1.0) -> PolySpline:
    """Waypoints to minimum-snap spline: allocate times, assemble, solve."""
    if w.times is not None:
        durations = np.diff(w.times)
        if np.any(durations <= 0):
            raise ValueError("waypoint times must be strictly increasing")
    else:
        durations = allocate_times(w, avg_speed)
    h = build_snap_cost(order, durations, yaw_rate_weight)
    a, b = build_constraints(w, durations, order)
    coeffs = solve_minsnap(h, a, b)
    return PolySpline(coeffs, durations, order=order)
