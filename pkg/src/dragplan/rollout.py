"""Closed-loop rollout harness, tracking-cost labels and dataset generation.

The tracking cost of a spline is the discretization-scaled sum of weighted
position/velocity tracking error plus a control-effort term:

    cost = dt * ( sum_{k<N} (rho_bar * |u_k|^2 + e_k) + e_N )

with e_k the weighted squared position/velocity error at sample k. Rollouts
start from hover at the first keyframe. Diverged rollouts become capped
labels (or are dropped), so infeasible references are informative rather
than fatal. Dataset generation is deterministic for a fixed (seed, count)
regardless of worker count.
"""

from __future__ import annotations

import json
import math
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine
from .control import FlatState, SingularThrustError, se3_control
from .params import Se3Gains, VehicleParams
from .spline import (
    ConstraintRankError,
    PolySpline,
    SingularSystemError,
    WaypointSet,
    plan_minsnap,
)
from .vehicle import DivergenceError, QuadState, allocate_rotors, step_dynamics

DATASET_SCHEMA = "dataset-v1"


@dataclass(frozen=True)
class TrackingCostConfig:
    """Weights and policies defining the rollout cost label."""

    rho_bar: float = 0.0
    error_weights: tuple[float, float] = (1.0, 0.1)  # position, velocity
    dt: float = 0.01
    cost_cap: float = 1e4
    crash_label_policy: str = "cap"

    def __post_init__(self):
        if self.rho_bar < 0:
            raise ValueError("rho_bar must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.cost_cap <= 0:
            raise ValueError("cost_cap must be positive")
        if any(w < 0 for w in self.error_weights):
            raise ValueError("error weights must be nonnegative")
        if self.crash_label_policy not in ("cap", "drop"):
            raise ValueError("crash_label_policy must be 'cap' or 'drop'")


@dataclass(frozen=True)
class DatasetRecord:
    """One labeled trajectory: spline coefficients, durations and cost."""

    coefficients: np.ndarray
    durations: np.ndarray
    label: float
    crashed: bool
    seed: int

    def to_json_line(self) -> str:
        return json.dumps({
            "seed": int(self.seed),
            "durations": [float(d) for d in self.durations],
            "coefficients": [float(c) for c in self.coefficients],
            "label": float(self.label),
            "crashed": bool(self.crashed),
        })

    @classmethod
    def from_json_line(cls, line: str) -> "DatasetRecord":
        data = json.loads(line)
        return cls(np.array(data["coefficients"]), np.array(data["durations"]),
                   float(data["label"]), bool(data["crashed"]), int(data["seed"]))


def tracking_cost(spline: PolySpline, cfg: TrackingCostConfig, gains: Se3Gains,
                  params: VehicleParams) -> tuple[float, bool, np.ndarray]:
    """Closed-loop tracking cost of a spline under the fixed controller.

    Returns (cost, crashed, error_series) where error_series holds the
    position error norm at each sample until completion or crash. Crashes
    yield cost_cap under the default policy; all labels are capped.
    """
    w_pos, w_vel = cfg.error_weights
    err_sum, ctrl_sum, crashed, err_series = engine.run_tracking_rollout(
        spline, gains, params, cfg.dt, w_pos, w_vel)
    if crashed and cfg.crash_label_policy == "cap":
        cost = cfg.cost_cap
    else:
        cost = min(cfg.dt * (err_sum + cfg.rho_bar * ctrl_sum), cfg.cost_cap)
    return float(cost), crashed, err_series


@dataclass
class SimTrace:
    """Dense closed-loop trajectory dump aligned on controller samples."""

    times: np.ndarray
    reference: np.ndarray   # (k, 17) flat states
    position: np.ndarray
    velocity: np.ndarray
    yaw: np.ndarray
    body_rates: np.ndarray
    control: np.ndarray     # (k, 4) thrust + torques
    saturated: np.ndarray   # bool per sample
    crashed: bool


def simulate_closed_loop(ref_fn, duration: float, dt: float, gains: Se3Gains,
                         params: VehicleParams,
                         state0: QuadState | None = None) -> SimTrace:
    """Roll out the controller against an arbitrary flat-state reference.

    ref_fn maps time to FlatState. Samples land at k*dt for
    k = 0..floor(duration/dt); a diverging run truncates the trace and sets
    the crashed flag.
    """
    n_steps = engine.n_rollout_steps(duration, dt)
    ref0 = ref_fn(0.0)
    state = state0 if state0 is not None else QuadState.hover(
        params, ref0.position, ref0.yaw)
    rows = n_steps + 1
    out = SimTrace(
        times=np.zeros(rows), reference=np.zeros((rows, 17)),
        position=np.zeros((rows, 3)), velocity=np.zeros((rows, 3)),
        yaw=np.zeros(rows), body_rates=np.zeros((rows, 3)),
        control=np.zeros((rows, 4)), saturated=np.zeros(rows, dtype=bool),
        crashed=False)
    filled = 0
    for k in range(rows):
        t = k * dt
        ref = ref_fn(t)
        out.times[k] = t
        out.reference[k] = ref.as_vector()
        out.position[k] = state.position
        out.velocity[k] = state.velocity
        out.yaw[k] = state.yaw
        out.body_rates[k] = state.body_rates
        try:
            u = se3_control(state, ref, gains, params)
        except SingularThrustError:
            out.crashed = True
            break
        _, sat = allocate_rotors(u, params)
        out.control[k, 0] = u.collective_thrust
        out.control[k, 1:] = u.torques
        out.saturated[k] = sat
        filled = k + 1
        if k < n_steps:
            try:
                state = step_dynamics(state, u, dt, params)
            except DivergenceError:
                out.crashed = True
                break
    for name in ("times", "reference", "position", "velocity", "yaw",
                 "body_rates", "control", "saturated"):
        setattr(out, name, getattr(out, name)[:filled])
    return out


class WaypointSamplingError(RuntimeError):
    """Rejection sampling failed to place a keyframe (statistically unreachable)."""


def sample_waypoints(rng_seed, keyframes: int = 4, box_half_width: float = 10.0,
                     min_spacing: float = 1.0, max_spacing: float = 3.0,
                     yaw_half_range: float = math.pi / 2,
                     max_tries: int = 10_000) -> WaypointSet:
    """Random keyframes: uniform in the box, consecutive spacing in bounds.

    The first keyframe is uniform over the box; each later keyframe is
    redrawn until its distance to the previous one lies in
    [min_spacing, max_spacing]. Yaws are uniform per keyframe. Deterministic
    for a fixed seed.
    """
    rng = np.random.default_rng(rng_seed)
    lo, hi = -box_half_width, box_half_width
    points = [rng.uniform(lo, hi, 3)]
    for _ in range(keyframes - 1):
        for attempt in range(max_tries):
            cand = rng.uniform(lo, hi, 3)
            dist = float(np.linalg.norm(cand - points[-1]))
            if min_spacing <= dist <= max_spacing:
                points.append(cand)
                break
        else:
            raise WaypointSamplingError(
                f"no admissible keyframe after {max_tries} draws")
    yaws = rng.uniform(-yaw_half_range, yaw_half_range, keyframes)
    return WaypointSet(np.array(points), yaws)


def record_seed(dataset_seed: int, index: int) -> int:
    """Stable per-record seed, independent of worker layout."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1, np.uint64)[0])


def _build_record(index: int, dataset_seed: int, cfg: TrackingCostConfig,
                  avg_speed: float, order: int, gains: Se3Gains,
                  params: VehicleParams) -> tuple[int, str | None, str]:
    """Returns (index, json line or None, status in {ok, crashed, dropped, solver_failed})."""
    seed = record_seed(dataset_seed, index)
    waypoints = sample_waypoints(seed)
    try:
        spline = plan_minsnap(waypoints, avg_speed=avg_speed, order=order)
    except (SingularSystemError, ConstraintRankError):
        return index, None, "solver_failed"
    cost, crashed, _ = tracking_cost(spline, cfg, gains, params)
    if crashed and cfg.crash_label_policy == "drop":
        return index, None, "dropped"
    rec = DatasetRecord(spline.coefficients, spline.durations, cost, crashed, seed)
    return index, rec.to_json_line(), "crashed" if crashed else "ok"


def _build_record_args(args) -> tuple[int, str | None, str]:
    return _build_record(*args)


def dataset_header(count: int, seed: int, cfg: TrackingCostConfig,
                   avg_speed: float, order: int) -> str:
    return json.dumps({
        "schema": DATASET_SCHEMA,
        "count": int(count),
        "seed": int(seed),
        "rho_bar": cfg.rho_bar,
        "error_weights": list(cfg.error_weights),
        "dt": cfg.dt,
        "cost_cap": cfg.cost_cap,
        "crash_label_policy": cfg.crash_label_policy,
        "avg_speed": avg_speed,
        "order": int(order),
    })


def generate_dataset(count: int, cfg: TrackingCostConfig, avg_speed: float,
                     out_path: str | Path, seed: int, workers: int = 1,
                     gains: Se3Gains | None = None,
                     params: VehicleParams | None = None,
                     order: int = 7) -> dict:
    """Sample, solve, roll out and label `count` trajectories to a JSONL file.

    Writes one header line plus records in index order; crashed records are
    kept (capped label) or dropped per policy. Returns summary statistics,
    also written next to the dataset as CSV.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    gains = gains if gains is not None else Se3Gains()
    params = params if params is not None else VehicleParams()
    out_path = Path(out_path)

    def stream():
        args = ((i, seed, cfg, avg_speed, order, gains, params)
                for i in range(count))
        if workers > 1:
            # imap preserves index order, so records stream straight to disk
            # without buffering the whole dataset
            with multiprocessing.Pool(workers) as pool:
                chunk = max(1, min(256, count // (workers * 8) or 1))
                yield from pool.imap(_build_record_args, args, chunksize=chunk)
        else:
            for a in args:
                yield _build_record(*a)

    labels = []
    status_counts = {"ok": 0, "crashed": 0, "dropped": 0, "solver_failed": 0}
    with open(out_path, "w") as fh:
        fh.write(dataset_header(count, seed, cfg, avg_speed, order) + "\n")
        for _, line, status in stream():
            status_counts[status] += 1
            if line is not None:
                fh.write(line + "\n")
                labels.append(json.loads(line)["label"])

    labels = np.array(labels) if labels else np.zeros(0)
    quant_points = (0.0, 0.10, 0.25, 0.50, 0.75, 0.90, 1.0)
    quants = {f"q{int(q * 100):02d}": (float(np.quantile(labels, q)) if labels.size else float("nan"))
              for q in quant_points}
    summary = {
        "requested": count,
        "written": int(labels.size),
        "crashed": status_counts["crashed"] + status_counts["dropped"],
        "dropped": status_counts["dropped"],
        "solver_failed": status_counts["solver_failed"],
        "crash_rate": (status_counts["crashed"] + status_counts["dropped"]) / count,
        "backend": engine.active_backend(),
        **quants,
    }
    summary_path = out_path.with_name(out_path.name + ".summary.csv")
    with open(summary_path, "w") as fh:
        fh.write(",".join(summary.keys()) + "\n")
        fh.write(",".join(str(v) for v in summary.values()) + "\n")
    return summary


def load_dataset(path: str | Path) -> tuple[dict, list[DatasetRecord]]:
    """Read a JSONL dataset; returns (header, records)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("schema") != DATASET_SCHEMA:
        raise ValueError(f"{path}: unsupported dataset schema {header.get('schema')!r}")
    records = [DatasetRecord.from_json_line(line) for line in lines[1:] if line.strip()]
    return header, records
