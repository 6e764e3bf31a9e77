"""Drag-aware trajectory optimization by projected gradient descent.

The objective combines the smoothness quadratic with the learned tracking
cost in label space,

    F(c) = snap_weight * c^T H c + g(c, durations),

minimized over the affine set {c : A c = b} from the minimum-snap
initialization. Steps are projected exactly back onto the constraint, so
every iterate interpolates the waypoints; Armijo backtracking keeps the
objective non-increasing and the best iterate (which may be the
initialization itself) is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mlp
from .params import VehicleParams
from .spline import (
    PolySpline,
    WaypointSet,
    allocate_times,
    build_constraints,
    build_snap_cost,
    eval_spline,
    solve_minsnap,
)

# Scale-free stationarity guard: stop when the tangential component of the
# gradient is negligible against the full gradient (fixed-point detection).
REL_STATIONARITY = 1e-6

CONDITION_LIMIT = 1e12


class ProjectionConditionError(RuntimeError):
    """A A^T too ill-conditioned for a reliable projection."""


@dataclass(frozen=True)
class PgdConfig:
    max_iters: int = 30
    step_size: float = 1.0
    backtracking: bool = True
    shrink: float = 0.5
    min_step: float = 1e-8
    tolerance: float = 1e-6
    armijo: float = 1e-4
    # Keep the plan only when the predicted tracking-cost improvement exceeds
    # this many validation RMSEs (transformed space); below that the model
    # cannot distinguish the plan from noise and min-snap is returned.
    accept_sigma: float = 0.25

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")


class AffineProjector:
    """Euclidean projection onto {c : A c = b} with a cached factorization."""

    def __init__(self, a: np.ndarray, b: np.ndarray):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        gram = self.a @ self.a.T
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > CONDITION_LIMIT:
            raise ProjectionConditionError(
                f"cond(A A^T) = {cond:.2e} exceeds {CONDITION_LIMIT:.0e}; "
                "rescale the constraint rows (e.g. shorter segment durations)")
        self._chol = np.linalg.cholesky(gram)

    def _gram_solve(self, rhs: np.ndarray) -> np.ndarray:
        y = np.linalg.solve(self._chol, rhs)
        return np.linalg.solve(self._chol.T, y)

    def project_point(self, c: np.ndarray) -> np.ndarray:
        out = c - self.a.T @ self._gram_solve(self.a @ c - self.b)
        # One refinement pass holds the residual near round-off even for
        # points far from the constraint set.
        return out - self.a.T @ self._gram_solve(self.a @ out - self.b)

    def project_tangent(self, g: np.ndarray) -> np.ndarray:
        return g - self.a.T @ self._gram_solve(self.a @ g)

    def residual(self, c: np.ndarray) -> float:
        return float(np.max(np.abs(self.a @ c - self.b)))


def project_affine(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """argmin ||x - c|| subject to A x = b (idempotent)."""
    return AffineProjector(a, b).project_point(np.asarray(c, dtype=float))


def total_cost_and_grad(c: np.ndarray, durations: np.ndarray, h: np.ndarray,
                        model: mlp.MlpModel,
                        snap_weight: float | None = None) -> tuple[float, np.ndarray]:
    """Label-space objective and its gradient in coefficient space.

    The network gradient is chain-ruled through input normalization and the
    label transform; duration features are frozen so their gradient slots
    are dropped.
    """
    c = np.asarray(c, dtype=float)
    lam = model.snap_weight if snap_weight is None else float(snap_weight)
    feats = np.concatenate([c, durations])
    out_t, grad_feats = mlp.output_and_input_gradient(model, feats)
    with np.errstate(over="ignore", invalid="ignore"):
        if model.label_transform == "log1p":
            g_val = float(np.expm1(out_t))
            d_transform = float(np.exp(out_t))
        else:
            g_val = out_t
            d_transform = 1.0
        value = lam * float(c @ h @ c) + g_val
        grad = 2.0 * lam * (h @ c) + d_transform * grad_feats[:c.size]
    return value, grad


@dataclass
class PlanResult:
    spline: PolySpline
    iterations: list
    objective0: float
    objective: float
    best_iter: int
    warning: str | None = None

    @property
    def iteration_rows(self) -> list[tuple]:
        return self.iterations


def thrust_envelope(spline: PolySpline, params: VehicleParams,
                    samples_per_segment: int = 64) -> float:
    """Peak demanded thrust of a reference relative to the rotor budget.

    Specific force plus a parasitic-drag estimate, over maximum collective
    thrust. Used to compare a plan against its min-snap initialization, not
    as an absolute feasibility certificate. Body-rate demand is not
    screened: leaving the min-snap optimum necessarily raises jerk, so a
    rate comparison would veto every reshaped plan.
    """
    e3 = np.array([0.0, 0.0, 1.0])
    peak = 0.0
    total = spline.total_duration
    n = samples_per_segment * spline.segments
    for k in range(n + 1):
        flat = eval_spline(spline, total * k / n)
        t_vec = flat.acceleration + params.gravity * e3
        drag = params.parasitic_drag * np.linalg.norm(flat.velocity) * flat.velocity
        demand = params.mass * np.linalg.norm(t_vec) + np.linalg.norm(drag)
        peak = max(peak, demand / params.max_collective_thrust)
    return float(peak)


def plan_drag_aware(w: WaypointSet, model: mlp.MlpModel,
                    cfg: PgdConfig = PgdConfig(), avg_speed: float = 2.0,
                    order: int = 7, yaw_rate_weight: float = 1.0,
                    params: VehicleParams | None = None) -> PlanResult:
    """Plan a spline whose predicted tracking cost regularizes min-snap.

    Starts from the minimum-snap solution; every iterate stays feasible.
    Returns the best-objective iterate together with the per-iteration log
    (iteration, objective, step, feasibility residual, projected-gradient
    norm). A non-finite objective at the start falls back to min-snap with
    a warning.

    When vehicle params are given, only iterates whose peak thrust demand
    stays within the min-snap envelope are eligible: the learned term
    cannot be trusted to justify a kinematically more demanding plan than
    the trajectory it is supposed to improve.
    """
    if w.times is not None:
        durations = np.diff(w.times)
    else:
        durations = allocate_times(w, avg_speed)
    h = build_snap_cost(order, durations, yaw_rate_weight)
    a, b = build_constraints(w, durations, order)
    c0 = solve_minsnap(h, a, b)
    projector = AffineProjector(a, b)

    def objective(c):
        return total_cost_and_grad(c, durations, h, model)

    rows = []
    f0, grad = objective(c0)
    if not np.isfinite(f0):
        spline = PolySpline(c0, durations, order=order)
        return PlanResult(spline, rows, f0, f0, 0,
                          warning="non-finite objective at initialization; "
                                  "returning the min-snap solution")
    c = c0
    f_curr = f0
    rows.append((0, f0, 0.0, projector.residual(c0), float("nan")))
    iterates = [(0, f0, c0)]
    start_step = cfg.step_size
    for it in range(1, cfg.max_iters + 1):
        pg = projector.project_tangent(grad)
        pg_norm = float(np.linalg.norm(pg))
        grad_norm = float(np.linalg.norm(grad))
        if pg_norm <= cfg.tolerance or pg_norm <= REL_STATIONARITY * grad_norm:
            break
        step = start_step
        accepted = False
        while step >= cfg.min_step:
            cand = projector.project_point(c - step * grad)
            f_cand, grad_cand = objective(cand)
            direction = cand - c
            if np.isfinite(f_cand) and \
                    f_cand <= f_curr + cfg.armijo * float(grad @ direction):
                accepted = True
                break
            if not cfg.backtracking:
                accepted = True  # fixed-step mode takes the step regardless
                break
            step *= cfg.shrink
        if not accepted:
            break
        c, f_curr, grad = cand, f_cand, grad_cand
        rows.append((it, f_curr, step, projector.residual(c), pg_norm))
        iterates.append((it, f_curr, c))

    # Best iterate subject to the kinematic screen: the learned term cannot
    # justify a plan that demands more peak thrust than the min-snap
    # trajectory it is meant to improve, so such iterates are not eligible.
    warning = None
    if params is not None and len(iterates) > 1:
        budget = thrust_envelope(PolySpline(c0, durations, order=order), params)
        eligible = [
            (it, f, ci) for it, f, ci in iterates
            if it == 0 or thrust_envelope(PolySpline(ci, durations, order=order),
                                          params) <= budget]
        if len(eligible) < len(iterates):
            warning = ("some iterates demand a larger thrust envelope than "
                       "min-snap and were not eligible for selection")
    else:
        eligible = iterates
    best_iter, best_f, best_c = min(eligible, key=lambda entry: entry[1])

    if best_iter != 0 and cfg.accept_sigma > 0.0 and model.val_mse > 0.0:
        y0 = mlp.forward(model, np.concatenate([c0, durations]))
        y_best = mlp.forward(model, np.concatenate([best_c, durations]))
        threshold = cfg.accept_sigma * float(np.sqrt(model.val_mse))
        if (y0 - y_best) < threshold:
            best_f, best_c, best_iter = f0, c0, 0
            warning = ("predicted improvement below the model noise floor; "
                       "keeping the min-snap solution")
    spline = PolySpline(best_c, durations, order=order)
    return PlanResult(spline, rows, f0, best_f, best_iter, warning=warning)
