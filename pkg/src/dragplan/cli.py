"""Command-line pipeline: simulate, minsnap, gen-data, train, plan, eval.

Every command accepts --config (flat key-value file, see README) and
--seed, prints the resolved-config hash for reproducibility, and exits
with 0 on success, 2 on configuration errors, 3 on numeric failures and 4
on I/O errors. All artifacts are byte-identical for identical config and
seed, independent of worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import multiprocessing
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mlp
from .control import SingularThrustError
from .params import (
    ConfigError,
    Se3Gains,
    VehicleParams,
    config_hash,
    parse_config_file,
    se3_gains_from_config,
    vehicle_params_from_config,
)
from .planner import (
    PgdConfig,
    ProjectionConditionError,
    plan_drag_aware,
)
from .rollout import (
    TrackingCostConfig,
    generate_dataset,
    record_seed,
    sample_waypoints,
    simulate_closed_loop,
    tracking_cost,
)
from .spline import (
    ConstraintRankError,
    PolySpline,
    SingularSystemError,
    WaypointSet,
    eval_spline,
    plan_minsnap,
)
from .vehicle import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_NUMERIC_ERRORS = (DivergenceError, SingularThrustError, SingularSystemError,
                   ConstraintRankError, ProjectionConditionError,
                   np.linalg.LinAlgError, FloatingPointError)


def _fmt(x) -> str:
    """Deterministic CSV cell formatting (shortest exact float repr)."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def load_waypoints_file(path: str | Path) -> WaypointSet:
    """Waypoints JSON: {"keyframes": [[x, y, z, yaw], ...], "times": [...]?}."""
    data = json.loads(Path(path).read_text())
    frames = np.array(data["keyframes"], dtype=float)
    if frames.ndim != 2 or frames.shape[1] != 4:
        raise ConfigError(f"{path}: keyframes must be rows of [x, y, z, yaw]")
    times = np.array(data["times"], dtype=float) if "times" in data else None
    return WaypointSet(frames[:, :3], frames[:, 3], times=times)


def _load_config(args) -> dict:
    cfg = parse_config_file(args.config) if args.config else {}
    return cfg


def _resolved(args, cfg: dict, extra: dict) -> dict:
    resolved = dict(cfg)
    resolved.update(extra)
    resolved["seed"] = getattr(args, "seed", 0)
    return resolved


def _tracking_config(cfg: dict, args) -> TrackingCostConfig:
    rho = getattr(args, "rho_bar", None)
    dt = getattr(args, "dt", None)
    return TrackingCostConfig(
        rho_bar=float(rho if rho is not None else cfg.get("rho_bar", 0.0)),
        error_weights=(float(cfg.get("w_pos", 1.0)), float(cfg.get("w_vel", 0.1))),
        dt=float(dt if dt is not None else cfg.get("dt", 0.01)),
        cost_cap=float(cfg.get("cost_cap", 1e4)),
        crash_label_policy=str(cfg.get("crash_label_policy", "cap")),
    )


def _avg_speed(cfg: dict, args) -> float:
    v = getattr(args, "avg_speed", None)
    return float(v if v is not None else cfg.get("avg_speed", 2.0))


def _order(cfg: dict) -> int:
    return int(cfg.get("order", 7))


def _print_config(resolved: dict) -> None:
    print(f"config {config_hash(resolved)}")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    params = vehicle_params_from_config(cfg)
    gains = se3_gains_from_config(cfg)
    tcfg = _tracking_config(cfg, args)
    _print_config(_resolved(args, cfg, {"command": "simulate", "spline": args.spline}))
    spline = PolySpline.load(args.spline)
    trace = simulate_closed_loop(
        lambda t: eval_spline(spline, t), spline.total_duration, tcfg.dt,
        gains, params)
    ref_names = [f"ref_{n}_{ax}" for n in ("p", "v", "a", "j", "s") for ax in "xyz"] \
        + ["ref_yaw", "ref_yaw_rate"]
    header = ["time", *ref_names, "act_px", "act_py", "act_pz",
              "act_vx", "act_vy", "act_vz", "act_yaw", "act_wx", "act_wy",
              "act_wz", "u_thrust", "u_tx", "u_ty", "u_tz", "saturated"]
    with open(args.out, "w") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(trace.times.size):
            row = [trace.times[k], *trace.reference[k], *trace.position[k],
                   *trace.velocity[k], trace.yaw[k], *trace.body_rates[k],
                   *trace.control[k], bool(trace.saturated[k])]
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    if trace.crashed:
        print(f"simulation diverged after {trace.times.size} samples", file=sys.stderr)
    print(f"wrote {trace.times.size} rows to {args.out}")
    return EXIT_OK


def cmd_minsnap(args) -> int:
    cfg = _load_config(args)
    avg_speed = _avg_speed(cfg, args)
    _print_config(_resolved(args, cfg, {"command": "minsnap", "avg_speed": avg_speed}))
    w = load_waypoints_file(args.waypoints)
    spline = plan_minsnap(w, avg_speed=avg_speed, order=_order(cfg),
                          yaw_rate_weight=float(cfg.get("yaw_rate_weight", 1.0)))
    spline.save(args.out)
    print(f"wrote spline ({spline.segments} segments, order {spline.order}) to {args.out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    params = vehicle_params_from_config(cfg)
    gains = se3_gains_from_config(cfg)
    tcfg = _tracking_config(cfg, args)
    avg_speed = _avg_speed(cfg, args)
    _print_config(_resolved(args, cfg, {
        "command": "gen-data", "count": args.count, "rho_bar": tcfg.rho_bar,
        "avg_speed": avg_speed}))
    summary = generate_dataset(args.count, tcfg, avg_speed, args.out,
                               seed=args.seed, workers=args.workers,
                               gains=gains, params=params, order=_order(cfg))
    print(f"wrote {summary['written']} records to {args.out} "
          f"(crash rate {summary['crash_rate']:.4f}, backend {summary['backend']})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tc = mlp.TrainConfig(
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        momentum=args.momentum, epochs=args.epochs, split=args.split,
        seed=args.seed, label_transform=args.label_transform)
    _print_config(_resolved(args, cfg, {
        "command": "train", "epochs": tc.epochs, "batch_size": tc.batch_size,
        "learning_rate": tc.learning_rate, "momentum": tc.momentum,
        "split": tc.split, "label_transform": tc.label_transform,
        "data": str(args.data)}))
    model, history = mlp.train(args.data, tc)
    mlp.save_checkpoint(model, args.out)
    mlp.write_history_csv(history, str(args.out) + ".history.csv")
    best = min(h[2] for h in history)
    print(f"wrote checkpoint to {args.out} (best val MSE {best:.6g}, "
          f"snap_weight {model.snap_weight:.6g})")
    return EXIT_OK


def _pgd_config(cfg: dict, args) -> PgdConfig:
    return PgdConfig(
        max_iters=int(getattr(args, "max_iters", None) or cfg.get("pgd_max_iters", 30)),
        step_size=float(getattr(args, "step_size", None) or cfg.get("pgd_step_size", 1.0)),
        tolerance=float(getattr(args, "tolerance", None) or cfg.get("pgd_tolerance", 1e-6)),
    )


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    params = vehicle_params_from_config(cfg)
    avg_speed = _avg_speed(cfg, args)
    pgd = _pgd_config(cfg, args)
    _print_config(_resolved(args, cfg, {
        "command": "plan", "avg_speed": avg_speed, "max_iters": pgd.max_iters,
        "checkpoint": str(args.checkpoint)}))
    model = mlp.load_checkpoint(args.checkpoint)
    if args.snap_weight is not None:
        model.snap_weight = args.snap_weight
    w = load_waypoints_file(args.waypoints)
    result = plan_drag_aware(w, model, pgd, avg_speed=avg_speed,
                             order=_order(cfg), params=params)
    result.spline.save(args.out)
    log_path = args.iters_log or str(args.out) + ".iters.csv"
    with open(log_path, "w") as fh:
        fh.write("iter,objective,step,residual,pg_norm\n")
        for row in result.iterations:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    if result.warning:
        print(f"warning: {result.warning}", file=sys.stderr)
    print(f"wrote plan to {args.out} (objective {result.objective0:.6g} -> "
          f"{result.objective:.6g} at iter {result.best_iter})")
    return EXIT_OK


@dataclass
class EvalReport:
    """Per-trajectory true costs of both planners plus aggregates."""

    rows: list          # (index, seed, minsnap_cost, dragaware_cost, ratio,
                        #  minsnap_crashed, dragaware_crashed)
    median_ratio: float
    mean_ratio: float
    q1_ratio: float
    q3_ratio: float
    top_decile_mean_reduction: float

    @classmethod
    def from_rows(cls, rows: list) -> "EvalReport":
        ratios = np.array([r[4] for r in rows])
        ms_costs = np.array([r[2] for r in rows])
        n_top = max(1, math.ceil(0.1 * len(rows)))
        hardest = np.argsort(-ms_costs)[:n_top]
        reduction = float(np.mean(1.0 - ratios[hardest]))
        return cls(rows, float(np.median(ratios)), float(np.mean(ratios)),
                   float(np.quantile(ratios, 0.25)), float(np.quantile(ratios, 0.75)),
                   reduction)


def _eval_case(index: int, seed: int, model: mlp.MlpModel, tcfg: TrackingCostConfig,
               gains: Se3Gains, params: VehicleParams, avg_speed: float,
               pgd: PgdConfig, order: int):
    case_seed = record_seed(seed, index)
    sampled = sample_waypoints(case_seed)
    w = WaypointSet(sampled.positions, np.zeros(sampled.count))
    ms_spline = plan_minsnap(w, avg_speed=avg_speed, order=order)
    ms_cost, ms_crashed, ms_series = tracking_cost(ms_spline, tcfg, gains, params)
    result = plan_drag_aware(w, model, pgd, avg_speed=avg_speed, order=order,
                             params=params)
    da_cost, da_crashed, da_series = tracking_cost(result.spline, tcfg, gains, params)
    ratio = da_cost / ms_cost
    row = (index, case_seed, ms_cost, da_cost, ratio, ms_crashed, da_crashed)
    return row, ms_series, da_series


def evaluate_planner(count: int, model: mlp.MlpModel, tcfg: TrackingCostConfig,
                     gains: Se3Gains, params: VehicleParams, avg_speed: float,
                     seed: int, pgd: PgdConfig = PgdConfig(), order: int = 7,
                     workers: int = 1):
    """Fresh zero-yaw evaluation of drag-aware vs minimum-snap true costs.

    Returns (EvalReport, worst_case) where worst_case carries the
    cumulative-error time series of the hardest minsnap instance.
    """
    jobs = [(i, seed, model, tcfg, gains, params, avg_speed, pgd, order)
            for i in range(count)]
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            outcomes = pool.starmap(_eval_case, jobs,
                                    chunksize=max(1, count // (workers * 4)))
    else:
        outcomes = [_eval_case(*job) for job in jobs]
    outcomes.sort(key=lambda item: item[0][0])
    rows = [item[0] for item in outcomes]
    report = EvalReport.from_rows(rows)
    worst_idx = int(np.argmax([r[2] for r in rows]))
    _, ms_series, da_series = outcomes[worst_idx]
    worst_case = {
        "index": worst_idx,
        "dt": tcfg.dt,
        "minsnap_cumulative": np.cumsum(ms_series) * tcfg.dt,
        "dragaware_cumulative": np.cumsum(da_series) * tcfg.dt,
    }
    return report, worst_case


def write_eval_outputs(report: EvalReport, worst_case: dict, prefix: str) -> None:
    with open(f"{prefix}_report.csv", "w") as fh:
        fh.write("index,seed,minsnap_true_cost,dragaware_true_cost,ratio,"
                 "minsnap_crashed,dragaware_crashed\n")
        for row in report.rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(f"{prefix}_summary.csv", "w") as fh:
        fh.write("median_ratio,mean_ratio,q1_ratio,q3_ratio,top_decile_mean_reduction\n")
        fh.write(",".join(_fmt(v) for v in (
            report.median_ratio, report.mean_ratio, report.q1_ratio,
            report.q3_ratio, report.top_decile_mean_reduction)) + "\n")
    ratios = np.array([r[4] for r in report.rows])
    with open(f"{prefix}_ratio_quantiles.csv", "w") as fh:
        fh.write("quantile,ratio\n")
        for q in (0.0, 0.25, 0.5, 0.75, 1.0):
            fh.write(f"{q},{_fmt(float(np.quantile(ratios, q)))}\n")
    ms = worst_case["minsnap_cumulative"]
    da = worst_case["dragaware_cumulative"]
    dt = worst_case["dt"]
    with open(f"{prefix}_worst_error.csv", "w") as fh:
        fh.write("time,minsnap_cumulative_error,dragaware_cumulative_error\n")
        for k in range(max(ms.size, da.size)):
            ms_v = ms[min(k, ms.size - 1)]
            da_v = da[min(k, da.size - 1)]
            fh.write(f"{_fmt(k * dt)},{_fmt(ms_v)},{_fmt(da_v)}\n")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    params = vehicle_params_from_config(cfg)
    gains = se3_gains_from_config(cfg)
    tcfg = _tracking_config(cfg, args)
    avg_speed = _avg_speed(cfg, args)
    pgd = _pgd_config(cfg, args)
    _print_config(_resolved(args, cfg, {
        "command": "eval", "count": args.count, "rho_bar": tcfg.rho_bar,
        "avg_speed": avg_speed, "checkpoint": str(args.checkpoint)}))
    model = mlp.load_checkpoint(args.checkpoint)
    report, worst = evaluate_planner(args.count, model, tcfg, gains, params,
                                     avg_speed, args.seed, pgd,
                                     order=_order(cfg), workers=args.workers)
    write_eval_outputs(report, worst, args.out_prefix)
    print(f"median ratio {report.median_ratio:.4f}, mean {report.mean_ratio:.4f}, "
          f"top-decile reduction {report.top_decile_mean_reduction:.1%}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dragplan",
        description="Drag-aware quadrotor trajectory generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key-value config file")
        sp.add_argument("--seed", type=int, default=0, help="master RNG seed")

    sp = sub.add_parser("simulate", help="dump a closed-loop rollout of a spline to CSV")
    common(sp)
    sp.add_argument("--spline", required=True, help="PolySpline JSON file")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.add_argument("--dt", type=float, help="override controller step")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("minsnap", help="solve a minimum-snap spline for waypoints")
    common(sp)
    sp.add_argument("--waypoints", required=True, help="waypoints JSON file")
    sp.add_argument("--out", required=True, help="output spline JSON path")
    sp.add_argument("--avg-speed", type=float, help="time-allocation speed (m/s)")
    sp.set_defaults(func=cmd_minsnap)

    sp = sub.add_parser("gen-data", help="generate a labeled trajectory dataset")
    common(sp)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out", required=True, help="output JSONL path")
    sp.add_argument("--rho-bar", type=float, help="control-effort weight")
    sp.add_argument("--avg-speed", type=float)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the tracking-cost network")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset JSONL path")
    sp.add_argument("--out", required=True, help="checkpoint JSON path")
    sp.add_argument("--epochs", type=int, default=1000)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--learning-rate", type=float, default=1e-3)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--split", type=float, default=0.8)
    sp.add_argument("--label-transform", choices=("log1p", "identity"),
                    default="log1p")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("plan", help="drag-aware plan from a trained checkpoint")
    common(sp)
    sp.add_argument("--waypoints", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output spline JSON path")
    sp.add_argument("--iters-log", help="iteration log CSV (default <out>.iters.csv)")
    sp.add_argument("--avg-speed", type=float)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--tolerance", type=float)
    sp.add_argument("--snap-weight", type=float,
                    help="override the checkpoint smoothness balance")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("eval", help="compare drag-aware vs minsnap true costs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--out-prefix", required=True)
    sp.add_argument("--rho-bar", type=float)
    sp.add_argument("--avg-speed", type=float)
    sp.add_argument("--dt", type=float)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--tolerance", type=float)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, KeyError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
