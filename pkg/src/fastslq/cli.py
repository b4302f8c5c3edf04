"""Command line front end.

Three subcommands share a JSON config file:

* ``solve``   one open-loop solve; trajectory CSV + report JSON
* ``mpc``     closed-loop simulation; log CSV + summary JSON
* ``bench``   partition/thread scaling grid; table on stdout + CSV/JSON

Exit codes: 0 success (and convergence for ``solve``), 1 usage or
configuration error, 2 non-convergence.  CSV files start with the
versioned comment line ``# fastslq-csv v1`` followed by a named header
row; apart from timing columns they are deterministic for fixed
settings.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._jit import resolve_engine
from .bench import DEFAULT_REPEATS, DEFAULT_WARMUP, run_benchmark
from .errors import ConfigError, FastSlqError
from .integrate import IntegratorSettings
from .models import (
    PlanarLeggedModel,
    TrotTask,
    TrotWeights,
    make_lti_problem,
    make_planar_trot_problem,
    reference_input_policy,
    trot_gait,
)
from .mpc import Disturbance, MpcSettings, run_closed_loop, start_mpc
from .problem import ModeSchedule
from .solver import SolverSettings, solve

CSV_VERSION_LINE = "# fastslq-csv v1"


# --------------------------------------------------------------------------
# config loading


def load_config(path) -> dict:
    """Parse a JSON config file; every failure becomes a ConfigError."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(cfg).__name__}")
    return cfg


def _dataclass_from_dict(cls, data: dict, label: str):
    """Build a settings dataclass from a config section, checking keys."""
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{label}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    for key in ("line_search_alphas",):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    for key in (
        "com_position",
        "com_velocity",
        "stance_foot",
        "swing_foot",
        "force",
        "foot_velocity",
    ):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from exc


def build_solver_settings(cfg: dict, args=None) -> SolverSettings:
    """SolverSettings from the config's ``solver`` section plus CLI flags."""
    section = dict(cfg.get("solver", {}))
    integrator_cfg = section.pop("integrator", None)
    settings = _dataclass_from_dict(SolverSettings, section, "solver")
    if integrator_cfg is not None:
        settings = replace(
            settings,
            integrator=_dataclass_from_dict(IntegratorSettings, integrator_cfg, "solver.integrator"),
        )
    if args is not None:
        if getattr(args, "threads", None) is not None:
            threads = int(args.threads)
            settings = replace(settings, num_threads=threads, parallel_backward=threads > 1)
        if getattr(args, "sequential_backward", False):
            settings = replace(settings, parallel_backward=False)
        engine = getattr(args, "engine", None)
        if engine in ("numba", "numpy"):
            settings = replace(settings, use_numba=engine == "numba")
    return settings


def build_problem(cfg: dict):
    """(problem, gait-or-None) from the config's ``problem`` section."""
    section = cfg.get("problem")
    if not isinstance(section, dict):
        raise ConfigError("config needs a 'problem' object")
    kind = section.get("type")
    if kind == "planar_trot":
        return _build_planar(section)
    if kind == "lti":
        return _build_lti(section), None
    raise ConfigError(f"problem.type must be 'planar_trot' or 'lti', got {kind!r}")


def _build_planar(section: dict):
    gait = trot_gait(float(section.get("phase_duration", 0.4)))
    task = TrotTask(
        kind=section.get("task", "regulation"),
        x_goal=float(section.get("x_goal", 0.0)),
        stride=float(section.get("stride", 0.35)),
    )
    weights = _dataclass_from_dict(
        TrotWeights, section.get("weights", {}), "problem.weights"
    )
    model = _dataclass_from_dict(
        PlanarLeggedModel, section.get("model", {}), "problem.model"
    )
    x0 = None
    if "x0" in section:
        x0 = np.asarray(section["x0"], dtype=float)
    try:
        problem = make_planar_trot_problem(
            gait=gait,
            task=task,
            weights=weights,
            model=model,
            num_modes=int(section.get("num_modes", 4)),
            t0=float(section.get("t0", 0.0)),
            swing_apex=float(section.get("swing_apex", 0.1)),
            x0=x0,
        )
    except (ValueError, FastSlqError) as exc:
        raise ConfigError(f"problem: {exc}") from exc
    return problem, gait


def _build_lti(section: dict):
    def arr(key, required=True):
        if key not in section:
            if required:
                raise ConfigError(f"problem: lti config needs '{key}'")
            return None
        return np.asarray(section[key], dtype=float)

    sched_cfg = section.get("schedule")
    if not isinstance(sched_cfg, dict):
        raise ConfigError("problem: lti config needs a 'schedule' object")
    try:
        schedule = ModeSchedule(
            tuple(sched_cfg.get("switching_times", ())),
            tuple(sched_cfg.get("subsystem_ids", ())),
        )
    except ValueError as exc:
        raise ConfigError(f"problem.schedule: {exc}") from exc

    constraints = None
    if "constraints" in section and section["constraints"] is not None:
        raw = section["constraints"]
        if not isinstance(raw, list):
            raise ConfigError("problem.constraints must be a list (one entry per subsystem)")
        constraints = []
        for entry in raw:
            if entry is None:
                constraints.append(None)
            else:
                try:
                    constraints.append(
                        (
                            np.asarray(entry["C"], dtype=float),
                            np.asarray(entry["D"], dtype=float),
                            np.asarray(entry["e"], dtype=float),
                        )
                    )
                except (KeyError, TypeError) as exc:
                    raise ConfigError(f"problem.constraints entry: {exc}") from exc

    try:
        return make_lti_problem(
            arr("A"),
            arr("B"),
            arr("Q"),
            arr("R"),
            arr("Q_f"),
            arr("x0"),
            schedule,
            constraints=constraints,
            c0=arr("c0", required=False),
            x_ref=arr("x_ref", required=False),
            u_ref=arr("u_ref", required=False),
        )
    except FastSlqError as exc:
        raise ConfigError(f"problem: {exc}") from exc


def _state_delta(problem, spec: dict, label: str) -> np.ndarray:
    """Disturbance vector from either a raw list or named components."""
    delta = np.zeros(problem.state_dim)
    if "delta" in spec:
        vec = np.asarray(spec["delta"], dtype=float)
        if vec.shape != (problem.state_dim,):
            raise ConfigError(f"{label}: delta length {vec.size} != state dim {problem.state_dim}")
        return vec
    names = problem.state_names or tuple(f"x{i}" for i in range(problem.state_dim))
    for key, value in spec.items():
        if key == "time":
            continue
        if key not in names:
            raise ConfigError(f"{label}: unknown state component {key!r}")
        delta[names.index(key)] = float(value)
    return delta


def parse_disturbances(cfg: dict, problem, extra_specs=()) -> tuple:
    """Disturbance list from config plus ``--disturbance`` flag values."""
    specs = list(cfg.get("mpc", {}).get("disturbances", []))
    for text in extra_specs:
        specs.append(_parse_disturbance_flag(text))
    out = []
    for i, spec in enumerate(specs):
        if not isinstance(spec, dict) or "time" not in spec:
            raise ConfigError(f"disturbance #{i}: needs a 'time' key")
        out.append(Disturbance(float(spec["time"]), _state_delta(problem, spec, f"disturbance #{i}")))
    return tuple(sorted(out, key=lambda d: d.time))


def _parse_disturbance_flag(text: str) -> dict:
    """``TIME:NAME=VAL[,NAME=VAL...]`` into a disturbance spec dict."""
    try:
        time_part, rest = text.split(":", 1)
        spec = {"time": float(time_part)}
        for item in rest.split(","):
            name, value = item.split("=", 1)
            spec[name.strip()] = float(value)
        return spec
    except ValueError as exc:
        raise ConfigError(
            f"bad --disturbance {text!r} (want TIME:NAME=VAL[,NAME=VAL...])"
        ) from exc


def build_mpc_settings(cfg: dict, solver_settings: SolverSettings) -> MpcSettings:
    section = dict(cfg.get("mpc", {}))
    section.pop("disturbances", None)
    runtime_only = {"duration", "control_period", "replan_every"}
    section = {k: v for k, v in section.items() if k not in runtime_only}
    settings = _dataclass_from_dict(MpcSettings, section, "mpc")
    return replace(settings, solver=solver_settings)


# --------------------------------------------------------------------------
# artifact writers


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _column_names(problem) -> tuple:
    states = problem.state_names or tuple(f"x{i}" for i in range(problem.state_dim))
    inputs = problem.input_names or tuple(f"u{i}" for i in range(problem.input_dim))
    return states, inputs


def write_trajectory_csv(path, problem, traj) -> None:
    states, inputs = _column_names(problem)
    times, xs, us = traj.stacked()
    lines = [CSV_VERSION_LINE, ",".join(("time",) + states + inputs)]
    for k in range(times.size):
        row = [_fmt(times[k])]
        row += [_fmt(v) for v in xs[k]]
        row += [_fmt(v) for v in us[k]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_closed_loop_csv(path, problem, log) -> None:
    states, inputs = _column_names(problem)
    header = ("time",) + states + inputs + ("plan_id", "latency_ms")
    lines = [CSV_VERSION_LINE, ",".join(header)]
    for k in range(len(log.times)):
        row = [_fmt(log.times[k])]
        row += [_fmt(v) for v in log.states[k]]
        row += [_fmt(v) for v in log.inputs[k]]
        row.append(str(int(log.plan_ids[k])))
        row.append(format(float(log.latencies_ms[k]), ".3f"))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_json(path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def solve_report_payload(result, seed=None) -> dict:
    report = result.report
    payload = {
        "converged": report.converged,
        "iterations": report.iterations,
        "initial_cost": report.initial_cost,
        "final_cost": result.cost,
        "costs": list(report.costs),
        "expected_costs": list(report.expected_costs),
        "alphas": list(report.alphas),
        "step_rejections": report.step_rejections,
        "engine": report.engine,
        "timings_s": {
            "forward": list(report.forward_s),
            "lq": list(report.lq_s),
            "backward": list(report.backward_s),
            "totals": report.phase_totals(),
        },
    }
    if seed is not None:
        payload["seed"] = seed
    return payload


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    problem, _ = build_problem(cfg)
    settings = build_solver_settings(cfg, args)
    initial = reference_input_policy(problem) if problem.kernels is not None else None
    result = solve(problem, initial_policy=initial, settings=settings)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "trajectory.csv", problem, result.trajectory)
    write_json(out / "report.json", solve_report_payload(result, args.seed))

    status = "converged" if result.report.converged else "not converged"
    print(
        f"{problem.name or 'problem'}: {status} after {result.report.iterations} "
        f"iterations, cost {result.cost:.6g} (engine: {result.report.engine})"
    )
    return 0 if result.report.converged else 2


def cmd_mpc(args) -> int:
    cfg = load_config(args.config)
    problem, gait = build_problem(cfg)
    if gait is None:
        raise ConfigError("mpc needs a gait-based problem (problem.type 'planar_trot')")
    solver_settings = build_solver_settings(cfg, args)
    mpc_settings = build_mpc_settings(cfg, solver_settings)
    disturbances = parse_disturbances(cfg, problem, args.disturbance or ())

    mpc_cfg = cfg.get("mpc", {})
    duration = float(args.duration if args.duration is not None else mpc_cfg.get("duration", 5.0))
    if args.rate is not None:
        if args.rate <= 0:
            raise ConfigError("--rate must be positive")
        control_period = 1.0 / float(args.rate)
    else:
        control_period = float(mpc_cfg.get("control_period", 0.05))
    replan_every = int(mpc_cfg.get("replan_every", 1))

    state = start_mpc(problem, gait, settings=mpc_settings)
    log = run_closed_loop(
        state,
        duration,
        disturbances=disturbances,
        control_period=control_period,
        replan_every=replan_every,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_closed_loop_csv(out / "closed_loop.csv", problem, log)
    summary = log.summary()
    summary["duration_s"] = duration
    summary["control_period_s"] = control_period
    summary["engine"] = (
        "numba"
        if resolve_engine(solver_settings.use_numba) and problem.kernels is not None
        else "numpy"
    )
    if args.seed is not None:
        summary["seed"] = args.seed
    task_cfg = cfg.get("problem", {})
    if task_cfg.get("task") == "goto":
        goal = float(task_cfg.get("x_goal", 0.0))
        summary["x_goal"] = goal
        summary["goal_error_m"] = abs(float(log.states[-1][0]) - goal)
    write_json(out / "summary.json", summary)

    print(
        f"closed loop: {len(log.times)} ticks over {duration:.3g} s, "
        f"mean step rate {summary['mean_rate_hz']:.1f} Hz"
        + (", DIVERGED" if log.diverged else "")
    )
    return 2 if log.diverged else 0


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}") from exc
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"need positive integers, got {text!r}")
    return values


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else {}
    section = cfg.get("bench", {})
    partitions = args.partitions or tuple(section.get("partitions", (2, 4)))
    threads = args.threads_list or tuple(section.get("threads", (1, 2, 4)))
    repeats = args.repeats if args.repeats is not None else int(section.get("repeats", DEFAULT_REPEATS))
    warmup = args.warmup if args.warmup is not None else int(section.get("warmup", DEFAULT_WARMUP))
    if repeats < 1 or warmup < 0:
        raise ConfigError("bench needs repeats >= 1 and warmup >= 0")

    if args.engine == "both":
        engines = (True, False)
    elif args.engine == "numba":
        engines = (True,)
    elif args.engine == "numpy":
        engines = (False,)
    else:
        engines = (None,)

    base = build_solver_settings(cfg) if cfg else None
    result = run_benchmark(
        partitions=partitions,
        threads=threads,
        repeats=repeats,
        warmup=warmup,
        engines=engines,
        base_settings=base,
    )

    print(result.table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text(
        CSV_VERSION_LINE + "\n" + "\n".join(result.csv_rows()) + "\n", encoding="utf-8"
    )
    payload = result.to_dict()
    if args.seed is not None:
        payload["seed"] = args.seed
    write_json(out / "bench.json", payload)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastslq",
        description="Constrained switched-system optimal control: solve, simulate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--threads", type=int, default=None, help="solver worker threads")
        p.add_argument("--seed", type=int, default=None, help="recorded in reports")
        p.add_argument(
            "--sequential-backward",
            action="store_true",
            help="force the sequential backward sweep regardless of threads",
        )
        p.add_argument(
            "--engine",
            choices=("auto", "numba", "numpy"),
            default="auto",
            help="kernel engine (default: auto)",
        )

    p_solve = sub.add_parser("solve", help="open-loop solve from a config")
    common(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_mpc = sub.add_parser("mpc", help="closed-loop receding-horizon simulation")
    common(p_mpc)
    p_mpc.add_argument("--duration", type=float, default=None, help="simulated seconds")
    p_mpc.add_argument("--rate", type=float, default=None, help="control rate in Hz")
    p_mpc.add_argument(
        "--disturbance",
        action="append",
        default=None,
        metavar="T:NAME=VAL[,NAME=VAL...]",
        help="state kick at time T (named components); repeatable",
    )
    p_mpc.set_defaults(func=cmd_mpc)

    p_bench = sub.add_parser("bench", help="partition/thread scaling benchmark")
    common(p_bench, config_required=False)
    p_bench.add_argument("--partitions", type=_int_list, default=None, help="e.g. 2,4")
    p_bench.add_argument(
        "--threads-list", type=_int_list, default=None, metavar="THREADS", help="e.g. 1,2,4"
    )
    p_bench.add_argument("--repeats", type=int, default=None)
    p_bench.add_argument("--warmup", type=int, default=None)
    p_bench.set_defaults(func=cmd_bench)
    # bench reuses --engine with an extra choice for side-by-side runs
    for action in p_bench._actions:
        if action.dest == "engine":
            action.choices = ("auto", "numba", "numpy", "both")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FastSlqError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
