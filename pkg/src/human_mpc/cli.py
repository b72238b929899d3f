"""Command line: ``run``, ``bench``, ``check`` and ``export``.

Exit codes: 0 ok, 1 failed self-check, 2 collision during a run, 3 bad
configuration or input.
"""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .bench import export_plot_data, run_scalability, run_scenario, write_run_outputs
from .costs import CollisionCostParams, collision_cost_scalar, linear_branch, logistic_branch
from .model import ControlInput, RobotState
from .monitor import MonitorConfig, check_timing, protective_stop
from .oracle import active_set_enumeration, random_stage_qp
from .prediction import HumanObservation, predict_constant_velocity
from .qp import SolverStatus, solve_qp
from .sim import Scenario, ScenarioError, builtin_spec, load_scenario, materialize, spawn_scenario, step_world

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_COLLISION = 2
EXIT_CONFIG = 3
BUILTIN_SCENARIOS = ("random_crowded_cluttered", "crossing_group")


def _resolve_scenario(name: str, seed: int | None):
    if name in BUILTIN_SCENARIOS and not Path(name).exists():
        return materialize(builtin_spec(name), seed)
    return load_scenario(name, seed)


def _cmd_run(args) -> int:
    scenario = _resolve_scenario(args.scenario, args.seed)
    if not 0.0 < args.dt <= 0.1:
        raise ScenarioError("--dt must lie in (0, 0.1]")
    run = run_scenario(scenario, dt=args.dt)
    out = Path(args.out) if args.out else Path("runs") / f"{scenario.name}-seed{scenario.rng_seed}"
    write_run_outputs(run, out)
    m = run.metrics
    ttg = "-" if m.time_to_goal is None else f"{m.time_to_goal:.1f} s"
    clearance = "-" if m.min_human_clearance is None else f"{m.min_human_clearance:.3f} m"
    print(f"{scenario.name} seed {scenario.rng_seed}: success={m.success} time_to_goal={ttg} "
          f"path={m.path_length:.2f} m min_clearance={clearance} stops={m.protective_stops} "
          f"collisions={m.collisions} mean_solve={1e3 * m.mean_solve_time:.1f} ms")
    print(f"outputs in {out}")
    return EXIT_COLLISION if m.collisions else EXIT_OK


def _parse_counts(text: str) -> list[int]:
    try:
        counts = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ScenarioError(f"--humans expects comma-separated integers, got {text!r}") from exc
    if not counts or min(counts) < 0:
        raise ScenarioError("--humans needs at least one nonnegative count")
    return counts


def _cmd_bench(args) -> int:
    counts = _parse_counts(args.humans)
    if args.cycles < 100:
        raise ScenarioError("--cycles must be at least 100")
    report = run_scalability(counts, args.cycles, seed=args.seed)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scalability.json").write_text(report.to_json())
        (out / "scalability.txt").write_text(text)
        print(f"report in {out}")
    return EXIT_OK


def _cmd_export(args) -> int:
    try:
        paths = export_plot_data(args.csv, args.out)
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{args.csv}: {exc}") from exc
    for p in paths:
        print(p)
    return EXIT_OK


# --------------------------------------------------------------------------
# self-checks


def _check_collision_cost() -> bool:
    p = CollisionCostParams()
    return (float(linear_branch(1.0, p)[0]) == 1.0 and float(logistic_branch(1.0, p)[0]) == 1.0
            and collision_cost_scalar(0.0, p)[0] == 3.5
            and abs(collision_cost_scalar(2.0, p)[0] - 2.0 / (1.0 + math.exp(5.0))) <= 1e-12
            and float(linear_branch(1.0, p)[1]) == float(logistic_branch(1.0, p)[1]) == -2.5)


def _check_prediction() -> bool:
    rng = np.random.default_rng(0)
    for _ in range(100):
        obs = HumanObservation(0, rng.uniform(-10, 10, 2), rng.uniform(-1.5, 1.5, 2))
        tr = predict_constant_velocity(obs, 50, 0.1)
        expected = obs.position + np.arange(1, 51)[:, None] * 0.1 * obs.velocity
        if np.max(np.abs(tr.positions - expected)) > 1e-12:
            return False
    return True


def _check_qp_oracle() -> bool:
    rng = np.random.default_rng(1)
    for _ in range(20):
        qp = random_stage_qp(rng)
        sol = solve_qp(qp)
        dx, du, _, _ = active_set_enumeration(qp)
        if sol.status != SolverStatus.SOLVED or max(np.max(np.abs(sol.dx - dx)), np.max(np.abs(sol.du - du))) > 1e-6:
            return False
    return True


def _check_goal_reaching() -> bool:
    scenario = Scenario("empty", RobotState(), (1.0, 0.0, 0.0, 0.0), (), (), 20.0, 0)
    m = run_scenario(scenario).metrics
    return m.success and m.path_length <= 1.1


def _check_monitor_stop() -> bool:
    cfg = MonitorConfig()
    return (not check_timing(2 * cfg.budget, cfg).ok and check_timing(0.5 * cfg.budget, cfg).ok
            and protective_stop(RobotState(v=0.5), cfg).a < 0 and protective_stop(RobotState(), cfg) == (0.0, 0.0))


def _check_sim_clock() -> bool:
    world = spawn_scenario("crossing_group", 1)
    for _ in range(100):
        world = step_world(world, ControlInput(0.0, 0.0), 0.05)
    return world.time == 5.0


SELF_CHECKS = (
    ("collision cost values and slope at the threshold", _check_collision_cost),
    ("constant-velocity forecast is affine", _check_prediction),
    ("QP solver matches active-set oracle", _check_qp_oracle),
    ("empty world 1 m goal reached on a near-straight path", _check_goal_reaching),
    ("monitor timeout threshold and protective stop", _check_monitor_stop),
    ("simulation clock exact over 100 steps", _check_sim_clock),
)


def _cmd_check(args) -> int:
    failed = 0
    for name, fn in SELF_CHECKS:
        try:
            ok = bool(fn())
        except Exception as exc:   # a crashing check is reported, not propagated
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="human-mpc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario closed loop")
    run.add_argument("scenario", help="scenario JSON file or built-in name (" + ", ".join(BUILTIN_SCENARIOS) + ")")
    run.add_argument("--out", help="output directory (default runs/<name>-seed<seed>)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--dt", type=float, default=0.1, help="control and simulation step [s]")
    run.set_defaults(func=_cmd_run)

    bench = sub.add_parser("bench", help="iteration-time scalability benchmark")
    bench.add_argument("--humans", default="5,10,20,30", help="comma-separated human counts")
    bench.add_argument("--cycles", type=int, default=500, help="timed cycles per row (>= 100)")
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="directory for scalability.json and scalability.txt")
    bench.set_defaults(func=_cmd_bench)

    check = sub.add_parser("check", help="run invariant self-tests")
    check.set_defaults(func=_cmd_check)

    export = sub.add_parser("export", help="split a trajectory CSV into per-entity files")
    export.add_argument("csv")
    export.add_argument("--out", required=True)
    export.set_defaults(func=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
