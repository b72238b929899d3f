"""Closed-loop scenario runs, behavior metrics and the iteration-time benchmark."""
from __future__ import annotations

import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import RobotState, integrate_step
from .monitor import MonitorConfig, Supervisor
from .ocp import OcpConfig, initialize_rti, rti_step, warm_up
from .prediction import GoalShaping, HumanObservation, assemble_stage_parameters
from .sim import (
    CSV_HEADER,
    ROBOT_RADIUS,
    Scenario,
    initial_world,
    observe_humans,
    read_trajectory_csv,
    step_world,
    trajectory_rows,
    write_trajectory_csv,
)

DEFAULT_SHAPING = GoalShaping(approach_speed=0.6, approach_gain=0.5, separation_decel=1.0, clearance=0.5,
                              reaction_time=0.2)
SIGNIFICANT_DIGITS = 9


def round_sig(value: float, digits: int = SIGNIFICANT_DIGITS) -> float:
    return float(f"{value:.{digits}g}")


def _stable(obj):
    """Round every float to ``SIGNIFICANT_DIGITS`` so JSON output is byte-stable."""
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else round_sig(obj)
    if isinstance(obj, dict):
        return {k: _stable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_stable(v) for v in obj]
    return obj


def dumps_stable(obj) -> str:
    return json.dumps(_stable(obj), indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# closed-loop runs


@dataclass
class RunMetrics:
    success: bool
    reached: bool
    time_to_goal: float | None
    path_length: float
    straight_line_distance: float
    min_human_clearance: float | None
    protective_stops: int
    stop_cycles: int
    collisions: int
    safety_violations: int
    cycles: int
    mean_solve_time: float
    max_solve_time: float

    def deterministic(self) -> dict:
        """Everything except wall-clock timing."""
        out = asdict(self)
        out.pop("mean_solve_time")
        out.pop("max_solve_time")
        return out

    def timing(self) -> dict:
        return {"mean_solve_time": self.mean_solve_time, "max_solve_time": self.max_solve_time}


@dataclass
class RunResult:
    scenario: Scenario
    metrics: RunMetrics
    rows: list[tuple]
    log: list[dict]
    collision_events: tuple


def _robot_track(rows):
    track = [(r[0], r[2], r[3]) for r in rows if r[1] == "robot"]
    return np.array(track, dtype=float).reshape(-1, 3)


def compute_metrics(rows, log: list[dict], scenario: Scenario, d_h: float = 0.5) -> RunMetrics:
    """Behavior metrics from a trajectory log and the per-cycle monitor records.

    Snapshot ``k`` of the trajectory is the state the monitor measured in cycle
    ``k``; the final snapshot inherits the stop state of the last cycle.
    """
    track = _robot_track(rows)
    times = track[:, 0]
    xy = track[:, 1:]
    goal = scenario.robot_goal[:2]
    dist_goal = np.hypot(*(xy - goal).T)
    hit = np.nonzero(dist_goal <= scenario.goal_tolerance)[0]
    reached = hit.size > 0
    end = int(hit[0]) if reached else len(xy) - 1
    steps = np.hypot(*np.diff(xy[:end + 1], axis=0).T) if end > 0 else np.zeros(0)

    radii = {f"agent_{a.id}": a.radius for a in scenario.agents}
    by_time: dict[float, list] = {}
    for r in rows:
        if r[1] != "robot":
            by_time.setdefault(r[0], []).append(r)
    nearest = np.full(len(times), math.inf)
    collisions = 0
    for k, t in enumerate(times):
        for r in by_time.get(t, ()):
            d = math.hypot(r[2] - xy[k, 0], r[3] - xy[k, 1])
            nearest[k] = min(nearest[k], d)
            if d < radii.get(r[1], 0.0) + ROBOT_RADIUS:
                collisions += 1

    stops = [bool(rec["stop_active"]) for rec in log]
    stop_at = stops + [stops[-1] if stops else False] * (len(times) - len(stops))
    violations = int(sum(1 for k in range(len(times)) if nearest[k] < d_h and not stop_at[k]))
    onsets = sum(1 for k, s in enumerate(stops) if s and (k == 0 or not stops[k - 1]))
    solve = np.array([rec["solve_time"] for rec in log], dtype=float)
    return RunMetrics(
        success=bool(reached and collisions == 0),
        reached=bool(reached),
        time_to_goal=float(times[end]) if reached else None,
        path_length=float(np.sum(steps)),
        straight_line_distance=float(np.hypot(*(xy[0] - goal))),
        min_human_clearance=float(nearest.min()) if math.isfinite(nearest.min()) else None,
        protective_stops=int(onsets),
        stop_cycles=int(sum(stops)),
        collisions=int(collisions),
        safety_violations=violations,
        cycles=len(log),
        mean_solve_time=float(solve.mean()) if solve.size else 0.0,
        max_solve_time=float(solve.max()) if solve.size else 0.0,
    )


def run_scenario(scenario: Scenario, *, dt: float = 0.1, ocp_config: OcpConfig | None = None,
                 monitor_config: MonitorConfig | None = None, shaping: GoalShaping | None = DEFAULT_SHAPING,
                 out_dir: str | Path | None = None) -> RunResult:
    """Observe, predict, assemble, supervise and step the world until the goal or the time limit."""
    ocp_config = ocp_config or OcpConfig()
    monitor_config = monitor_config or MonitorConfig(d_h=ocp_config.constraints.d_h, dt=dt)
    world = initial_world(scenario)
    obstacles = world.obstacle_positions
    goal = scenario.robot_goal
    rows: list[tuple] = []
    log_stream = io.StringIO()
    steps = int(math.floor(scenario.duration / dt + 1e-9))

    def at_goal(w):
        return math.hypot(w.robot.x - goal[0], w.robot.y - goal[1]) <= scenario.goal_tolerance

    with Supervisor(ocp_config, monitor_config, log=log_stream) as sup:
        for _ in range(steps):
            rows += trajectory_rows(world)
            if at_goal(world):
                break
            params = assemble_stage_parameters(goal, observe_humans(world), obstacles, world.robot,
                                               ocp_config.N, ocp_config.dt, ocp_config.max_humans, shaping)
            result = sup.step(world.robot, params, world.time)
            world = step_world(world, result.control, dt)
        else:
            rows += trajectory_rows(world)
    log = [json.loads(line) for line in log_stream.getvalue().splitlines()]
    metrics = compute_metrics(rows, log, scenario, monitor_config.d_h)
    run = RunResult(scenario, metrics, rows, log, world.collision_events)
    if out_dir is not None:
        write_run_outputs(run, out_dir)
    return run


def write_run_outputs(run: RunResult, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("trajectory.csv", "monitor.jsonl", "metrics.json", "timing.json")}
    with paths["trajectory.csv"].open("w", newline="") as f:
        write_trajectory_csv(run.rows, f)
    with paths["monitor.jsonl"].open("w") as f:
        for rec in run.log:
            f.write(json.dumps(rec) + "\n")
    header = {"scenario": run.scenario.name, "seed": run.scenario.rng_seed}
    paths["metrics.json"].write_text(dumps_stable({**header, **run.metrics.deterministic()}))
    paths["timing.json"].write_text(json.dumps({**header, **run.metrics.timing()}, indent=2) + "\n")
    return paths


# --------------------------------------------------------------------------
# scalability benchmark


@dataclass
class ScalabilityRow:
    num_humans: int
    params_per_node: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float
    cycles: int


@dataclass
class ScalabilityReport:
    rows: list[ScalabilityRow]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        head = ("humans", "params/node", "mean [ms]", "p50 [ms]", "p95 [ms]", "max [ms]", "cycles")
        body = [(str(r.num_humans), str(r.params_per_node), f"{r.mean_ms:.3f}", f"{r.p50_ms:.3f}",
                 f"{r.p95_ms:.3f}", f"{r.max_ms:.3f}", str(r.cycles)) for r in self.rows]
        widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
        return "\n".join(lines) + "\n"


def params_per_node(num_humans: int) -> int:
    """Goal (4) + obstacle (2) + predicted and current position per human (4)."""
    return 4 + 2 + 4 * num_humans


@dataclass(frozen=True)
class WalkerField:
    """Straight-line walkers with random headings on a periodic square around the origin."""

    positions: np.ndarray
    velocities: np.ndarray
    half_width: float

    @classmethod
    def random(cls, count: int, rng: np.random.Generator, half_width: float = 6.0,
               speed=(0.5, 1.2)) -> WalkerField:
        heading = rng.uniform(-np.pi, np.pi, count)
        v = rng.uniform(*speed, count)
        pos = rng.uniform(-half_width, half_width, (count, 2))
        return cls(pos, np.column_stack([v * np.cos(heading), v * np.sin(heading)]), half_width)

    def step(self, dt: float) -> WalkerField:
        w = self.half_width
        pos = (self.positions + dt * self.velocities + w) % (2 * w) - w
        return replace(self, positions=pos)

    def observations(self, t: float) -> list[HumanObservation]:
        return [HumanObservation(i, p, v, t) for i, (p, v) in enumerate(zip(self.positions, self.velocities))]


def measure_iteration_times(num_humans: int, cycles: int, config: OcpConfig | None = None,
                            seed: int = 0) -> np.ndarray:
    """Wall time [s] of each ``rti_step`` in a closed loop among ``num_humans`` walkers.

    Only the solver call is timed; stepping the walkers and the robot is excluded.
    """
    cfg = replace(config or OcpConfig(), max_humans=num_humans)
    warm_up(cfg)
    rng = np.random.default_rng([seed, num_humans])
    walkers = WalkerField.random(num_humans, rng)
    goals = [(5.0, 0.0, 0.0, 0.0), (-5.0, 0.0, np.pi, 0.0)]
    leg = 0
    x = RobotState(-5.0, 0.0, 0.0, 0.0)
    rti = initialize_rti(x, cfg)
    times = np.empty(cycles)
    obstacle = [[0.0, 3.0]]
    for k in range(cycles):
        goal = goals[leg]
        params = assemble_stage_parameters(goal, walkers.observations(k * cfg.dt), obstacle, x, cfg.N, cfg.dt,
                                           cfg.max_humans, DEFAULT_SHAPING)
        start = time.perf_counter()
        u, _, rti = rti_step(x, params, rti, cfg)
        times[k] = time.perf_counter() - start
        if u is None:
            rti = initialize_rti(x, cfg)
            u = (0.0, 0.0)
        x = integrate_step(x, u, cfg.dt)
        walkers = walkers.step(cfg.dt)
        if math.hypot(x.x - goal[0], x.y - goal[1]) < 0.3:
            leg = 1 - leg
    return times


def run_scalability(num_humans=(5, 10, 20, 30), cycles: int = 500, config: OcpConfig | None = None,
                    seed: int = 0) -> ScalabilityReport:
    """Iteration-time statistics per human count; rows run one after another."""
    if cycles < 100:
        raise ValueError("cycles must be at least 100")
    rows = []
    for n in num_humans:
        t = measure_iteration_times(int(n), cycles, config, seed) * 1e3
        rows.append(ScalabilityRow(int(n), params_per_node(int(n)), float(t.mean()), float(np.percentile(t, 50)),
                                   float(np.percentile(t, 95)), float(t.max()), cycles))
    cfg = config or OcpConfig()
    meta = {
        "N": cfg.N,
        "horizon_s": cfg.horizon,
        "human_motion": "straight-line walkers, uniform random headings and speeds 0.5-1.2 m/s, periodic 12x12 m square",
        "robot_motion": "closed loop between (-5, 0) and (5, 0)",
        "clock": "time.perf_counter around rti_step only",
        "seed": seed,
        "threads": os.environ.get("HUMAN_MPC_THREADS", "1"),
    }
    return ScalabilityReport(rows, meta)


# --------------------------------------------------------------------------
# plot data


def export_plot_data(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Split a trajectory CSV into one file per entity, keeping the CSV format."""
    with Path(csv_path).open() as f:
        rows = read_trajectory_csv(f)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_entity: dict[str, list] = {}
    for r in rows:
        by_entity.setdefault(r[1], []).append(r)
    paths = []
    for name, entity_rows in by_entity.items():
        path = out / f"{name}.csv"
        with path.open("w", newline="") as f:
            write_trajectory_csv(entity_rows, f)
        paths.append(path)
    return paths


__all__ = [
    "CSV_HEADER", "DEFAULT_SHAPING", "RunMetrics", "RunResult", "ScalabilityReport", "ScalabilityRow",
    "WalkerField", "compute_metrics", "dumps_stable", "export_plot_data", "measure_iteration_times",
    "params_per_node", "round_sig", "run_scalability", "run_scenario", "write_run_outputs",
]
