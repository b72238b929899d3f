"""Closed-loop crowd world: social-force pedestrians, point obstacles and the robot.

Pedestrians follow the classical social-force model: a driving term relaxing
the velocity towards the desired one plus exponential repulsion from other
pedestrians, obstacles and the robot, integrated with symplectic Euler.
Worlds are immutable values; every step returns a new :class:`WorldState`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import RobotState, integrate_step
from .prediction import HumanObservation

ROBOT_RADIUS = 0.2
GOAL_RADIUS = 0.3
MAX_SPAWN_TRIES = 10_000
GOAL_POLICIES = ("stop", "resample", "oscillate")
CSV_HEADER = ("time", "entity", "x", "y", "theta", "v")
# Used when two entities coincide and the repulsion direction is undefined.
COINCIDENT_DIRECTION = np.array([1.0, 0.0])


class ScenarioError(ValueError):
    """Invalid scenario description; ``field`` names the top-level section at fault, if known."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class Agent:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    desired_speed: float = 1.0
    radius: float = 0.25
    alt_goal: np.ndarray | None = None   # the other anchor for back-and-forth walkers
    goal_count: int = 0

    def __post_init__(self):
        for name in ("position", "velocity", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(2))
        if self.alt_goal is not None:
            object.__setattr__(self, "alt_goal", np.asarray(self.alt_goal, dtype=float).reshape(2))
        if not 0.0 < self.desired_speed <= 2.0:
            raise ValueError("desired_speed must lie in (0, 2]")
        if not 0.0 < self.radius <= 0.5:
            raise ValueError("radius must lie in (0, 0.5]")


@dataclass(frozen=True)
class SocialForceParams:
    tau: float = 0.5
    strength: float = 2.0
    range: float = 0.8
    obstacle_strength: float = 2.0
    obstacle_range: float = 0.8
    robot_strength: float = 2.0
    robot_range: float = 0.8
    max_speed: float = 2.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"social force parameter {name} must be positive")


@dataclass(frozen=True)
class Obstacle:
    position: np.ndarray
    radius: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    agent_id: int
    distance: float


@dataclass(frozen=True)
class Scenario:
    """A fully materialized scenario: every entity placed."""

    name: str
    robot_start: RobotState
    robot_goal: np.ndarray
    agents: tuple[Agent, ...]
    obstacles: tuple[Obstacle, ...]
    duration: float
    rng_seed: int
    arena: tuple[float, float] = (12.0, 12.0)
    sfm: SocialForceParams = field(default_factory=SocialForceParams)
    goal_policy: str = "stop"
    goal_tolerance: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "robot_start", RobotState(*map(float, self.robot_start)))
        object.__setattr__(self, "robot_goal", np.asarray(self.robot_goal, dtype=float).reshape(4))
        if self.goal_policy not in GOAL_POLICIES:
            raise ValueError(f"goal_policy must be one of {GOAL_POLICIES}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        overlap = first_overlap(self.robot_start[:2], self.agents, self.obstacles)
        if overlap is not None:
            raise ValueError(f"initial overlap between {overlap[0]} and {overlap[1]}")


@dataclass(frozen=True)
class WorldState:
    time: float
    robot: RobotState
    agents: tuple[Agent, ...]
    obstacles: tuple[Obstacle, ...]
    collision_events: tuple[CollisionEvent, ...] = ()
    sfm: SocialForceParams = field(default_factory=SocialForceParams)
    goal_policy: str = "stop"
    arena: tuple[float, float] = (12.0, 12.0)
    rng_seed: int = 0
    robot_radius: float = ROBOT_RADIUS
    time_carry: float = 0.0   # compensation term of the clock's running sum

    @property
    def obstacle_positions(self) -> np.ndarray:
        return np.array([o.position for o in self.obstacles]).reshape(-1, 2)


def first_overlap(robot_xy, agents, obstacles, robot_radius: float = ROBOT_RADIUS):
    """Names of the first pair of overlapping discs, or ``None``."""
    discs = [("robot", np.asarray(robot_xy, dtype=float), robot_radius)]
    discs += [(f"agent {a.id}", a.position, a.radius) for a in agents]
    discs += [(f"obstacle {k}", o.position, o.radius) for k, o in enumerate(obstacles)]
    for i in range(len(discs)):
        for j in range(i + 1, len(discs)):
            if np.hypot(*(discs[i][1] - discs[j][1])) <= discs[i][2] + discs[j][2]:
                return discs[i][0], discs[j][0]
    return None


# --------------------------------------------------------------------------
# forces


def _repulsion(P: np.ndarray, Q: np.ndarray, r: np.ndarray, strength: float, rng: float,
               antisymmetric: bool = False) -> np.ndarray:
    """``strength * exp((r - d) / range) * unit(P - Q)`` for every pair; result (n, m, 2).

    Coincident pairs push along ``COINCIDENT_DIRECTION``; for agent-agent pairs
    (``antisymmetric``) the lower index is pushed forward and the other back.
    """
    diff = P[:, None, :] - Q[None, :, :]
    d = np.sqrt(np.sum(diff**2, axis=-1))
    coincident = d < 1e-12
    e = np.where(coincident[..., None], COINCIDENT_DIRECTION, diff / np.where(coincident, 1.0, d)[..., None])
    if antisymmetric:
        lower = np.triu(np.ones(d.shape, dtype=bool), 1) | ~coincident
        e = np.where(lower[..., None], e, -e)
    return (strength * np.exp((r - d) / rng))[..., None] * e


@dataclass(frozen=True)
class ForceBreakdown:
    driving: np.ndarray   # (n, 2)
    agents: np.ndarray    # (n, 2)
    obstacles: np.ndarray
    robot: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.driving + self.agents + self.obstacles + self.robot


def _desired_velocity(agent: Agent) -> np.ndarray:
    to_goal = agent.goal - agent.position
    dist = float(np.hypot(*to_goal))
    if dist < GOAL_RADIUS:
        return np.zeros(2)
    return agent.desired_speed * to_goal / dist


def social_forces(world: WorldState) -> ForceBreakdown:
    """Per-agent accelerations split by source."""
    n = len(world.agents)
    p = world.sfm
    if n == 0:
        z = np.zeros((0, 2))
        return ForceBreakdown(z, z, z, z)
    P = np.array([a.position for a in world.agents])
    V = np.array([a.velocity for a in world.agents])
    radii = np.array([a.radius for a in world.agents])
    driving = (np.array([_desired_velocity(a) for a in world.agents]) - V) / p.tau

    pair = _repulsion(P, P, radii[:, None] + radii[None, :], p.strength, p.range, antisymmetric=True)
    pair[np.arange(n), np.arange(n)] = 0.0
    if world.obstacles:
        O = world.obstacle_positions
        orad = np.array([o.radius for o in world.obstacles])
        obst = _repulsion(P, O, radii[:, None] + orad[None, :], p.obstacle_strength, p.obstacle_range).sum(axis=1)
    else:
        obst = np.zeros((n, 2))
    R = np.array([[world.robot.x, world.robot.y]])
    robot = _repulsion(P, R, radii[:, None] + world.robot_radius, p.robot_strength, p.robot_range)[:, 0]
    return ForceBreakdown(driving, pair.sum(axis=1), obst, robot)


def _clamp_speed(V: np.ndarray, vmax: float) -> np.ndarray:
    speed = np.hypot(V[:, 0], V[:, 1])
    scale = np.where(speed > vmax, vmax / np.where(speed > 0, speed, 1.0), 1.0)
    return V * scale[:, None]


def _next_goal(world: WorldState, agent: Agent) -> Agent:
    """Apply the goal policy to an agent that reached its goal."""
    if world.goal_policy == "oscillate" and agent.alt_goal is not None:
        return replace(agent, goal=agent.alt_goal, alt_goal=agent.goal, goal_count=agent.goal_count + 1)
    if world.goal_policy == "resample":
        rng = np.random.default_rng([world.rng_seed, agent.id, agent.goal_count + 1])
        w, h = world.arena
        goal = rng.uniform([-w / 2 + 0.5, -h / 2 + 0.5], [w / 2 - 0.5, h / 2 - 0.5])
        return replace(agent, goal=goal, goal_count=agent.goal_count + 1)
    return replace(agent, velocity=np.zeros(2))


def social_force_step(world: WorldState, dt: float) -> WorldState:
    """Advance only the pedestrians by ``dt`` (symplectic Euler, speed clamped)."""
    if not 0.0 < dt <= 0.1:
        raise ValueError("dt must lie in (0, 0.1]")
    if not world.agents:
        return world
    F = social_forces(world).total
    V = np.array([a.velocity for a in world.agents]) + dt * F
    V = _clamp_speed(V, world.sfm.max_speed)
    agents = []
    for a, v in zip(world.agents, V):
        moved = replace(a, velocity=v, position=a.position + dt * v)
        if np.hypot(*(moved.goal - moved.position)) < GOAL_RADIUS:
            if world.goal_policy == "stop":
                moved = replace(moved, velocity=np.zeros(2))
            else:
                moved = _next_goal(world, moved)
        agents.append(moved)
    return replace(world, agents=tuple(agents))


def robot_collisions(world: WorldState) -> list[CollisionEvent]:
    events = []
    for a in world.agents:
        d = float(np.hypot(a.position[0] - world.robot.x, a.position[1] - world.robot.y))
        if d < a.radius + world.robot_radius:
            events.append(CollisionEvent(world.time, a.id, d))
    return events


def _advance_clock(time: float, carry: float, dt: float) -> dict:
    """Compensated (Kahan) summation so many small steps add up without drift."""
    y = dt - carry
    t = time + y
    return {"time": t, "time_carry": (t - time) - y}


def step_world(world: WorldState, robot_control, dt: float) -> WorldState:
    """Advance robot and pedestrians by ``dt`` and record robot-agent overlaps."""
    robot = integrate_step(world.robot, robot_control, dt)
    moved = social_force_step(world, dt) if world.agents else world
    nxt = replace(moved, robot=robot, **_advance_clock(world.time, world.time_carry, dt))
    events = robot_collisions(nxt)
    if events:
        nxt = replace(nxt, collision_events=world.collision_events + tuple(events))
    return nxt


def observe_humans(world: WorldState) -> list[HumanObservation]:
    """Perfect position and velocity of every pedestrian, stamped with the world time."""
    return [HumanObservation(a.id, a.position.copy(), a.velocity.copy(), world.time) for a in world.agents]


# --------------------------------------------------------------------------
# scenario descriptions

_ARENA = (12.0, 12.0)


def builtin_spec(name: str) -> dict:
    """Description dict of one of the two benchmark scenarios."""
    if name == "random_crowded_cluttered":
        return {
            "name": name,
            "seed": 1,
            "duration_s": 60.0,
            "arena": list(_ARENA),
            "robot": {"start": [-4.5, -4.5, math.pi / 4, 0.0], "goal": [4.5, 4.5, math.pi / 4, 0.0]},
            "agents": {"generator": {"kind": "random", "count": 10, "radius": 0.25,
                                     "desired_speed": [0.5, 1.0], "clearance_from_robot": 1.5}},
            "obstacles": {"generator": {"kind": "random", "count": 5, "radius": 0.3,
                                        "clearance_from_robot": 1.0}},
            "goal_policy": "resample",
        }
    if name == "crossing_group":
        return {
            "name": name,
            "seed": 1,
            "duration_s": 60.0,
            "arena": list(_ARENA),
            "robot": {"start": [-4.5, 0.0, 0.0, 0.0], "goal": [4.5, 0.0, 0.0, 0.0]},
            "agents": {"generator": {"kind": "crossing_group", "rows": 3, "cols": 3, "spacing": 0.9,
                                     "anchor_a": [0.0, -4.5], "anchor_b": [0.0, 4.5], "radius": 0.25,
                                     "desired_speed": 0.8, "position_jitter": 0.15, "speed_jitter": 0.1,
                                     "phase": [0.0, 3.0]}},
            "obstacles": [],
            "goal_policy": "oscillate",
        }
    raise ScenarioError(f"unknown built-in scenario {name!r}")


def _sample_point(rng, arena, margin):
    w, h = arena
    return rng.uniform([-w / 2 + margin, -h / 2 + margin], [w / 2 - margin, h / 2 - margin])


def _random_obstacles(gen: dict, rng, arena, robot_start, robot_goal) -> list[Obstacle]:
    count, radius = int(gen.get("count", 5)), float(gen.get("radius", 0.3))
    keep_out = float(gen.get("clearance_from_robot", 1.0))
    placed: list[Obstacle] = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > MAX_SPAWN_TRIES:
            raise ScenarioError("could not place obstacles without overlap")
        p = _sample_point(rng, arena, radius)
        if min(np.hypot(*(p - robot_start)), np.hypot(*(p - robot_goal))) < keep_out + radius:
            continue
        if any(np.hypot(*(p - o.position)) <= radius + o.radius for o in placed):
            continue
        placed.append(Obstacle(p, radius))
    return placed


def _random_agents(gen: dict, rng, arena, robot_start, obstacles) -> list[Agent]:
    count, radius = int(gen.get("count", 10)), float(gen.get("radius", 0.25))
    lo, hi = gen.get("desired_speed", [0.5, 1.0])
    keep_out = float(gen.get("clearance_from_robot", 1.5))
    agents: list[Agent] = []
    tries = 0
    while len(agents) < count:
        tries += 1
        if tries > MAX_SPAWN_TRIES:
            raise ScenarioError("could not place agents without overlap")
        start = _sample_point(rng, arena, radius)
        goal = _sample_point(rng, arena, radius)
        if np.hypot(*(start - robot_start)) < keep_out + radius:
            continue
        if any(np.hypot(*(start - o.position)) <= radius + o.radius for o in obstacles):
            continue
        if any(np.hypot(*(start - a.position)) <= radius + a.radius for a in agents):
            continue
        agents.append(Agent(len(agents), start, np.zeros(2), goal, float(rng.uniform(lo, hi)), radius))
    return agents


def _crossing_group(gen: dict, rng) -> list[Agent]:
    """A rows x cols block walking between two anchors.

    ``phase`` is a range for how far the block has already walked from anchor
    a; ``position_jitter`` and ``speed_jitter`` perturb each member uniformly.
    """
    rows, cols = int(gen.get("rows", 3)), int(gen.get("cols", 3))
    spacing = float(gen.get("spacing", 0.9))
    a, b = np.asarray(gen["anchor_a"], dtype=float), np.asarray(gen["anchor_b"], dtype=float)
    radius, speed = float(gen.get("radius", 0.25)), float(gen.get("desired_speed", 0.8))
    jitter, speed_jitter = float(gen.get("position_jitter", 0.0)), float(gen.get("speed_jitter", 0.0))
    if not 0.0 <= jitter < (spacing - 2 * radius) / 2:
        raise ValueError("position_jitter must be in [0, (spacing - 2 radius) / 2)")
    if not 0.0 <= speed_jitter < speed:
        raise ValueError("speed_jitter must be in [0, desired_speed)")
    axis = (b - a) / np.hypot(*(b - a))
    side = np.array([-axis[1], axis[0]])
    lo, hi = gen.get("phase", [0.0, 0.0])
    start = a + float(rng.uniform(lo, hi)) * axis
    agents = []
    for i in range(rows):
        for j in range(cols):
            offset = (i - (rows - 1) / 2) * spacing * axis + (j - (cols - 1) / 2) * spacing * side
            noise = rng.uniform(-jitter, jitter, 2)
            v = speed + float(rng.uniform(-speed_jitter, speed_jitter))
            # the whole block walks from anchor a to anchor b and back, keeping its formation
            agents.append(Agent(len(agents), start + offset + noise, np.zeros(2), b + offset, v, radius,
                                alt_goal=a + offset))
    return agents


def _agents_from_list(items: list) -> list[Agent]:
    agents = []
    for k, item in enumerate(items):
        agents.append(Agent(int(item.get("id", k)), item["position"], item.get("velocity", [0.0, 0.0]),
                            item["goal"], float(item.get("desired_speed", 1.0)), float(item.get("radius", 0.25)),
                            item.get("alt_goal")))
    return agents


def _obstacles_from_list(items: list) -> list[Obstacle]:
    out = []
    for item in items:
        if isinstance(item, dict):
            out.append(Obstacle(item["position"], float(item.get("radius", 0.3))))
        else:
            vals = list(item)
            out.append(Obstacle(vals[:2], float(vals[2]) if len(vals) > 2 else 0.3))
    return out


@contextmanager
def _section(name: str | None):
    """Re-raise malformed input inside one top-level section as :class:`ScenarioError`."""
    try:
        yield
    except ScenarioError as exc:
        if exc.field is None:
            exc.field = name
        raise
    except KeyError as exc:
        raise ScenarioError(_prefixed(name, f"missing field {exc.args[0]!r}"), name) from exc
    except (TypeError, ValueError, IndexError) as exc:
        raise ScenarioError(_prefixed(name, str(exc)), name) from exc


def _prefixed(name: str | None, message: str) -> str:
    return f"{name}: {message}" if name else message


def materialize(spec: dict, seed: int | None = None) -> Scenario:
    """Run the generators of a description and return the placed scenario."""
    with _section("seed"):
        seed = int(spec.get("seed", 0) if seed is None else seed)
    rng = np.random.default_rng(seed)
    with _section("arena"):
        arena = tuple(float(v) for v in spec.get("arena", _ARENA))
        if len(arena) != 2 or min(arena) <= 0:
            raise ValueError("arena must be [width, height] with positive entries")
    with _section("robot"):
        robot = spec["robot"]
        start = RobotState(*map(float, robot["start"]))
        goal = np.asarray(robot["goal"], dtype=float).reshape(4)
    with _section("obstacles"):
        obstacles_spec = spec.get("obstacles", [])
        if isinstance(obstacles_spec, dict):
            gen = obstacles_spec["generator"]
            if gen.get("kind", "random") != "random":
                raise ValueError(f"unknown obstacle generator {gen.get('kind')!r}")
            obstacles = _random_obstacles(gen, rng, arena, np.array(start[:2]), goal[:2])
        else:
            obstacles = _obstacles_from_list(obstacles_spec)
    with _section("agents"):
        agents_spec = spec.get("agents", [])
        if isinstance(agents_spec, dict):
            gen = agents_spec["generator"]
            kind = gen.get("kind", "random")
            if kind == "random":
                agents = _random_agents(gen, rng, arena, np.array(start[:2]), obstacles)
            elif kind == "crossing_group":
                agents = _crossing_group(gen, rng)
            else:
                raise ValueError(f"unknown agent generator {kind!r}")
        else:
            agents = _agents_from_list(agents_spec)
    with _section("sfm"):
        sfm = SocialForceParams(**spec.get("sfm", {}))
    with _section("duration_s"):
        duration = float(spec.get("duration_s", 30.0))
    with _section("goal_tolerance"):
        tolerance = float(spec.get("goal_tolerance", 0.05))
    with _section(None):
        return Scenario(str(spec.get("name", "scenario")), start, goal, tuple(agents), tuple(obstacles),
                        duration, seed, arena, sfm, str(spec.get("goal_policy", "stop")), tolerance)


def initial_world(scenario: Scenario) -> WorldState:
    return WorldState(0.0, scenario.robot_start, scenario.agents, scenario.obstacles, (), scenario.sfm,
                      scenario.goal_policy, scenario.arena, scenario.rng_seed)


def spawn_scenario(spec: dict | str, seed: int | None = None) -> WorldState:
    """Materialize a description (or built-in name) and return its initial world."""
    if isinstance(spec, str):
        spec = builtin_spec(spec)
    return initial_world(materialize(spec, seed))


def _line_of_key(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for k, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return k
    return None


def load_scenario_spec(path: str | Path) -> dict:
    """Parse a scenario JSON file; syntax errors report ``file:line:col`` and the offending line."""
    path = Path(path)
    text = path.read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context}") from exc
    if not isinstance(spec, dict):
        raise ScenarioError(f"{path}:1: top level must be an object")
    return spec


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    """Load and materialize a scenario file; errors name the file and the line of the bad section."""
    path = Path(path)
    spec = load_scenario_spec(path)
    try:
        return materialize(spec, seed)
    except ScenarioError as exc:
        line = _line_of_key(path.read_text(), exc.field) if exc.field else None
        where = f"{path}:{line}" if line else str(path)
        raise ScenarioError(f"{where}: {exc}", exc.field) from exc


# --------------------------------------------------------------------------
# trajectory CSV


def trajectory_rows(world: WorldState) -> list[tuple]:
    """CSV rows for one snapshot: the robot first, then agents by id."""
    r = world.robot
    rows = [(world.time, "robot", r.x, r.y, r.theta, r.v)]
    rows += [(world.time, f"agent_{a.id}", a.position[0], a.position[1], None, None) for a in world.agents]
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_trajectory_csv(rows, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])


def read_trajectory_csv(stream) -> list[tuple]:
    """Parse a trajectory CSV back into rows; raises ``ValueError`` with the line number on bad input."""
    text = stream.read() if hasattr(stream, "read") else str(stream)
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"line 1: expected header {','.join(CSV_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(rec)}")
        try:
            t, name = float(rec[0]), rec[1]
            vals = [float(v) if v != "" else None for v in rec[2:]]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        if vals[0] is None or vals[1] is None:
            raise ValueError(f"line {lineno}: position is required")
        rows.append((t, name, *vals))
    return rows


__all__ = [
    "Agent", "CollisionEvent", "ForceBreakdown", "GOAL_RADIUS", "Obstacle", "ROBOT_RADIUS", "Scenario",
    "ScenarioError", "SocialForceParams", "WorldState", "builtin_spec", "first_overlap", "initial_world",
    "load_scenario", "load_scenario_spec", "materialize", "observe_humans", "read_trajectory_csv",
    "robot_collisions", "social_force_step", "social_forces", "spawn_scenario", "step_world",
    "trajectory_rows", "write_trajectory_csv",
]
