"""Constant-velocity human forecasts and assembly of the per-node OCP parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import NX, RobotState
from .ocp import OcpParameters

V_HUMAN_MAX = 3.0
# Placeholder position for unused human / obstacle slots: far enough that its
# cost underflows and its clearance row can never become active.
SENTINEL_DISTANCE = 1e3


@dataclass(frozen=True)
class HumanObservation:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    timestamp: float = 0.0
    v_max: float = V_HUMAN_MAX

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(2)
        v = np.asarray(self.velocity, dtype=float).reshape(2)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v)) and np.isfinite(self.timestamp)):
            raise ValueError("observation must be finite")
        speed = float(np.hypot(*v))
        if speed > self.v_max:
            v = v * (self.v_max / speed)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "velocity", v)


@dataclass(frozen=True)
class PredictedTrajectory:
    id: int
    positions: np.ndarray   # (N, 2): h_1 .. h_N


def predict_constant_velocity(obs: HumanObservation, N: int, dt: float) -> PredictedTrajectory:
    if N < 1 or not dt > 0:
        raise ValueError("need N >= 1 and dt > 0")
    n = np.arange(1, N + 1, dtype=float)[:, None]
    return PredictedTrajectory(obs.id, obs.position + (n * dt) * obs.velocity)


@dataclass(frozen=True)
class GoalShaping:
    """Speed entry of the per-node goal.

    The goal speed is ``min(approach_speed, approach_gain * distance_to_goal)``.
    With ``approach_speed = 0`` the goal's own speed entry is used unchanged.
    A positive ``separation_decel`` further caps the speed at
    :func:`separation_speed` so the robot can brake before a human ahead
    closes to ``clearance``.
    """

    approach_speed: float = 0.0
    approach_gain: float = 0.5
    separation_decel: float = 0.0
    clearance: float = 0.5
    reaction_time: float = 0.2

    def __post_init__(self):
        if min(self.approach_speed, self.approach_gain, self.separation_decel, self.clearance,
               self.reaction_time) < 0:
            raise ValueError("goal shaping parameters must be nonnegative")


def separation_speed(observations: list[HumanObservation], robot: RobotState, decel: float,
                     clearance: float, reaction_time: float) -> float:
    """Largest speed from which the robot stops before any human ahead closes to ``clearance``.

    For a human at distance ``d`` whose direction makes angle ``phi`` with the
    heading, the robot closes at ``c v`` with ``c = cos(phi)`` and the human at
    ``w``. The speed ``v`` must satisfy
    ``c (v T + v^2 / (2 a)) + w (T + v / a) <= d - clearance``, where ``T`` is
    the reaction time and ``a`` the braking deceleration. Humans behind the
    robot (``c <= 0``) impose no limit, since slowing down cannot help there.
    """
    if decel <= 0:
        return math.inf
    xy = np.array([robot.x, robot.y])
    heading = np.array([math.cos(robot.theta), math.sin(robot.theta)])
    limit = math.inf
    for obs in observations:
        rel = obs.position - xy
        d = float(np.hypot(*rel))
        if d < 1e-12:
            return 0.0
        unit = rel / d
        c = float(heading @ unit)
        if c <= 0:
            continue
        w = max(0.0, -float(obs.velocity @ unit))
        gap = d - clearance - w * reaction_time
        if gap <= 0:
            return 0.0
        # c/(2a) v^2 + (c T + w/a) v - gap <= 0
        qa, qb = c / (2.0 * decel), c * reaction_time + w / decel
        limit = min(limit, (-qb + math.sqrt(qb * qb + 4.0 * qa * gap)) / (2.0 * qa))
    return limit


def nearest_humans(observations: list[HumanObservation], robot_xy, k: int) -> list[HumanObservation]:
    """The ``k`` observations closest to ``robot_xy``; ties go to the lower id."""
    p = np.asarray(robot_xy, dtype=float)
    ranked = sorted(observations, key=lambda o: (float(np.hypot(*(o.position - p))), o.id))
    return ranked[:k]


def nearest_obstacle(obstacles, robot_xy) -> np.ndarray:
    p = np.asarray(robot_xy, dtype=float)
    obs = np.asarray(obstacles, dtype=float).reshape(-1, 2)
    if obs.shape[0] == 0:
        return p + SENTINEL_DISTANCE
    return obs[int(np.argmin(np.hypot(*(obs - p).T)))].copy()


def assemble_stage_parameters(goal, observations: list[HumanObservation], obstacles, robot: RobotState,
                              N: int, dt: float, max_humans: int,
                              shaping: GoalShaping | None = None) -> OcpParameters:
    """Build the N+1 node parameters for one cycle.

    Node 0 carries the current human positions, node n the forecast at ``n dt``.
    Unused human slots hold sentinels ``SENTINEL_DISTANCE`` away from the robot.
    """
    robot = RobotState(*map(float, robot))
    xy = np.array([robot.x, robot.y])
    g = np.asarray(goal, dtype=float).reshape(NX).copy()
    if shaping is not None and shaping.approach_speed > 0:
        dist = float(np.hypot(g[0] - xy[0], g[1] - xy[1]))
        g[3] = min(shaping.approach_speed, shaping.approach_gain * dist)
        if shaping.separation_decel > 0:
            g[3] = min(g[3], separation_speed(observations, robot, shaping.separation_decel,
                                              shaping.clearance, shaping.reaction_time))

    humans = np.empty((N + 1, max_humans, 2))
    current = np.empty((max_humans, 2))
    kept = nearest_humans(observations, xy, max_humans)
    for i, obs in enumerate(kept):
        current[i] = obs.position
        humans[0, i] = obs.position
        humans[1:, i] = predict_constant_velocity(obs, N, dt).positions
    for i in range(len(kept), max_humans):
        # spread sentinels so they never coincide with each other
        angle = 2.0 * np.pi * i / max(max_humans, 1)
        far = xy + SENTINEL_DISTANCE * np.array([np.cos(angle), np.sin(angle)])
        humans[:, i] = far
        current[i] = far
    obstacle = nearest_obstacle(obstacles, xy)
    return OcpParameters(robot, np.tile(g, (N + 1, 1)), humans, current, np.tile(obstacle, (N + 1, 1)))
