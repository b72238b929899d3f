"""Feasibility and safety monitors around the real-time iteration.

Two failure cases command a protective stop: the solver misses its real-time
budget (timeout), or it returns no safe plan (unsafe solution). A clearance
violation already present in the measured state is reported separately.
"""
from __future__ import annotations

import enum
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .model import ControlBounds, ControlInput, RobotState
from .ocp import OcpConfig, OcpParameters, OcpSolution, RtiState, initialize_rti, rti_step, warm_up
from .qp import EMERGENCY_SLACK_TOL, SolverStatus

CLEARANCE_TOL = 1e-6


class Cause(str, enum.Enum):
    NONE = "none"
    TIMEOUT = "timeout"
    UNSAFE_SOLUTION = "unsafe_solution"
    CONSTRAINT_VIOLATION_MEASURED = "constraint_violation_measured"


@dataclass(frozen=True)
class MonitorConfig:
    budget: float = 0.1
    d_h: float = 0.5
    brake_decel: float = float(max(-ControlBounds().lower[0], ControlBounds().upper[0]))
    dt: float = 0.1
    resume_cycles: int = 5

    def __post_init__(self):
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if not self.d_h > 0:
            raise ValueError("d_h must be positive")
        if not (self.brake_decel > 0 and self.dt > 0):
            raise ValueError("brake_decel and dt must be positive")
        if self.resume_cycles < 1:
            raise ValueError("resume_cycles must be at least 1")


@dataclass(frozen=True)
class MonitorVerdict:
    ok: bool
    cause: Cause = Cause.NONE

    def __post_init__(self):
        if self.ok != (self.cause == Cause.NONE):
            raise ValueError("ok must hold exactly when the cause is none")

    @classmethod
    def passed(cls) -> MonitorVerdict:
        return cls(True, Cause.NONE)

    @classmethod
    def failed(cls, cause: Cause) -> MonitorVerdict:
        return cls(False, cause)


def check_timing(solve_time: float, config: MonitorConfig) -> MonitorVerdict:
    """Timeout iff ``solve_time`` strictly exceeds the budget."""
    if solve_time < 0:
        raise ValueError("solve_time must be nonnegative")
    return MonitorVerdict.failed(Cause.TIMEOUT) if solve_time > config.budget else MonitorVerdict.passed()


def min_clearance(states, humans) -> float:
    """Smallest distance between any planned position and any human; ``inf`` without humans."""
    P = np.asarray(states, dtype=float).reshape(-1, np.shape(states)[-1])[:, :2]
    H = np.asarray(humans, dtype=float).reshape(-1, 2)
    if H.shape[0] == 0 or P.shape[0] == 0:
        return math.inf
    return float(np.min(np.hypot(P[:, None, 0] - H[None, :, 0], P[:, None, 1] - H[None, :, 1])))


def check_measured_clearance(state: RobotState, humans_current, config: MonitorConfig) -> MonitorVerdict:
    if min_clearance(np.asarray(state, dtype=float)[None], humans_current) < config.d_h - CLEARANCE_TOL:
        return MonitorVerdict.failed(Cause.CONSTRAINT_VIOLATION_MEASURED)
    return MonitorVerdict.passed()


def check_solution_safety(solution: OcpSolution | None, humans_current, config: MonitorConfig) -> MonitorVerdict:
    """Unsafe unless the plan is solved, uses no emergency slack and keeps ``d_h`` at every node."""
    if solution is None or solution.status != SolverStatus.SOLVED:
        return MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)
    if solution.max_emergency_slack > EMERGENCY_SLACK_TOL:
        return MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)
    if not np.all(np.isfinite(solution.states)) or not np.all(np.isfinite(solution.controls)):
        return MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)
    if min_clearance(solution.states, humans_current) < config.d_h - CLEARANCE_TOL:
        return MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)
    return MonitorVerdict.passed()


def protective_stop(current: RobotState, config: MonitorConfig) -> ControlInput:
    """Brake at ``brake_decel`` without overshooting zero speed; no turning."""
    v = float(current[3])
    if v == 0.0:
        return ControlInput(0.0, 0.0)
    a = -math.copysign(min(config.brake_decel, abs(v) / config.dt), v)
    return ControlInput(a, 0.0)


# --------------------------------------------------------------------------
# supervision

Solver = Callable[..., tuple]


@dataclass
class SupervisedStep:
    control: ControlInput
    verdict: MonitorVerdict
    stop_active: bool
    solution: OcpSolution | None
    elapsed: float
    min_clearance: float


@dataclass
class Supervisor:
    """Runs one solver call per cycle under the monitor checks.

    ``solver`` has the signature of :func:`rti_step` (keyword ``cancel``
    included); replacing it is how faults are injected. A call that overruns
    the budget is cancelled, and the next cycle starts cold.
    """

    ocp_config: OcpConfig
    config: MonitorConfig = field(default_factory=MonitorConfig)
    solver: Solver = rti_step
    log: TextIO | None = None
    rti: RtiState | None = None
    stop_active: bool = False
    clean_cycles: int = 0
    cold_start_next: bool = True

    def __post_init__(self):
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="rti")
        warm_up(self.ocp_config)

    def close(self) -> None:
        self._executor.shutdown(wait=True)

    def __enter__(self) -> Supervisor:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def reset(self) -> None:
        self.rti = None
        self.cold_start_next = True
        self.stop_active = False
        self.clean_cycles = 0

    def step(self, measured: RobotState, params: OcpParameters, sim_time: float = 0.0) -> SupervisedStep:
        measured = RobotState(*map(float, measured))
        if self.cold_start_next or self.rti is None:
            self.rti = initialize_rti(measured, self.ocp_config)
            self.cold_start_next = False
        cancel = threading.Event()
        start = time.perf_counter()
        future = self._executor.submit(self.solver, measured, params, self.rti, self.ocp_config, cancel=cancel)
        solution = None
        control = None
        try:
            control, solution, new_rti = future.result(timeout=self.config.budget)
            elapsed = time.perf_counter() - start
            verdict = check_timing(elapsed, self.config)
            if verdict.ok:
                self.rti = new_rti
        except FutureTimeout:
            cancel.set()
            elapsed = time.perf_counter() - start
            verdict = MonitorVerdict.failed(Cause.TIMEOUT)
        except Exception:
            elapsed = time.perf_counter() - start
            verdict = MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)
        if not verdict.ok:
            self.cold_start_next = True
            solution = None if verdict.cause == Cause.TIMEOUT else solution
        if verdict.ok:
            verdict = check_measured_clearance(measured, params.humans_current, self.config)
        if verdict.ok:
            verdict = check_solution_safety(solution, params.humans_current, self.config)
        if verdict.ok and control is None:
            verdict = MonitorVerdict.failed(Cause.UNSAFE_SOLUTION)

        if verdict.ok:
            self.clean_cycles += 1
            if self.stop_active and self.clean_cycles >= self.config.resume_cycles:
                self.stop_active = False
        else:
            self.clean_cycles = 0
            self.stop_active = True
        out = control if (verdict.ok and not self.stop_active) else protective_stop(measured, self.config)
        clearance = min_clearance(solution.states if solution is not None else np.asarray(measured)[None],
                                  params.humans_current)
        result = SupervisedStep(out, verdict, self.stop_active, solution, elapsed, clearance)
        self._write_log(sim_time, result)
        return result

    def _write_log(self, sim_time: float, result: SupervisedStep) -> None:
        if self.log is None:
            return
        record = {
            "time": round(float(sim_time), 9),
            "cause": result.verdict.cause.value,
            "solve_time": result.elapsed,
            "min_clearance": None if math.isinf(result.min_clearance) else result.min_clearance,
            "stop_active": result.stop_active,
        }
        self.log.write(json.dumps(record) + "\n")


def supervise(supervisor: Supervisor, measured: RobotState, params: OcpParameters,
              sim_time: float = 0.0) -> tuple[ControlInput, MonitorVerdict]:
    """One monitored control cycle: the control to apply and the verdict."""
    result = supervisor.step(measured, params, sim_time)
    return result.control, result.verdict


__all__ = [
    "CLEARANCE_TOL", "Cause", "MonitorConfig", "MonitorVerdict", "SupervisedStep", "Supervisor",
    "check_measured_clearance", "check_solution_safety", "check_timing", "min_clearance",
    "protective_stop", "supervise",
]
