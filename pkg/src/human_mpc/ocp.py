"""Multiple-shooting OCP and one Gauss-Newton SQP step per control cycle (RTI).

Decision variables are the states ``x_0..x_N`` and controls ``u_0..u_{N-1}``.
Each cycle linearizes around the shifted previous solution, solves one
stage-structured QP and applies the full step.

Rows of the QP, per stage (fixed layout so warm starts line up):

* ``max_humans`` human clearance rows, hard with an emergency slack (stages 1..N)
* one obstacle clearance row, soft (stages 1..N)
* state bound rows for every finite bound (stages 1..N)
* control bound rows for every finite bound (stages 0..N-1)

Rows that do not apply at a stage are padded as ``0 <= 1``. The initial
state is fixed, so no row constrains it; a measured clearance violation is
the monitor's business.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .costs import (
    CollisionCostParams,
    ConstraintParams,
    CostWeights,
    StageParameters,
    clearance_residuals,
    collision_terms,
    goal_error,
)
from .model import (NU, NX, ControlBounds, ControlInput, RobotState, StateBounds, normalize_angle, rk4,
                    rk4_with_sensitivities)
from .qp import EMERGENCY, HARD, SOFT, EMERGENCY_SLACK_TOL, SolverStatus, StageQP, _costates, solve_qp


@dataclass(frozen=True)
class OcpConfig:
    N: int = 50
    horizon: float = 5.0
    max_humans: int = 10
    state_bounds: StateBounds = field(default_factory=StateBounds)
    control_bounds: ControlBounds = field(default_factory=ControlBounds)
    weights: CostWeights = field(default_factory=CostWeights)
    collision: CollisionCostParams = field(default_factory=CollisionCostParams)
    constraints: ConstraintParams = field(default_factory=ConstraintParams)
    regularization: float = 1e-8
    qp_tol: float = 1e-8
    qp_max_iter: int = 30
    barrier_reduction: float = 0.2
    warm_start_duals: bool = True
    rollout_guess: bool = True

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.max_humans < 0:
            raise ValueError("max_humans must be nonnegative")

    @property
    def dt(self) -> float:
        return self.horizon / self.N

    @property
    def rows_per_stage(self) -> int:
        return self.max_humans + 1 + len(_state_bound_rows(self)) + len(_control_bound_rows(self))


def _state_bound_rows(config: OcpConfig):
    """(component, sign, bound) for each finite state bound; sign +1 is an upper bound."""
    sb = config.state_bounds
    rows = []
    for j in range(NX):
        if np.isfinite(sb.upper[j]):
            rows.append((j, 1.0, sb.upper[j]))
        if np.isfinite(sb.lower[j]):
            rows.append((j, -1.0, sb.lower[j]))
    return rows


def _control_bound_rows(config: OcpConfig):
    cb = config.control_bounds
    rows = []
    for j in range(NU):
        if np.isfinite(cb.upper[j]):
            rows.append((j, 1.0, cb.upper[j]))
        if np.isfinite(cb.lower[j]):
            rows.append((j, -1.0, cb.lower[j]))
    return rows


@dataclass
class OcpParameters:
    """Per-node parameters stored as arrays.

    goals (N+1, 4), humans (N+1, k, 2) predicted, humans_current (k, 2),
    obstacles (N+1, 2).
    """

    initial_state: RobotState
    goals: np.ndarray
    humans: np.ndarray
    humans_current: np.ndarray
    obstacles: np.ndarray

    def __post_init__(self):
        self.initial_state = RobotState(*map(float, self.initial_state))
        self.goals = np.asarray(self.goals, dtype=float)
        n1 = self.goals.shape[0]
        self.humans = np.asarray(self.humans, dtype=float).reshape(n1, -1, 2)
        self.humans_current = np.asarray(self.humans_current, dtype=float).reshape(-1, 2)
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(n1, 2)
        if self.goals.shape != (n1, NX):
            raise ValueError("goals must have shape (N+1, 4)")
        if self.humans.shape[1] != self.humans_current.shape[0]:
            raise ValueError("humans and humans_current must list the same humans")

    @property
    def N(self) -> int:
        return self.goals.shape[0] - 1

    @property
    def stages(self) -> list[StageParameters]:
        return [StageParameters(self.goals[n], self.humans[n], self.humans_current, self.obstacles[n])
                for n in range(self.N + 1)]

    @classmethod
    def from_stages(cls, initial_state, stages: list[StageParameters]) -> OcpParameters:
        current = stages[0].humans_current
        for sp in stages:
            if not np.array_equal(sp.humans_current, current):
                raise ValueError("humans_current must be identical at every stage")
        return cls(initial_state, np.stack([sp.goal for sp in stages]),
                   np.stack([sp.humans for sp in stages]), current,
                   np.stack([sp.obstacle for sp in stages]))


@dataclass
class OcpSolution:
    states: np.ndarray          # (N+1, 4), heading normalized
    controls: np.ndarray        # (N, 2)
    slacks: np.ndarray          # (N+1, m) per QP row, zero on rows without a slack
    row_kind: np.ndarray        # (N+1, m) HARD / EMERGENCY / SOFT
    kkt_residual: float
    status: SolverStatus
    solve_time: float
    qp_iterations: int = 0

    @property
    def max_emergency_slack(self) -> float:
        return float(np.max(self.slacks[self.row_kind == EMERGENCY], initial=0.0))

    def first_control(self) -> ControlInput:
        return ControlInput(*map(float, self.controls[0]))

    def state(self, n: int) -> RobotState:
        return RobotState(*map(float, self.states[n]))


@dataclass
class RtiState:
    """Trajectory and multipliers carried between cycles (heading unwrapped)."""

    states: np.ndarray          # (N+1, 4)
    controls: np.ndarray        # (N, 2)
    lam: np.ndarray | None = None   # (N+1, m); None means cold start

    def copy(self) -> RtiState:
        return RtiState(self.states.copy(), self.controls.copy(),
                        None if self.lam is None else self.lam.copy())


# --------------------------------------------------------------------------
# linearization


def linearize(states: np.ndarray, controls: np.ndarray, params: OcpParameters, config: OcpConfig) -> StageQP:
    """Gauss-Newton QP in the increments around ``(states, controls)``.

    ``x0`` of the QP is the heading-wrapped difference between the measured
    state and ``states[0]``.
    """
    N, dt = config.N, config.dt
    X = np.asarray(states, dtype=float)
    U = np.asarray(controls, dtype=float)
    if X.shape != (N + 1, NX) or U.shape != (N, NU):
        raise ValueError("guess dimensions do not match the configuration")
    if params.N != N:
        raise ValueError("parameters have the wrong number of stages")
    w = config.weights

    # dynamics
    Xn, A, B = rk4_with_sensitivities(X[:-1], U, dt)
    c = Xn - X[1:]
    x0 = np.asarray(params.initial_state, dtype=float) - X[0]
    x0[2] = normalize_angle(x0[2])

    # costs
    wg = np.vstack([np.tile(w.w_goal_stage, (N, 1)), w.w_goal_terminal])
    err = goal_error(X, params.goals)
    q = 2.0 * wg * err
    Q = np.zeros((N + 1, NX, NX))
    idx = np.arange(NX)
    Q[:, idx, idx] = 2.0 * wg
    _, cg, ch = collision_terms(X[:, :2], params.humans, config.collision)
    q[:, :2] += cg
    Q[:, :2, :2] += ch
    Q[:, idx, idx] += config.regularization
    r = 2.0 * w.w_control * U
    R = np.zeros((N, NU, NU))
    R[:, np.arange(NU), np.arange(NU)] = 2.0 * w.w_control + config.regularization
    S = np.zeros((N, NU, NX))

    # rows
    k = params.humans_current.shape[0]
    if k != config.max_humans:
        raise ValueError(f"expected {config.max_humans} human slots, got {k}")
    m = config.rows_per_stage
    Cx = np.zeros((N + 1, m, NX))
    Cu = np.zeros((N, m, NU))
    d = np.ones((N + 1, m))
    kind = np.full((N + 1, m), HARD, dtype=np.int8)
    zl = np.zeros((N + 1, m))
    zq = np.zeros((N + 1, m))
    cons = config.constraints
    P = X[1:, :2]

    if k:
        res, e = clearance_residuals(P, np.broadcast_to(params.humans_current, (N, k, 2)), cons.d_h)
        Cx[1:, :k, :2] = -e
        d[1:, :k] = res
        kind[1:, :k] = EMERGENCY
        zl[1:, :k] = cons.emergency_l1
    res, e = clearance_residuals(P, params.obstacles[1:, None, :], cons.d_s)
    Cx[1:, k, :2] = -e[:, 0]
    d[1:, k] = res[:, 0]
    kind[1:, k] = SOFT
    zl[1:, k] = cons.soft_l1
    zq[1:, k] = cons.soft_l2
    row = k + 1
    for j, sign, bound in _state_bound_rows(config):
        Cx[1:, row, j] = sign
        d[1:, row] = sign * (bound - X[1:, j])
        row += 1
    for j, sign, bound in _control_bound_rows(config):
        Cu[:, row, j] = sign
        d[:N, row] = sign * (bound - U[:, j])
        row += 1

    return StageQP(Q, S, R, q, r, A, B, c, x0, Cx, Cu, d, kind, zl, zq)


def kkt_residual(qp: StageQP, lam: np.ndarray, slack: np.ndarray) -> float:
    """KKT residual of the OCP at the linearization point, using the QP multipliers.

    Combines the reduced stationarity (dynamics multipliers eliminated), the
    shooting defects, the violation of rows without a slack and complementarity.
    """
    N = qp.N
    rx = qp.q + np.einsum("nmi,nm->ni", qp.Cx, lam)
    ru = qp.r + np.einsum("nmj,nm->nj", qp.Cu, lam[:N])
    _, red = _costates(np.ascontiguousarray(rx), np.ascontiguousarray(ru), np.ascontiguousarray(qp.A),
                       np.ascontiguousarray(qp.B))
    hard = qp.kind == HARD
    violation = np.max(np.maximum(-qp.d[hard], 0.0), initial=0.0)
    comp = np.max(np.abs(lam * (qp.d + slack)), initial=0.0)
    return float(max(np.max(np.abs(red), initial=0.0), np.max(np.abs(qp.c), initial=0.0),
                     np.max(np.abs(qp.x0)), violation, comp))


# --------------------------------------------------------------------------
# RTI


def initialize_rti(measured_state, config: OcpConfig) -> RtiState:
    """Cold start: every node at the measured state, zero controls, no multipliers."""
    x = np.asarray(measured_state, dtype=float)
    return RtiState(np.tile(x, (config.N + 1, 1)), np.zeros((config.N, NU)), None)


def shift_warm_start(rti: RtiState) -> RtiState:
    """Drop the first node and duplicate the last one."""
    states = np.vstack([rti.states[1:], rti.states[-1:]])
    controls = np.vstack([rti.controls[1:], rti.controls[-1:]])
    lam = None if rti.lam is None else np.vstack([rti.lam[1:], rti.lam[-1:]])
    return RtiState(states, controls, lam)


def rollout_guess(rti: RtiState, measured_state, dt: float) -> RtiState:
    """Re-simulate the guess controls from the measured state through the nonlinear model."""
    X = np.empty_like(rti.states)
    X[0] = measured_state
    for n in range(rti.controls.shape[0]):
        X[n + 1] = rk4(X[n:n + 1], rti.controls[n:n + 1], dt)[0]
    return RtiState(X, rti.controls.copy(), rti.lam)


def _align_heading(states: np.ndarray, theta: float) -> np.ndarray:
    """Shift the unwrapped heading of a guess by a multiple of 2 pi to start near ``theta``."""
    turns = np.round((states[0, 2] - theta) / (2.0 * np.pi))
    if turns:
        states = states.copy()
        states[:, 2] -= 2.0 * np.pi * turns
    return states


def rti_step(measured_state, params: OcpParameters, rti: RtiState, config: OcpConfig, *,
             shift: bool = True, cancel: threading.Event | None = None):
    """One real-time iteration.

    Returns ``(control, solution, new_rti)``. ``control`` is ``None`` when the
    QP produced no usable step, in which case ``new_rti`` keeps the shifted
    guess. A shifted guess is re-simulated from the measured state when
    ``config.rollout_guess`` is set. ``shift=False`` re-linearizes around ``rti`` as it is, which turns
    repeated calls on a frozen problem into plain Gauss-Newton SQP.
    """
    start = time.perf_counter()
    guess = shift_warm_start(rti) if shift else rti.copy()
    measured = np.asarray(measured_state, dtype=float)
    if shift and config.rollout_guess:
        guess = rollout_guess(guess, measured, config.dt)
    X = _align_heading(guess.states, measured[2])
    X = X.copy()
    X[0] = measured
    params = replace(params, initial_state=RobotState(*measured))
    m = config.rows_per_stage
    lam0 = guess.lam if (config.warm_start_duals and guess.lam is not None
                         and guess.lam.shape == (config.N + 1, m)) else None

    qp = linearize(X, guess.controls, params, config)
    if not qp.all_finite():
        sol = OcpSolution(_normalized(X), guess.controls.copy(), np.zeros((config.N + 1, m)), qp.kind,
                          np.inf, SolverStatus.NUMERICAL_FAILURE, time.perf_counter() - start)
        return None, sol, RtiState(X, guess.controls.copy(), None)

    qsol = solve_qp(qp, tol=config.qp_tol, max_iter=config.qp_max_iter,
                    barrier_reduction=config.barrier_reduction, lam0=lam0, cancel=cancel)
    usable = qsol.status in (SolverStatus.SOLVED, SolverStatus.INFEASIBLE_HARD)
    if usable:
        new_X = X + qsol.dx
        new_X[0] = measured
        new_U = guess.controls + qsol.du
        new_rti = RtiState(new_X, new_U, qsol.lam)
        residual = kkt_residual(qp, qsol.lam, qsol.slack)
    else:
        new_X, new_U = X, guess.controls.copy()
        new_rti = RtiState(X, new_U, None)
        residual = np.inf
    sol = OcpSolution(_normalized(new_X), new_U.copy(), qsol.slack, qp.kind, residual, qsol.status,
                      time.perf_counter() - start, qsol.iterations)
    control = sol.first_control() if usable else None
    return control, sol, new_rti


def warm_up(config: OcpConfig) -> None:
    """Run one throwaway step so compiled kernels are loaded before the first timed cycle."""
    N, k = config.N, config.max_humans
    far = 1e3 * np.ones((N + 1, k, 2)) + np.arange(k)[None, :, None]
    params = OcpParameters(RobotState(), np.tile([1.0, 0.0, 0.0, 0.0], (N + 1, 1)), far, far[0],
                           np.full((N + 1, 2), 1e3))
    rti_step(RobotState(), params, initialize_rti(RobotState(), config), config)


def _normalized(X: np.ndarray) -> np.ndarray:
    out = X.copy()
    out[:, 2] = normalize_angle(out[:, 2])
    return out


__all__ = [
    "EMERGENCY_SLACK_TOL", "OcpConfig", "OcpParameters", "OcpSolution", "RtiState", "initialize_rti",
    "kkt_residual", "linearize", "rollout_guess", "rti_step", "shift_warm_start", "warm_up",
]
