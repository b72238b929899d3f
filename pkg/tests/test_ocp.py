import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from human_mpc.costs import CollisionCostParams, clearance_residuals, stage_cost, terminal_cost
from human_mpc.model import RobotState, integrate_step, rk4
from human_mpc.ocp import (
    OcpConfig,
    OcpParameters,
    RtiState,
    initialize_rti,
    linearize,
    rti_step,
    shift_warm_start,
)
from human_mpc.prediction import GoalShaping, HumanObservation, assemble_stage_parameters
from human_mpc.qp import EMERGENCY, HARD, SOFT, SolverStatus

SHAPING = GoalShaping(0.6, 0.5)


def _params(cfg, goal, humans=(), obstacles=(), robot=RobotState(), shaping=SHAPING):
    return assemble_stage_parameters(goal, list(humans), list(obstacles), robot, cfg.N, cfg.dt,
                                     cfg.max_humans, shaping)


def _rollout(x0, U, dt):
    X = np.empty((U.shape[0] + 1, 4))
    X[0] = x0
    for n in range(U.shape[0]):
        X[n + 1] = rk4(X[n:n + 1], U[n:n + 1], dt)[0]
    return X


def _closed_loop(cfg, goal, cycles, humans=(), x=RobotState()):
    rti = initialize_rti(x, cfg)
    path = [x]
    for _ in range(cycles):
        u, _, rti = rti_step(x, _params(cfg, goal, humans, robot=x), rti, cfg)
        x = integrate_step(x, u if u is not None else (0.0, 0.0), cfg.dt)
        path.append(x)
    return np.array(path)


def test_rollout_consistent_guess_has_zero_defects():
    cfg = OcpConfig(max_humans=2)
    rng = np.random.default_rng(0)
    U = rng.uniform(-1, 1, size=(cfg.N, 2))
    X = _rollout([0.3, -0.2, 0.4, 0.1], U, cfg.dt)
    qp = linearize(X, U, _params(cfg, (2, 1, 0, 0), robot=RobotState(*X[0])), cfg)
    assert np.max(np.abs(qp.c)) == 0.0
    assert np.max(np.abs(qp.x0)) == 0.0


def test_straight_line_dynamics_jacobian_hand_derived():
    cfg = OcpConfig(max_humans=0)
    v, dt = 0.7, cfg.dt
    X = np.zeros((cfg.N + 1, 4))
    X[:, 0] = v * dt * np.arange(cfg.N + 1)
    X[:, 3] = v
    U = np.zeros((cfg.N, 2))
    qp = linearize(X, U, _params(cfg, (5, 0, 0, 0)), cfg)
    # theta = 0, omega = 0: x and v decouple; y picks up v*dt per unit of heading
    A = np.eye(4)
    A[0, 3] = dt
    A[1, 2] = v * dt
    B = np.array([[0.5 * dt**2, 0.0], [0.0, 0.5 * v * dt**2], [0.0, dt], [dt, 0.0]])
    np.testing.assert_allclose(qp.A, np.broadcast_to(A, qp.A.shape), atol=1e-10)
    np.testing.assert_allclose(qp.B, np.broadcast_to(B, qp.B.shape), atol=1e-10)


def _total_cost(X, U, params, cfg):
    stages = params.stages
    total = sum(stage_cost(X[n], U[n], stages[n], cfg.weights, cfg.collision)[0] for n in range(cfg.N))
    return total + terminal_cost(X[-1], stages[-1], cfg.weights, cfg.collision)[0]


def test_finite_difference_jacobians_on_random_stages():
    rng = np.random.default_rng(3)
    cfg = OcpConfig(N=4, horizon=0.4, max_humans=2)
    h = 1e-6
    checked = 0
    while checked < 100:
        X = np.column_stack([rng.uniform(-2, 2, (cfg.N + 1, 2)), rng.uniform(-np.pi, np.pi, cfg.N + 1),
                             rng.uniform(-0.2, 0.8, cfg.N + 1)])
        U = rng.uniform(-1, 1, (cfg.N, 2))
        humans = [HumanObservation(i, rng.uniform(-2, 2, 2), rng.uniform(-1, 1, 2)) for i in range(2)]
        params = _params(cfg, rng.uniform(-2, 2, 4), humans, [rng.uniform(-2, 2, 2)],
                         robot=RobotState(*X[0]), shaping=None)
        qp = linearize(X, U, params, cfg)
        d_h = cfg.constraints.d_h
        for n in range(cfg.N):
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                fd = (rk4(X[n:n + 1] + e, U[n:n + 1], cfg.dt) - rk4(X[n:n + 1] - e, U[n:n + 1], cfg.dt))[0] / (2 * h)
                np.testing.assert_allclose(qp.A[n][:, i], fd, rtol=1e-5, atol=1e-8)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd = (rk4(X[n:n + 1], U[n:n + 1] + e, cfg.dt) - rk4(X[n:n + 1], U[n:n + 1] - e, cfg.dt))[0] / (2 * h)
                np.testing.assert_allclose(qp.B[n][:, j], fd, rtol=1e-5, atol=1e-8)
            # human clearance rows at node n+1 are -residual Jacobians
            P = X[n + 1, :2]
            dist = np.hypot(*(P - params.humans_current).T)
            if np.all(dist > 1e-4):
                for i in range(2):
                    e = np.zeros(2)
                    e[i] = h
                    rp, _ = clearance_residuals((P + e)[None], params.humans_current[None], d_h)
                    rm, _ = clearance_residuals((P - e)[None], params.humans_current[None], d_h)
                    np.testing.assert_allclose(-qp.Cx[n + 1, :2, i], (rp - rm)[0] / (2 * h), rtol=1e-5, atol=1e-8)
            checked += 1
        # cost gradient over all states and controls
        for n in range(cfg.N + 1):
            for i in range(4):
                E = np.zeros_like(X)
                E[n, i] = h
                fd = (_total_cost(X + E, U, params, cfg) - _total_cost(X - E, U, params, cfg)) / (2 * h)
                assert qp.q[n, i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_row_layout_and_kinds():
    cfg = OcpConfig(max_humans=3)
    rti = initialize_rti(RobotState(), cfg)
    qp = linearize(rti.states, rti.controls, _params(cfg, (2, 0, 0, 0)), cfg)
    assert qp.m == cfg.rows_per_stage == 3 + 1 + 2 + 4
    assert np.all(qp.kind[1:, :3] == EMERGENCY)
    assert np.all(qp.kind[1:, 3] == SOFT)
    assert np.all(qp.kind[:, 4:] == HARD)
    # the initial node carries no state rows
    assert not qp.Cx[0].any()


def test_at_goal_control_is_zero():
    cfg = OcpConfig(max_humans=0)
    x = RobotState(1.0, -0.5, 0.3, 0.0)
    params = _params(cfg, tuple(x), robot=x)
    u, sol, rti = rti_step(x, params, initialize_rti(x, cfg), cfg, shift=False)
    assert sol.status == SolverStatus.SOLVED
    assert abs(u.a) <= 1e-6 and abs(u.omega) <= 1e-6
    np.testing.assert_allclose(rti.states, np.tile(tuple(x), (cfg.N + 1, 1)), atol=1e-6)


@pytest.mark.slow
def test_closed_loop_reaches_goal_two_meters_ahead():
    cfg = OcpConfig(max_humans=0)
    path = _closed_loop(cfg, (2.0, 0.0, 0.0, 0.0), 100)
    assert np.hypot(path[-1, 0] - 2.0, path[-1, 1]) <= 0.05


@pytest.mark.slow
def test_human_near_path_keeps_larger_distance_than_cost_free_planner():
    # slightly off the path so geometry, not roundoff, picks the side to pass on
    human = [HumanObservation(1, [2.5, 0.1], [0.0, 0.0])]
    dist = {}
    for q in (2.0, 1e-9):
        cfg = OcpConfig(max_humans=1, collision=CollisionCostParams(q=q))
        path = _closed_loop(cfg, (5.0, 0.0, 0.0, 0.0), 120, human)
        dist[q] = np.min(np.hypot(path[:, 0] - 2.5, path[:, 1] - 0.1))
    assert dist[1e-9] >= cfg.constraints.d_h
    assert dist[2.0] > dist[1e-9] + 0.1


def test_initialize_rti_cold_start():
    cfg = OcpConfig()
    x = RobotState(1, 2, 0.5, 0.1)
    a, b = initialize_rti(x, cfg), initialize_rti(x, cfg)
    assert a.states.shape == (cfg.N + 1, 4) and a.controls.shape == (cfg.N, 2)
    assert np.all(a.states == np.array(x)) and np.all(a.controls == 0) and a.lam is None
    assert np.array_equal(a.states, b.states)


def test_shift_semantics():
    rng = np.random.default_rng(1)
    const = RtiState(np.tile([1.0, 2, 3, 4], (6, 1)), np.tile([0.5, -0.5], (5, 1)), np.ones((6, 3)))
    s = shift_warm_start(const)
    assert np.array_equal(s.states, const.states) and np.array_equal(s.controls, const.controls)
    rti = RtiState(rng.normal(size=(6, 4)), rng.normal(size=(5, 2)), rng.normal(size=(6, 3)))
    s = shift_warm_start(rti)
    np.testing.assert_array_equal(s.states, np.vstack([rti.states[1:], rti.states[-1:]]))
    np.testing.assert_array_equal(s.controls, np.vstack([rti.controls[1:], rti.controls[-1:]]))
    twice = shift_warm_start(shift_warm_start(rti))
    np.testing.assert_array_equal(twice.states, shift_warm_start(s).states)
    np.testing.assert_array_equal(twice.states[:4], rti.states[2:])


def test_rti_step_deterministic():
    cfg = OcpConfig(max_humans=2)
    humans = [HumanObservation(1, [1.5, 0.4], [-0.3, 0.0]), HumanObservation(2, [3.0, -1.0], [0.0, 0.5])]
    x = RobotState(0.0, 0.0, 0.1, 0.2)
    params = _params(cfg, (4, 0, 0, 0), humans, [[2.0, 2.0]], robot=x)
    rti = initialize_rti(x, cfg)
    _, warm, rti = rti_step(x, params, rti, cfg)
    ua, a, ra = rti_step(x, params, rti, cfg)
    ub, b, rb = rti_step(x, params, rti, cfg)
    assert ua == ub
    for name in ("states", "controls", "slacks"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(ra.lam, rb.lam) and a.kkt_residual == b.kkt_residual


def test_states_zero_pinned_to_measurement():
    cfg = OcpConfig(max_humans=1)
    x = RobotState(0.2, -0.1, 3.0, 0.3)
    rti = initialize_rti(RobotState(), cfg)
    _, sol, new = rti_step(x, _params(cfg, (3, 1, 0, 0), robot=x), rti, cfg)
    assert sol.status == SolverStatus.SOLVED
    assert np.array_equal(sol.states[0], np.array(x))
    assert np.all(sol.slacks >= 0)
    assert np.all(np.abs(sol.states[:, 2]) <= np.pi)


def test_heading_wrap_is_aligned_across_cycles():
    # a measurement that wrapped from +pi to -pi must give the same plan as its unwrapped twin
    cfg = OcpConfig(max_humans=0)
    goal = (-2.0, 0.0, np.pi, 0.0)
    x = RobotState(0.0, 0.0, np.pi - 0.01, 0.0)
    _, _, rti = rti_step(x, _params(cfg, goal, robot=x), initialize_rti(x, cfg), cfg)
    plans = []
    for theta in (-np.pi + 0.01, np.pi + 0.01):
        x2 = RobotState(0.0, 0.0, theta, 0.0)
        _, sol, new = rti_step(x2, _params(cfg, goal, robot=x2), rti, cfg)
        assert sol.status == SolverStatus.SOLVED
        assert np.ptp(new.states[:, 2]) < np.pi
        plans.append(sol)
    np.testing.assert_allclose(plans[0].controls, plans[1].controls, atol=1e-9)
    np.testing.assert_allclose(plans[0].states, plans[1].states, atol=1e-9)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(-0.3, 0.3))
def test_rti_contraction_in_static_world(distance, heading):
    # goal straight ahead along the current heading, no humans, obstacle far away
    cfg = OcpConfig(max_humans=0)
    x = RobotState(0.0, 0.0, heading, 0.0)
    goal = (distance * np.cos(heading), distance * np.sin(heading), heading, 0.0)
    params = _params(cfg, goal, robot=x)
    rti = initialize_rti(x, cfg)
    residuals = []
    for _ in range(6):
        _, sol, rti = rti_step(x, params, rti, cfg, shift=False)
        residuals.append(sol.kkt_residual)
        if sol.kkt_residual < 1e-6:
            break
    assert residuals[-1] < 1e-6
    assert all(b <= a for a, b in zip(residuals, residuals[1:]))


def test_parameter_shape_validation():
    cfg = OcpConfig(max_humans=2)
    params = _params(cfg, (1, 0, 0, 0))
    bad = OcpParameters(params.initial_state, params.goals, params.humans[:, :1], params.humans_current[:1],
                        params.obstacles)
    with pytest.raises(ValueError):
        linearize(np.zeros((cfg.N + 1, 4)), np.zeros((cfg.N, 2)), bad, cfg)
    with pytest.raises(ValueError):
        linearize(np.zeros((cfg.N, 4)), np.zeros((cfg.N, 2)), params, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        OcpConfig(N=1)
    with pytest.raises(ValueError):
        OcpConfig(horizon=0.0)
    assert OcpConfig().dt == pytest.approx(0.1)
