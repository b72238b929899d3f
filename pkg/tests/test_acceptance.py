"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import math
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from human_mpc.bench import run_scalability, run_scenario
from human_mpc.cli import main
from human_mpc.costs import (
    CollisionCostParams,
    CostWeights,
    StageParameters,
    collision_cost_scalar,
    human_clearance_residual,
    linear_branch,
    logistic_branch,
    obstacle_clearance_residual,
    stage_cost,
    terminal_cost,
)
from human_mpc.model import RobotState, rk4, rk4_with_sensitivities
from human_mpc.monitor import Cause, MonitorConfig, Supervisor, protective_stop
from human_mpc.ocp import OcpConfig, rti_step
from human_mpc.oracle import active_set_enumeration, random_stage_qp
from human_mpc.prediction import GoalShaping, HumanObservation, assemble_stage_parameters, predict_constant_velocity
from human_mpc.qp import SolverStatus, solve_qp
from human_mpc.sim import Scenario, builtin_spec, materialize

PAPER = CollisionCostParams(q=2.0, kappa=5.0, d_th=1.0)
EPS = np.finfo(float).eps


def test_collision_cost_exactness(acceptance):
    mpmath.mp.dps = 50
    oracle = float(mpmath.mpf(2) / (1 + mpmath.e ** 5))
    at_th = (float(linear_branch(1.0, PAPER)[0]), float(logistic_branch(1.0, PAPER)[0]),
             collision_cost_scalar(1.0, PAPER)[0])
    f0 = collision_cost_scalar(0.0, PAPER)[0]
    err2 = abs(collision_cost_scalar(2.0, PAPER)[0] - oracle)
    ok = at_th == (1.0, 1.0, 1.0) and f0 == 3.5 and err2 <= 1e-9
    assert acceptance.record("collision-cost exactness", ok,
                             f"f(1) branches {at_th[:2]}, f(0)={f0}, |f(2)-oracle|={err2:.1e} (tol 1e-9)")


def test_convexity_and_smoothness(acceptance):
    rng = np.random.default_rng(0)
    # three distinct points with gaps of at least 0.01 so rounding of f stays far below 1e-10
    a = rng.uniform(0.0, 10.0 - 0.02, 10_000)
    h1 = rng.uniform(0.01, 1.0, 10_000)
    h2 = rng.uniform(0.01, 1.0, 10_000)
    b = np.minimum(a + h1, 10.0 - 0.01)
    c = np.minimum(b + h2, 10.0)
    f = [np.array([collision_cost_scalar(x, PAPER)[0] for x in pts]) for pts in (a, b, c)]
    dd = ((f[2] - f[1]) / (c - b) - (f[1] - f[0]) / (b - a)) / (c - a)
    left = float(linear_branch(1.0, PAPER)[1])
    right = float(logistic_branch(1.0, PAPER)[1])
    ok = dd.min() >= -1e-10 and left == right == -2.5
    assert acceptance.record("convexity & smoothness", ok,
                             f"min second divided difference {dd.min():.3e} over 1e4 triples (tol -1e-10); "
                             f"one-sided slopes at d_th {left}, {right}")


def _fd_grad(fun, x, h):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def _close(analytic, fd, scale):
    # relative 1e-5, with an absolute floor at the rounding noise of the finite difference
    return bool(np.all(np.abs(analytic - fd) <= 1e-5 * np.maximum(np.abs(analytic), np.abs(fd)) + scale))


def test_derivative_correctness(acceptance):
    rng = np.random.default_rng(1)
    w = CostWeights()
    h = 1e-5
    worst_eig = math.inf
    failures = 0
    for _ in range(1000):
        x = np.concatenate([rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi, 1), rng.uniform(-0.5, 1, 1)])
        u = rng.uniform(-1, 1, 2)
        humans = x[:2] + rng.uniform(-4, 4, (int(rng.integers(0, 4)), 2))
        sp = StageParameters(goal=rng.uniform(-3, 3, 4), humans=humans, humans_current=humans,
                             obstacle=rng.uniform(-3, 3, 2))
        c, g, H = stage_cost(x, u, sp, w, PAPER)
        z = np.concatenate([x, u])
        fd = _fd_grad(lambda zz: stage_cost(zz[:4], zz[4:], sp, w, PAPER)[0], z, h)
        failures += not _close(g, fd, 1e-9 * (1 + abs(c)) / h)
        ct, gt, Ht = terminal_cost(x, sp, w, PAPER)
        fdt = _fd_grad(lambda xx: terminal_cost(xx, sp, w, PAPER)[0], x, h)
        failures += not _close(gt, fdt, 1e-9 * (1 + abs(ct)) / h)
        worst_eig = min(worst_eig, np.linalg.eigvalsh(H).min(), np.linalg.eigvalsh(Ht).min())

        _, A, B = rk4_with_sensitivities(x[None], u[None], 0.1)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            col = (rk4((x + e)[None], u[None], 0.1) - rk4((x - e)[None], u[None], 0.1))[0] / (2 * h)
            failures += not _close(A[0][:, j], col, 1e-9)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            col = (rk4(x[None], (u + e)[None], 0.1) - rk4(x[None], (u - e)[None], 0.1))[0] / (2 * h)
            failures += not _close(B[0][:, j], col, 1e-9)
        for residual, point in ((human_clearance_residual, humans[0] if len(humans) else x[:2] + 1.0),
                                (obstacle_clearance_residual, sp.obstacle)):
            _, jac = residual(x, point, 0.5)
            fdr = _fd_grad(lambda xx: residual(xx, point, 0.5)[0], x, h)
            failures += not _close(jac, fdr, 1e-9)
    ok = failures == 0 and worst_eig >= -1e-10
    assert acceptance.record("derivative correctness", ok,
                             f"{failures} mismatches over 1e3 samples (rel 1e-5); "
                             f"min Gauss-Newton Hessian eigenvalue {worst_eig:.2e} (tol -1e-10)")


def test_qp_oracle_equivalence(acceptance):
    rng = np.random.default_rng(0)
    worst, unsolved = 0.0, 0
    for k in range(200):
        qp = random_stage_qp(rng, soft_fraction=0.3 if k % 2 else 0.0)
        assert qp.N <= 5 and qp.nx <= 4 and qp.m <= 4
        sol = solve_qp(qp)
        unsolved += sol.status != SolverStatus.SOLVED
        dx, du, _, _ = active_set_enumeration(qp)
        worst = max(worst, np.max(np.abs(sol.dx - dx)), np.max(np.abs(sol.du - du)))
    ok = worst <= 1e-6 and unsolved == 0
    assert acceptance.record("QP oracle equivalence", ok,
                             f"max primal deviation {worst:.1e} over 200 QPs (tol 1e-6), {unsolved} unsolved")


def test_closed_loop_goal_reaching(acceptance):
    cfg = OcpConfig()
    assert cfg.N == 50 and cfg.horizon == 5.0
    scenario = Scenario("empty", RobotState(), (3.0, 0.0, 0.0, 0.0), (), (), 30.0, 0)
    m = run_scenario(scenario, ocp_config=cfg).metrics
    ok = m.reached and m.time_to_goal <= 30.0 and m.path_length <= 1.1 * 3.0
    assert acceptance.record("closed-loop goal reaching", ok,
                             f"reached={m.reached} in {m.time_to_goal} s (limit 30), "
                             f"path {m.path_length:.4f} m (limit 3.3)")


@pytest.mark.slow
def test_safety_invariant(acceptance):
    violations, collisions, failed = 0, 0, []
    for name in ("random_crowded_cluttered", "crossing_group"):
        for seed in range(1, 21):
            m = run_scenario(materialize(builtin_spec(name), seed)).metrics
            violations += m.safety_violations
            collisions += m.collisions
            if m.safety_violations or m.collisions:
                failed.append(f"{name}/{seed}")
    ok = violations == 0 and collisions == 0
    assert acceptance.record("safety invariant", ok,
                             f"40 runs, {violations} unprotected instants below d_h, {collisions} collision "
                             f"events{', failing: ' + ' '.join(failed) if failed else ''}")


class _FaultySolver:
    def __init__(self):
        self.fault = None

    def __call__(self, measured, params, rti, config, *, cancel=None):
        if self.fault == "delay":
            if cancel.wait(2 * MonitorConfig().budget):
                raise RuntimeError("cancelled")
        u, sol, new = rti_step(measured, params, rti, config, cancel=cancel)
        if self.fault == "infeasible":
            sol = replace(sol, status=SolverStatus.INFEASIBLE_HARD)
        return u, sol, new


def _fault_run(fault):
    cfg = OcpConfig(max_humans=1)
    mon = MonitorConfig()
    x = RobotState(v=0.5)
    params = assemble_stage_parameters((3.0, 0.0, 0.0, 0.0), [], [], x, cfg.N, cfg.dt, cfg.max_humans,
                                       GoalShaping(0.6, 0.5))
    solver = _FaultySolver()
    with Supervisor(cfg, mon, solver=solver) as sup:
        for _ in range(3):
            sup.step(x, params)
        solver.fault = fault
        start = time.perf_counter()
        hit = sup.step(x, params)
        elapsed = time.perf_counter() - start
        solver.fault = None
        after = [sup.step(x, params).stop_active for _ in range(6)]
    stopped = hit.stop_active and hit.control == protective_stop(x, mon)
    return hit.verdict.cause, stopped, elapsed, after


def test_monitor_fault_injection(acceptance):
    budget = MonitorConfig().budget
    cause_t, stop_t, elapsed_t, after_t = _fault_run("delay")
    cause_i, stop_i, elapsed_i, after_i = _fault_run("infeasible")
    resume = [True, True, True, True, False, False]
    ok = (cause_t == Cause.TIMEOUT and stop_t and elapsed_t <= budget + 0.01
          and cause_i == Cause.UNSAFE_SOLUTION and stop_i and after_t == resume and after_i == resume)
    assert acceptance.record("monitor fault injection", ok,
                             f"delay -> {cause_t.value} stop after {1e3 * elapsed_t:.0f} ms; infeasible -> "
                             f"{cause_i.value}; resumes on clean cycle {after_t.index(False) + 1} / "
                             f"{after_i.index(False) + 1} (expected 5)")


@pytest.mark.slow
def test_scalability_trend(acceptance):
    report = run_scalability((5, 10, 20, 30), cycles=500)
    mean = {r.num_humans: r.mean_ms for r in report.rows}
    ratio = mean[30] / mean[5]
    ok = ratio <= 3.0 and mean[30] <= 50.0 and all(r.cycles == 500 for r in report.rows)
    assert acceptance.record("scalability trend", ok,
                             f"mean ms {', '.join(f'{n}: {t:.2f}' for n, t in mean.items())}; "
                             f"ratio 30/5 = {ratio:.2f} (limit 3.0), 30 humans {mean[30]:.1f} ms (limit 50)")


def test_prediction_exactness(acceptance):
    rng = np.random.default_rng(2)
    mpmath.mp.dps = 40
    worst = 0.0
    for _ in range(1000):
        obs = HumanObservation(0, rng.uniform(-50, 50, 2), rng.uniform(-1.5, 1.5, 2))
        N, dt = int(rng.integers(1, 60)), float(rng.uniform(0.01, 0.5))
        tr = predict_constant_velocity(obs, N, dt)
        for n in range(1, N + 1, 7):
            for i in range(2):
                exact = mpmath.mpf(obs.position[i]) + n * mpmath.mpf(dt) * mpmath.mpf(obs.velocity[i])
                scale = abs(obs.position[i]) + n * dt * abs(obs.velocity[i])
                worst = max(worst, float(abs(tr.positions[n - 1, i] - exact)) / (EPS * max(scale, 1e-300)))
    # a product and a sum each round once, so the error stays within a few units in the last place
    ok = worst <= 3.0
    assert acceptance.record("prediction exactness", ok,
                             f"max error {worst:.2f} eps x magnitude over 1e3 fuzzed forecasts (limit 3)")


@pytest.mark.slow
def test_determinism(acceptance, tmp_path):
    codes = [main(["run", "crossing_group", "--seed", "1", "--out", str(tmp_path / d)]) for d in ("a", "b")]
    a, b = ((tmp_path / d / "metrics.json").read_bytes() for d in ("a", "b"))
    ok = a == b and codes == [0, 0]
    assert acceptance.record("determinism", ok, f"metrics JSON byte-identical: {a == b} ({len(a)} bytes), "
                                                f"exit codes {codes}")
