"""Stage-structured convex QP solver.

Solves

    min  sum_n 0.5 [x;u]' [Q S'; S R] [x;u] + q'x + r'u  + 0.5 x_N' Q_N x_N + q_N' x_N
         + sum_rows (zl * s + 0.5 zq * s^2)
    s.t. x_0 = x0,   x_{n+1} = A_n x_n + B_n u_n + c_n
         Cx_n x_n + Cu_n u_n <= d_n (+ s_n on rows with a slack),  s_n >= 0

with a Mehrotra predictor-corrector primal-dual interior-point method. Every
Newton system is an equality-constrained LQ problem solved by a Riccati
recursion (compiled with numba), so one iteration costs O(N).
"""
from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass

import numpy as np
from numba import njit

log = logging.getLogger(__name__)

# row kinds
HARD = 0        # no slack
EMERGENCY = 1   # hard constraint carrying a large L1 slack so the QP stays feasible
SOFT = 2        # softened constraint, L1 + L2 slack penalty

EMERGENCY_SLACK_TOL = 1e-6
ACCEPT_TOL = 1e-6       # residual at which a stalled solve still counts as solved
_TAU = 0.995            # fraction-to-boundary
_DUAL_BLOWUP = 1e12     # duals beyond this with persistent primal residual: infeasible
_T_MIN = 1.0
_WARM_LAM_MIN = 1e-1
_WARM_MU = 1.0


class SolverStatus(str, enum.Enum):
    SOLVED = "solved"
    MAX_ITER_QP = "max_iter_qp"
    INFEASIBLE_HARD = "infeasible_hard"
    NUMERICAL_FAILURE = "numerical_failure"


class SolveCancelled(Exception):
    """Raised when a cooperative cancellation request interrupts a solve."""


@dataclass
class StageQP:
    """Stage-wise QP data; shapes use N stages, nx states, nu controls, m rows per stage.

    Q (N+1,nx,nx)  S (N,nu,nx)  R (N,nu,nu)  q (N+1,nx)  r (N,nu)
    A (N,nx,nx)    B (N,nx,nu)  c (N,nx)     x0 (nx,)
    Cx (N+1,m,nx)  Cu (N,m,nu)  d (N+1,m)    kind/zl/zq (N+1,m)

    The terminal stage has no control, so its rows may only involve ``x_N``.
    """

    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    Cx: np.ndarray
    Cu: np.ndarray
    d: np.ndarray
    kind: np.ndarray
    zl: np.ndarray
    zq: np.ndarray

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def nx(self) -> int:
        return self.A.shape[1]

    @property
    def nu(self) -> int:
        return self.B.shape[2]

    @property
    def m(self) -> int:
        return self.d.shape[1]

    def check(self) -> None:
        N, nx, nu, m = self.N, self.nx, self.nu, self.m
        shapes = {
            "Q": (N + 1, nx, nx), "S": (N, nu, nx), "R": (N, nu, nu), "q": (N + 1, nx),
            "r": (N, nu), "B": (N, nx, nu), "c": (N, nx), "x0": (nx,), "Cx": (N + 1, m, nx),
            "Cu": (N, m, nu), "d": (N + 1, m), "kind": (N + 1, m), "zl": (N + 1, m),
            "zq": (N + 1, m),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(getattr(self, k)))
            for k in ("Q", "S", "R", "q", "r", "A", "B", "c", "x0", "Cx", "Cu", "d", "zl", "zq")
        )

    @classmethod
    def from_stage_rows(cls, Q, S, R, q, r, A, B, c, x0, rows):
        """Build from per-stage constraint lists.

        ``rows[n]`` is a list of ``(cx, cu, d, kind, zl, zq)`` tuples (``cu`` is
        ignored at the terminal stage). Stages are padded to a common row count
        with the always-inactive row ``0 <= 1``.
        """
        Q = np.asarray(Q, dtype=float)
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        N, nx, nu = A.shape[0], A.shape[1], B.shape[2]
        m = max(1, max(len(rr) for rr in rows))
        Cx = np.zeros((N + 1, m, nx))
        Cu = np.zeros((N, m, nu))
        d = np.ones((N + 1, m))
        kind = np.zeros((N + 1, m), dtype=np.int8)
        zl = np.zeros((N + 1, m))
        zq = np.zeros((N + 1, m))
        for n, stage_rows in enumerate(rows):
            for i, (cx, cu, dd, kk, l1, l2) in enumerate(stage_rows):
                Cx[n, i] = cx
                if n < N:
                    Cu[n, i] = cu
                d[n, i] = dd
                kind[n, i] = kk
                zl[n, i] = l1
                zq[n, i] = l2
        qp = cls(Q, np.asarray(S, float), np.asarray(R, float), np.asarray(q, float),
                 np.asarray(r, float), A, B, np.asarray(c, float), np.asarray(x0, float),
                 Cx, Cu, d, kind, zl, zq)
        qp.check()
        return qp


@dataclass
class QPSolution:
    dx: np.ndarray          # (N+1, nx)
    du: np.ndarray          # (N, nu)
    lam: np.ndarray         # (N+1, m) inequality multipliers
    pi: np.ndarray          # (N+1, nx) dynamics multipliers; pi[0] belongs to x_0 = x0
    slack: np.ndarray       # (N+1, m), zero on rows without a slack
    status: SolverStatus
    iterations: int
    residual: float


# --------------------------------------------------------------------------
# Riccati recursion


@njit(cache=True)
def _upper_solve(Rm, Y):
    """Back substitution ``Rm X = Y`` for upper-triangular ``Rm`` and 2-D ``Y``."""
    n = Rm.shape[0]
    X = np.empty_like(Y)
    for i in range(n - 1, -1, -1):
        acc = Y[i].copy()
        for j in range(i + 1, n):
            acc -= Rm[i, j] * X[j]
        X[i] = acc / Rm[i, i]
    return X


@njit(cache=True)
def _upper_solve_vec(Rm, y):
    n = Rm.shape[0]
    x = np.empty_like(y)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for j in range(i + 1, n):
            acc -= Rm[i, j] * x[j]
        x[i] = acc / Rm[i, i]
    return x


@njit(cache=True)
def _lower_solve_t(Rm, y):
    """Forward substitution ``Rm' x = y`` for upper-triangular ``Rm``."""
    n = Rm.shape[0]
    x = np.empty_like(y)
    for i in range(n):
        acc = y[i]
        for j in range(i):
            acc -= Rm[j, i] * x[j]
        x[i] = acc / Rm[i, i]
    return x


@njit(cache=True)
def _riccati_factor(G, A, B):
    """Square-root Riccati factorization.

    ``G[n]`` holds rows whose Gram matrix is the stage Hessian over ``[u; x]``
    (the terminal stage uses only the x columns). Each step QR-factorizes the
    stacked rows ``[G_n; L_{n+1}' [B A]]`` instead of forming the Schur
    complement, which keeps the factorization accurate when a few rows carry
    very large weights. Returns ``P``, the feedback ``K`` and the triangular
    factor ``Ru`` with ``Ru' Ru = R + B' P B``.
    """
    N = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    rows = G.shape[1]
    P = np.empty((N + 1, nx, nx))
    K = np.empty((N, nu, nx))
    Ru = np.empty((N, nu, nu))
    _, Rn = np.linalg.qr(np.ascontiguousarray(G[N][:, nu:]))
    Lt = np.ascontiguousarray(Rn[:nx])
    P[N] = np.ascontiguousarray(Lt.T) @ Lt
    F = np.empty((rows + nx, nu + nx))
    for n in range(N - 1, -1, -1):
        F[:rows] = G[n]
        F[rows:, :nu] = Lt @ np.ascontiguousarray(B[n])
        F[rows:, nu:] = Lt @ np.ascontiguousarray(A[n])
        _, Rf = np.linalg.qr(F)
        R11 = Rf[:nu, :nu].copy()
        for i in range(nu):
            if not abs(R11[i, i]) > 0.0:
                raise ZeroDivisionError("singular control Hessian")
        K[n] = -_upper_solve(R11, np.ascontiguousarray(Rf[:nu, nu:]))
        Ru[n] = R11
        Lt = Rf[nu:, nu:].copy()
        P[n] = np.ascontiguousarray(Lt.T) @ Lt
    return P, K, Ru


@njit(cache=True)
def _riccati_solve(P, K, Ru, A, B, q, r, c, x0):
    N = A.shape[0]
    nx = A.shape[1]
    nu = B.shape[2]
    p = np.empty((N + 1, nx))
    k = np.empty((N, nu))
    p[N] = q[N]
    for n in range(N - 1, -1, -1):
        v = P[n + 1] @ c[n] + p[n + 1]
        qu = r[n] + B[n].T @ v
        qx = q[n] + A[n].T @ v
        k[n] = -_upper_solve_vec(Ru[n], _lower_solve_t(Ru[n], qu))
        # Qux' k = K' qu because Quu K = -Qux and Quu k = -qu
        p[n] = qx + K[n].T @ qu
    X = np.empty((N + 1, nx))
    U = np.empty((N, nu))
    X[0] = x0
    for n in range(N):
        U[n] = K[n] @ X[n] + k[n]
        X[n + 1] = A[n] @ X[n] + B[n] @ U[n] + c[n]
    Pi = np.empty((N + 1, nx))
    for n in range(N + 1):
        Pi[n] = P[n] @ X[n] + p[n]
    return X, U, Pi


@njit(cache=True)
def _costates(rx, ru, A, B):
    """Dynamics multipliers that zero the state stationarity rows, and the
    remaining control stationarity residual."""
    N = A.shape[0]
    nx = A.shape[1]
    pi = np.empty((N + 1, nx))
    red = np.empty_like(ru)
    pi[N] = rx[N]
    for n in range(N - 1, -1, -1):
        red[n] = ru[n] + B[n].T @ pi[n + 1]
        pi[n] = rx[n] + A[n].T @ pi[n + 1]
    return pi, red


def stage_square_roots(Q, S, R):
    """Rows ``G[n]`` with ``G[n]' G[n] = [[R_n, S_n], [S_n', Q_n]]`` (eigenvalues clamped at 0).

    The terminal stage carries only ``Q_N`` in its x columns.
    """
    N, nx = S.shape[0], Q.shape[1]
    nu = S.shape[1]
    H = np.zeros((N + 1, nu + nx, nu + nx))
    H[:N, :nu, :nu] = R
    H[:N, :nu, nu:] = S
    H[:N, nu:, :nu] = np.swapaxes(S, 1, 2)
    H[:, nu:, nu:] = Q
    H = 0.5 * (H + np.swapaxes(H, 1, 2))
    lam, V = np.linalg.eigh(H)
    return np.sqrt(np.maximum(lam, 0.0))[..., None] * np.swapaxes(V, 1, 2)


def riccati_lq(Q, S, R, q, r, A, B, c, x0, return_cost_to_go=False):
    """Solve an equality-constrained LQ problem by Riccati recursion.

    Returns ``(X, U, Pi)`` and, if requested, the cost-to-go matrices ``P``.
    """
    arrs = [np.ascontiguousarray(a, dtype=float) for a in (Q, S, R, q, r, A, B, c, x0)]
    Q, S, R, q, r, A, B, c, x0 = arrs
    P, K, Ru = _riccati_factor(stage_square_roots(Q, S, R), A, B)
    X, U, Pi = _riccati_solve(P, K, Ru, A, B, q, r, c, x0)
    if return_cost_to_go:
        return X, U, Pi, P
    return X, U, Pi


# --------------------------------------------------------------------------
# interior point


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest step keeping ``v + alpha dv >= 0`` (may exceed one)."""
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def solve_qp(
    qp: StageQP,
    *,
    tol: float = 1e-8,
    max_iter: int = 30,
    barrier_reduction: float = 0.2,
    lam0: np.ndarray | None = None,
    cancel: threading.Event | None = None,
) -> QPSolution:
    """Solve a :class:`StageQP` by primal-dual interior point.

    The centering parameter follows Mehrotra's heuristic, capped at
    ``barrier_reduction`` so the barrier shrinks at least that fast. ``lam0``
    optionally warm-starts the inequality multipliers. ``cancel`` is polled
    once per iteration.

    The best iterate seen is kept: a solve that stalls (or whose factorization
    breaks down) with residual below ``ACCEPT_TOL`` is reported as solved from
    that iterate.
    """
    N, nx, nu, m = qp.N, qp.nx, qp.nu, qp.m
    f64 = np.float64
    Q = np.ascontiguousarray(qp.Q, dtype=f64)
    A = np.ascontiguousarray(qp.A, dtype=f64)
    B = np.ascontiguousarray(qp.B, dtype=f64)
    c = np.ascontiguousarray(qp.c, dtype=f64)
    x0 = np.ascontiguousarray(qp.x0, dtype=f64)

    # pad the control dimension of the terminal stage so all stages look alike
    S = np.zeros((N + 1, nu, nx))
    S[:N] = qp.S
    R = np.zeros((N + 1, nu, nu))
    R[:N] = qp.R
    r = np.zeros((N + 1, nu))
    r[:N] = qp.r
    Cu = np.zeros((N + 1, m, nu))
    Cu[:N] = qp.Cu
    Cx, d, q = qp.Cx, qp.d, qp.q
    CxT = np.swapaxes(Cx, 1, 2)
    CuT = np.swapaxes(Cu, 1, 2)

    # square-root rows of the stage Hessians; the row terms are appended per iteration
    G0 = stage_square_roots(Q, S[:N], R[:N])
    CuCx = np.concatenate([Cu, Cx], axis=2)

    soft = qp.kind != HARD
    n_soft = int(np.count_nonzero(soft))
    n_comp = d.size + n_soft
    zl = np.where(soft, qp.zl, 0.0)
    zq = np.where(soft, qp.zq, 0.0)

    # initial point: rollout with zero controls satisfies the equalities exactly
    X = np.empty((N + 1, nx))
    U = np.zeros((N + 1, nu))
    X[0] = x0
    for n in range(N):
        X[n + 1] = A[n] @ X[n] + c[n]

    def row_values(X, U):
        return np.einsum("nmi,ni->nm", Cx, X) + np.einsum("nmj,nj->nm", Cu, U)

    cz = row_values(X, U)
    s = np.where(soft, np.maximum(cz - d, 0.0) + 1.0, 0.0)
    if lam0 is not None:
        lam = np.clip(np.asarray(lam0, dtype=f64), _WARM_LAM_MIN, None)
        t = np.maximum(d - cz + s, _WARM_MU / lam)
    else:
        t = np.maximum(d - cz + s, _T_MIN)
        lam = 1.0 / t
    mu_s = np.where(soft, np.maximum(zl + zq * s - lam, 1.0), 0.0)
    s_div = np.where(soft, s, 1.0)

    status = SolverStatus.MAX_ITER_QP
    residual = np.inf
    pi = np.zeros((N + 1, nx))
    it = 0
    prev_primal = np.inf
    best = None
    stalled = 0
    failed = False
    for it in range(max_iter + 1):
        if cancel is not None and cancel.is_set():
            raise SolveCancelled()
        cz = row_values(X, U)
        r_p = cz - s + t - d
        r_s = np.where(soft, zl + zq * s - lam - mu_s, 0.0)
        rx = np.einsum("nij,nj->ni", Q, X) + np.einsum("nji,nj->ni", S, U) + q + np.einsum("nim,nm->ni", CxT, lam)
        ru = np.einsum("nij,nj->ni", R, U) + np.einsum("nij,nj->ni", S, X) + r + np.einsum("nim,nm->ni", CuT, lam)
        pi, red = _costates(rx, ru[:N].copy(), A, B)
        mu = (float(np.sum(t * lam)) + float(np.sum(s * mu_s))) / n_comp
        primal = float(np.max(np.abs(r_p)))
        comp = max(float(np.max(t * lam)), float(np.max(s * mu_s)))
        residual = max(float(np.max(np.abs(red), initial=0.0)), primal,
                       float(np.max(np.abs(r_s), initial=0.0)), comp)
        if not np.isfinite(residual):
            failed = True
            break
        if best is None or residual < best[0]:
            best = (residual, it, X, U, lam, pi, s)
            stalled = 0
        else:
            stalled += 1
        if log.isEnabledFor(logging.DEBUG):
            log.debug("ipm it=%d res=%.3e dual=%.3e primal=%.3e mu=%.3e min_t=%.3e max_lam=%.3e",
                      it, residual, float(np.max(np.abs(red), initial=0.0)), primal, mu,
                      float(np.min(t)), float(np.max(lam)))
        if residual <= tol:
            status = SolverStatus.SOLVED
            break
        if it == max_iter or (best[0] <= ACCEPT_TOL and stalled >= 2):
            break
        if max(float(np.max(lam)), float(np.max(mu_s, initial=0.0))) > _DUAL_BLOWUP and primal >= prev_primal:
            status = SolverStatus.INFEASIBLE_HARD
            break
        prev_primal = primal

        # condensed row weights: dlam = w * (C dz + rhs)
        a = np.zeros_like(d)
        np.divide(1.0, zq + mu_s / s_div, out=a, where=soft)
        w = 1.0 / (a + t / lam)
        G = np.concatenate([G0, np.sqrt(w)[..., None] * CuCx], axis=1)
        try:
            P, K, Ru = _riccati_factor(G, A, B)
        except ZeroDivisionError:  # singular reduced Hessian
            failed = True
            break
        zeros_c = np.zeros((N, nx))
        zeros_x0 = np.zeros(nx)

        def newton(r_t, r_m):
            rhs = r_p + a * (r_s + r_m / s_div) - r_t / lam
            v = w * rhs
            gx = rx + np.einsum("nim,nm->ni", CxT, v)
            gu = ru + np.einsum("nim,nm->ni", CuT, v)
            dX, dU, _ = _riccati_solve(P, K, Ru, A, B, gx, gu[:N].copy(), zeros_c, zeros_x0)
            dUp = np.zeros((N + 1, nu))
            dUp[:N] = dU
            dlam = w * (row_values(dX, dUp) + rhs)
            ds = np.where(soft, a * (dlam - r_s - r_m / s_div), 0.0)
            dt = (-r_t - t * dlam) / lam
            dmu = np.where(soft, (-r_m - mu_s * ds) / s_div, 0.0)
            return dX, dUp, dlam, ds, dt, dmu

        def step_length(dlam, ds, dt, dmu):
            alpha = min(_max_step(t, dt), _max_step(lam, dlam))
            if n_soft:
                alpha = min(alpha, _max_step(s[soft], ds[soft]), _max_step(mu_s[soft], dmu[soft]))
            return alpha

        # predictor
        r_t = t * lam
        r_m = np.where(soft, s * mu_s, 0.0)
        dX, dU, dlam, ds, dt, dmu = newton(r_t, r_m)
        alpha = min(1.0, step_length(dlam, ds, dt, dmu))
        mu_aff = (float(np.sum((t + alpha * dt) * (lam + alpha * dlam)))
                  + float(np.sum((s + alpha * ds) * (mu_s + alpha * dmu)))) / n_comp
        sigma = min(barrier_reduction, (mu_aff / mu) ** 3) if mu > 0 else 0.0

        # corrector
        r_t = t * lam + dt * dlam - sigma * mu
        r_m = np.where(soft, s * mu_s + ds * dmu - sigma * mu, 0.0)
        dX, dU, dlam, ds, dt, dmu = newton(r_t, r_m)
        alpha = min(1.0, _TAU * step_length(dlam, ds, dt, dmu))

        X = X + alpha * dX
        U = U + alpha * dU
        lam = lam + alpha * dlam
        t = t + alpha * dt
        if n_soft:
            s = np.where(soft, s + alpha * ds, 0.0)
            mu_s = np.where(soft, mu_s + alpha * dmu, 0.0)
            s_div = np.where(soft, s, 1.0)

    if status is not SolverStatus.SOLVED and status is not SolverStatus.INFEASIBLE_HARD and best is not None:
        residual, it_best, X, U, lam, pi, s = best
        if residual <= ACCEPT_TOL:
            status = SolverStatus.SOLVED
        elif failed:
            status = SolverStatus.NUMERICAL_FAILURE
    elif failed:
        status = SolverStatus.NUMERICAL_FAILURE
    slack = np.where(soft, s, 0.0)
    if status == SolverStatus.SOLVED and np.any(slack[qp.kind == EMERGENCY] > EMERGENCY_SLACK_TOL):
        status = SolverStatus.INFEASIBLE_HARD
    return QPSolution(X, U[:N].copy(), lam, pi, slack, status, it, residual)
