"""Brute-force reference solvers used by the self-check command and the tests.

Deliberately naive: dense matrices and exhaustive enumeration, nothing shared
with the structured solver in :mod:`human_mpc.qp` beyond the problem data.
"""
from __future__ import annotations

import itertools

import numpy as np

from .qp import HARD, StageQP


def dense_problem(qp: StageQP):
    """Flatten a :class:`StageQP` into ``min 0.5 z'Hz + g'z  s.t.  Ez = f,  Gz <= h``.

    ``z = [x_0 .. x_N, u_0 .. u_{N-1}, slacks]``. Rows of the padding form
    ``0 <= positive`` are dropped. Returns the dense data plus slices to split ``z``.
    """
    N, nx, nu = qp.N, qp.nx, qp.nu
    nX, nU = (N + 1) * nx, N * nu
    rows = []
    for n in range(N + 1):
        for i in range(qp.m):
            cx = qp.Cx[n, i]
            cu = qp.Cu[n, i] if n < N else np.zeros(nu)
            if qp.kind[n, i] == HARD and not cx.any() and not cu.any() and qp.d[n, i] >= 0:
                continue
            rows.append((n, i))
    soft_rows = [(n, i) for (n, i) in rows if qp.kind[n, i] != HARD]
    ns = len(soft_rows)
    nz = nX + nU + ns

    def xs(n):
        return slice(n * nx, (n + 1) * nx)

    def us(n):
        return slice(nX + n * nu, nX + (n + 1) * nu)

    H = np.zeros((nz, nz))
    g = np.zeros(nz)
    for n in range(N + 1):
        H[xs(n), xs(n)] = qp.Q[n]
        g[xs(n)] = qp.q[n]
    for n in range(N):
        H[us(n), us(n)] = qp.R[n]
        H[us(n), xs(n)] = qp.S[n]
        H[xs(n), us(n)] = qp.S[n].T
        g[us(n)] = qp.r[n]

    E = np.zeros(((N + 1) * nx, nz))
    f = np.zeros((N + 1) * nx)
    E[:nx, xs(0)] = np.eye(nx)
    f[:nx] = qp.x0
    for n in range(N):
        blk = slice((n + 1) * nx, (n + 2) * nx)
        E[blk, xs(n + 1)] = np.eye(nx)
        E[blk, xs(n)] = -qp.A[n]
        E[blk, us(n)] = -qp.B[n]
        f[blk] = qp.c[n]

    G = np.zeros((len(rows) + ns, nz))
    h = np.zeros(len(rows) + ns)
    for k, (n, i) in enumerate(rows):
        G[k, xs(n)] = qp.Cx[n, i]
        if n < N:
            G[k, us(n)] = qp.Cu[n, i]
        h[k] = qp.d[n, i]
    for j, (n, i) in enumerate(soft_rows):
        col = nX + nU + j
        k = rows.index((n, i))
        G[k, col] = -1.0
        G[len(rows) + j, col] = -1.0
        H[col, col] = qp.zq[n, i]
        g[col] = qp.zl[n, i]
    return H, g, E, f, G, h, (rows, soft_rows, nX, nU)


def active_set_enumeration(qp: StageQP, tol: float = 1e-9):
    """Exact solution of a small QP by trying every active set.

    Returns ``(dx, du, slack, objective)``; raises ``ValueError`` if no active
    set yields a KKT point (infeasible problem).
    """
    H, g, E, f, G, h, (rows, soft_rows, nX, nU) = dense_problem(qp)
    n_eq, n_in, nz = E.shape[0], G.shape[0], H.shape[0]
    best = None
    for size in range(n_in + 1):
        for active in itertools.combinations(range(n_in), size):
            Ga = G[list(active)]
            K = np.block([
                [H, E.T, Ga.T],
                [E, np.zeros((n_eq, n_eq)), np.zeros((n_eq, size))],
                [Ga, np.zeros((size, n_eq)), np.zeros((size, size))],
            ])
            rhs = np.concatenate([-g, f, h[list(active)]])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.max(np.abs(K @ sol - rhs)) > 1e-8 * max(1.0, np.max(np.abs(rhs))):
                continue
            z = sol[:nz]
            mult = sol[nz + n_eq:]
            if np.any(G @ z > h + tol) or np.any(mult < -tol):
                continue
            obj = 0.5 * z @ H @ z + g @ z
            if best is None or obj < best[1] - 1e-12:
                best = (z, obj)
    if best is None:
        raise ValueError("no KKT point: QP infeasible or degenerate")
    z, obj = best
    N, nx, nu = qp.N, qp.nx, qp.nu
    dx = z[:nX].reshape(N + 1, nx)
    du = z[nX:nX + nU].reshape(N, nu)
    slack = np.zeros_like(qp.d)
    for j, (n, i) in enumerate(soft_rows):
        slack[n, i] = z[nX + nU + j]
    return dx, du, slack, obj


def qp_objective(qp: StageQP, dx, du, slack) -> float:
    H, g, *_ , (rows, soft_rows, nX, nU) = dense_problem(qp)
    z = np.concatenate([dx.ravel(), du.ravel(), [slack[n, i] for (n, i) in soft_rows]])
    return float(0.5 * z @ H @ z + g @ z)


def random_stage_qp(rng: np.random.Generator, *, max_N: int = 5, max_nx: int = 4, max_nu: int = 2,
                    max_rows: int = 4, soft_fraction: float = 0.0) -> StageQP:
    """Random strictly convex stage QP whose hard rows are feasible by construction."""
    N = int(rng.integers(1, max_N + 1))
    nx = int(rng.integers(1, max_nx + 1))
    nu = int(rng.integers(1, max_nu + 1))
    Q = np.empty((N + 1, nx, nx))
    S = np.empty((N, nu, nx))
    R = np.empty((N, nu, nu))
    for n in range(N):
        L = rng.normal(size=(nx + nu, nx + nu))
        Hn = L @ L.T / (nx + nu) + 0.1 * np.eye(nx + nu)
        Q[n], S[n], R[n] = Hn[:nx, :nx], Hn[nx:, :nx], Hn[nx:, nx:]
    L = rng.normal(size=(nx, nx))
    Q[N] = L @ L.T / nx + 0.1 * np.eye(nx)
    q = rng.normal(size=(N + 1, nx))
    r = rng.normal(size=(N, nu))
    A = np.eye(nx) + 0.3 * rng.normal(size=(N, nx, nx))
    B = rng.normal(size=(N, nx, nu))
    c = 0.1 * rng.normal(size=(N, nx))
    x0 = rng.normal(size=nx)

    # a feasible reference trajectory
    uref = rng.normal(size=(N, nu))
    xref = np.empty((N + 1, nx))
    xref[0] = x0
    for n in range(N):
        xref[n + 1] = A[n] @ xref[n] + B[n] @ uref[n] + c[n]

    rows = [[] for _ in range(N + 1)]
    for _ in range(int(rng.integers(0, max_rows + 1))):
        n = int(rng.integers(1, N + 1)) if rng.random() < 0.8 else 0
        cx = rng.normal(size=nx)
        cu = rng.normal(size=nu) if n < N else np.zeros(nu)
        val = cx @ xref[n] + (cu @ uref[n] if n < N else 0.0)
        d = val + rng.uniform(0.0, 0.5)
        if rng.random() < soft_fraction:
            rows[n].append((cx, cu, d - rng.uniform(0, 1.0), 2, rng.uniform(0.1, 2), rng.uniform(0.1, 2)))
        else:
            rows[n].append((cx, cu, d, HARD, 0.0, 0.0))
    return StageQP.from_stage_rows(Q, S, R, q, r, A, B, c, x0, rows)
