"""Stage and terminal costs, clearance constraints and their derivatives.

Every cost returns ``(value, gradient, hessian)`` where the Hessian is a
Gauss-Newton (positive semi-definite) model. The quadratic goal and control
terms are exact; the collision term is projected onto the PSD cone.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import NU, NX, normalize_angle

# Used when the robot sits exactly on a human or obstacle: the distance
# gradient is undefined there, so a fixed direction keeps outputs finite.
COINCIDENT_DIRECTION = np.array([1.0, 0.0])
_COINCIDENT_EPS = 1e-12


@dataclass(frozen=True)
class CostWeights:
    w_goal_stage: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.0, 250.0]))
    w_goal_terminal: np.ndarray = field(default_factory=lambda: np.array([40.0, 40.0, 2.0, 0.0]))
    w_control: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0]))

    def __post_init__(self):
        for name, size in (("w_goal_stage", NX), ("w_goal_terminal", NX), ("w_control", NU)):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.shape != (size,):
                raise ValueError(f"{name} must have {size} entries")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, w)


@dataclass(frozen=True)
class CollisionCostParams:
    q: float = 2.0
    kappa: float = 5.0
    d_th: float = 1.0

    def __post_init__(self):
        if not (self.q > 0 and self.kappa > 0 and self.d_th > 0):
            raise ValueError("collision cost parameters q, kappa, d_th must be positive")

    @property
    def slope(self) -> float:
        """Derivative of the linear branch, -kappa*q/4."""
        return -self.kappa * self.q / 4.0

    @property
    def peak(self) -> float:
        """Cost at zero distance."""
        return self.q / 2.0 + self.kappa * self.q * self.d_th / 4.0


@dataclass(frozen=True)
class ConstraintParams:
    """Clearance distances and slack penalties.

    ``soft_l1``/``soft_l2`` penalize the static-obstacle slack;
    ``emergency_l1`` keeps the QP feasible when the human clearance
    cannot be met (any nonzero emergency slack means the hard constraint failed).
    """

    d_h: float = 0.5
    d_s: float = 0.5
    soft_l1: float = 1e3
    soft_l2: float = 1e2
    emergency_l1: float = 1e4

    def __post_init__(self):
        if not (self.d_h > 0 and self.d_s > 0):
            raise ValueError("clearance distances must be positive")
        if not (self.soft_l1 > 0 and self.soft_l2 > 0 and self.emergency_l1 > 0):
            raise ValueError("slack penalty weights must be positive")


@dataclass
class StageParameters:
    """Parameters of one shooting node.

    ``humans`` are the predicted positions at this node, ``humans_current``
    the measured positions (identical at every node).
    """

    goal: np.ndarray
    humans: np.ndarray
    humans_current: np.ndarray
    obstacle: np.ndarray

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float).reshape(NX)
        self.humans = np.asarray(self.humans, dtype=float).reshape(-1, 2)
        self.humans_current = np.asarray(self.humans_current, dtype=float).reshape(-1, 2)
        self.obstacle = np.asarray(self.obstacle, dtype=float).reshape(2)
        if self.humans.shape != self.humans_current.shape:
            raise ValueError("humans and humans_current must have equal length")
        if not np.all(np.isfinite(self.obstacle)):
            raise ValueError("obstacle position must be finite")


# --------------------------------------------------------------------------
# quadratic terms


def goal_error(X: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """State minus goal with the heading difference wrapped to (-pi, pi]."""
    err = np.asarray(X, dtype=float) - goal
    err[..., 2] = normalize_angle(err[..., 2])
    return err


def goal_cost(state, goal, weights):
    w = np.asarray(weights, dtype=float)
    err = goal_error(np.asarray(state, dtype=float), np.asarray(goal, dtype=float))
    cost = float(np.sum(w * err**2))
    return cost, 2.0 * w * err, np.diag(2.0 * w)


def control_cost(control, weights):
    w = np.asarray(weights, dtype=float)
    u = np.asarray(control, dtype=float)
    return float(np.sum(w * u**2)), 2.0 * w * u, np.diag(2.0 * w)


# --------------------------------------------------------------------------
# collision potential


def linear_branch(d, params: CollisionCostParams):
    """Linear piece used for ``d <= d_th``: value, slope, curvature."""
    d = np.asarray(d, dtype=float)
    return params.slope * d + params.peak, np.full_like(d, params.slope), np.zeros_like(d)


def logistic_branch(d, params: CollisionCostParams):
    """Logistic piece ``q / (1 + exp(kappa (d - d_th)))`` used for ``d > d_th``.

    Evaluated through ``exp(-kappa (d - d_th))`` so large distances cannot overflow;
    arguments below ``d_th`` are clipped to ``d_th``.
    """
    d = np.asarray(d, dtype=float)
    q, kappa = params.q, params.kappa
    e = np.exp(-kappa * np.maximum(d - params.d_th, 0.0))
    one_e = 1.0 + e
    return q * e / one_e, -q * kappa * e / one_e**2, q * kappa**2 * e * (1.0 - e) / one_e**3


def collision_profile(d, params: CollisionCostParams):
    """Vectorized potential ``f(d)`` with first and second derivatives.

    The two pieces meet at ``d_th`` with value ``q/2`` and slope ``-kappa*q/4``.
    """
    d = np.asarray(d, dtype=float)
    linear = d <= params.d_th
    fl, f1l, f2l = linear_branch(d, params)
    fg, f1g, f2g = logistic_branch(d, params)
    return np.where(linear, fl, fg), np.where(linear, f1l, f1g), np.where(linear, f2l, f2g)


def collision_cost_scalar(d: float, params: CollisionCostParams):
    if d < 0:
        raise ValueError("distance must be nonnegative")
    f, f1, f2 = collision_profile(d, params)
    return float(f), float(f1), float(f2)


def _directions(P: np.ndarray, H: np.ndarray):
    """Distances from positions ``P`` (..., 2) to points ``H`` (..., k, 2) and unit directions."""
    diff = P[..., None, :] - H
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    coincident = dist < _COINCIDENT_EPS
    safe = np.where(coincident, 1.0, dist)
    e = np.where(coincident[..., None], COINCIDENT_DIRECTION, diff / safe[..., None])
    return np.where(coincident, 0.0, dist), e, coincident


def project_psd_2x2(M: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues of a batch of symmetric 2x2 matrices to zero."""
    w, V = np.linalg.eigh(M)
    w = np.maximum(w, 0.0)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


def collision_terms(P: np.ndarray, H: np.ndarray, params: CollisionCostParams):
    """Summed collision cost over humans for a batch of positions.

    ``P`` has shape (n, 2) and ``H`` (n, k, 2). Returns cost (n,), gradient
    (n, 2) and PSD spatial Hessian (n, 2, 2).
    """
    n = P.shape[0]
    if H.shape[1] == 0:
        return np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2, 2))
    dist, e, coincident = _directions(P, H)
    f, f1, f2 = collision_profile(dist, params)
    grad = np.sum(f1[..., None] * e, axis=1)
    ee = e[..., :, None] * e[..., None, :]
    # f'/d * (I - e e^T) is the curvature across the line of sight.
    across = np.where(coincident, 0.0, f1 / np.where(coincident, 1.0, dist))
    hess = np.sum(f2[..., None, None] * ee + across[..., None, None] * (np.eye(2) - ee), axis=1)
    return np.sum(f, axis=1), grad, project_psd_2x2(hess)


def collision_cost(state, stage_params: StageParameters, params: CollisionCostParams):
    x = np.asarray(state, dtype=float)
    c, g, h = collision_terms(x[None, :2], stage_params.humans[None], params)
    grad = np.zeros(NX)
    grad[:2] = g[0]
    hess = np.zeros((NX, NX))
    hess[:2, :2] = h[0]
    return float(c[0]), grad, hess


# --------------------------------------------------------------------------
# clearance constraints (feasible iff residual >= 0)


def clearance_residuals(P: np.ndarray, H: np.ndarray, dmin: float):
    """Distances minus ``dmin`` and their position Jacobians, batched like ``collision_terms``."""
    dist, e, _ = _directions(P, H)
    return dist - dmin, e


def _clearance(state, point, dmin: float):
    x = np.asarray(state, dtype=float)
    res, e = clearance_residuals(x[None, :2], np.asarray(point, dtype=float).reshape(1, 1, 2), dmin)
    jac = np.zeros(NX)
    jac[:2] = e[0, 0]
    return float(res[0, 0]), jac


def human_clearance_residual(state, human_current, d_h: float):
    return _clearance(state, human_current, d_h)


def obstacle_clearance_residual(state, obstacle, d_s: float):
    return _clearance(state, obstacle, d_s)


# --------------------------------------------------------------------------
# composite costs


def stage_cost(state, control, stage_params: StageParameters, weights: CostWeights,
               collision: CollisionCostParams):
    """Goal + control + collision cost over ``(state, control)``; Hessian is block diagonal."""
    cg, gg, hg = goal_cost(state, stage_params.goal, weights.w_goal_stage)
    cu, gu, hu = control_cost(control, weights.w_control)
    cc, gc, hc = collision_cost(state, stage_params, collision)
    grad = np.concatenate([gg + gc, gu])
    hess = np.zeros((NX + NU, NX + NU))
    hess[:NX, :NX] = hg + hc
    hess[NX:, NX:] = hu
    return cg + cu + cc, grad, hess


def terminal_cost(state, stage_params: StageParameters, weights: CostWeights,
                  collision: CollisionCostParams):
    cg, gg, hg = goal_cost(state, stage_params.goal, weights.w_goal_terminal)
    cc, gc, hc = collision_cost(state, stage_params, collision)
    return cg + cc, gg + gc, hg + hc

