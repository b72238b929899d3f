"""Differential-drive (unicycle) robot model.

State is ``(x, y, theta, v)``, control is ``(a, omega)``:

    x' = v cos(theta),  y' = v sin(theta),  theta' = omega,  v' = a
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

NX = 4
NU = 2


class RobotState(NamedTuple):
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0


class ControlInput(NamedTuple):
    a: float = 0.0
    omega: float = 0.0


def _check_bounds(lower: np.ndarray, upper: np.ndarray, size: int) -> None:
    if lower.shape != (size,) or upper.shape != (size,):
        raise ValueError(f"bounds must have {size} entries")
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")


@dataclass(frozen=True)
class StateBounds:
    """Box on the state; only the speed is bounded by default."""

    lower: np.ndarray = field(default_factory=lambda: np.array([-np.inf, -np.inf, -np.inf, -0.2]))
    upper: np.ndarray = field(default_factory=lambda: np.array([np.inf, np.inf, np.inf, 0.8]))

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        _check_bounds(self.lower, self.upper, NX)


@dataclass(frozen=True)
class ControlBounds:
    lower: np.ndarray = field(default_factory=lambda: np.array([-1.0, -1.5]))
    upper: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.5]))

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        _check_bounds(self.lower, self.upper, NU)


def normalize_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), 2.0 * math.pi)


def dynamics_continuous(state, control) -> np.ndarray:
    """State derivative of the unicycle model."""
    _, _, theta, v = state
    a, omega = control
    return np.array([v * math.cos(theta), v * math.sin(theta), omega, a])


def _f(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    out = np.empty_like(X)
    out[:, 0] = X[:, 3] * np.cos(X[:, 2])
    out[:, 1] = X[:, 3] * np.sin(X[:, 2])
    out[:, 2] = U[:, 1]
    out[:, 3] = U[:, 0]
    return out


def rk4(X: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Batched RK4 step for rows of ``X`` (n, 4) and ``U`` (n, 2); heading is not wrapped."""
    k1 = _f(X, U)
    k2 = _f(X + 0.5 * dt * k1, U)
    k3 = _f(X + 0.5 * dt * k2, U)
    k4 = _f(X + dt * k3, U)
    return X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _fx(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    J = np.zeros((n, NX, NX))
    c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
    J[:, 0, 2] = -X[:, 3] * s
    J[:, 0, 3] = c
    J[:, 1, 2] = X[:, 3] * c
    J[:, 1, 3] = s
    return J


_FU = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0], [1.0, 0.0]])


def rk4_with_sensitivities(X: np.ndarray, U: np.ndarray, dt: float):
    """RK4 step plus its Jacobians.

    Returns ``(Xnext, A, B)`` with ``A = dXnext/dX`` of shape (n, 4, 4) and
    ``B = dXnext/dU`` of shape (n, 4, 2), propagated in forward mode through
    the four stages.
    """
    n = X.shape[0]
    eye = np.broadcast_to(np.eye(NX), (n, NX, NX))
    fu = np.broadcast_to(_FU, (n, NX, NU))

    k1 = _f(X, U)
    J1 = _fx(X)
    dk1x, dk1u = J1, fu

    X2 = X + 0.5 * dt * k1
    k2 = _f(X2, U)
    J2 = _fx(X2)
    dk2x = J2 @ (eye + 0.5 * dt * dk1x)
    dk2u = J2 @ (0.5 * dt * dk1u) + fu

    X3 = X + 0.5 * dt * k2
    k3 = _f(X3, U)
    J3 = _fx(X3)
    dk3x = J3 @ (eye + 0.5 * dt * dk2x)
    dk3u = J3 @ (0.5 * dt * dk2u) + fu

    X4 = X + dt * k3
    k4 = _f(X4, U)
    J4 = _fx(X4)
    dk4x = J4 @ (eye + dt * dk3x)
    dk4u = J4 @ (dt * dk3u) + fu

    h6 = dt / 6.0
    Xn = X + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    A = eye + h6 * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    B = h6 * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return Xn, A, B


def integrate_step(state, control, dt: float) -> RobotState:
    """One RK4 step with the control held constant; heading re-normalized."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    X = np.asarray(state, dtype=float).reshape(1, NX)
    U = np.asarray(control, dtype=float).reshape(1, NU)
    xn = rk4(X, U, dt)[0]
    return RobotState(float(xn[0]), float(xn[1]), float(normalize_angle(xn[2])), float(xn[3]))
