"""Human-motion-aware navigation with fast embedded MPC.

Submodules:

``model``       differential-drive kinematics and RK4 discretization
``costs``       goal / control / collision costs and clearance constraints
``qp``          stage-structured QP solver (Riccati + interior point)
``ocp``         multiple-shooting OCP and the SQP real-time iteration
``prediction``  constant-velocity forecasts and per-stage parameters
``monitor``     feasibility and safety monitors, protective stop
``sim``         social-force crowd simulator and benchmark scenarios
``bench``       closed-loop runner, metrics and scalability benchmark
"""

import os as _os

# Pin BLAS/OpenMP pools before numpy is imported anywhere in the package.
_threads = _os.environ.get("HUMAN_MPC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .model import ControlBounds, ControlInput, RobotState, StateBounds  # noqa: E402

__all__ = ["ControlBounds", "ControlInput", "RobotState", "StateBounds"]
__version__ = "0.1.0"
