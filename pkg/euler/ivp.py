"""
Explicit Euler solver for initial value problems  x' = f(t, x),  x(0) = x0.

    x_{n+1} = x_n + h * f(t_n, x_n),   t_{n+1} = t_n + h

The last step is shortened so the trajectory lands exactly on t_end, which
keeps error comparisons across step sizes fair.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from errors import NonFiniteStateError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IVPProblem:
    rhs: Callable[[float, np.ndarray], np.ndarray]
    x0: np.ndarray
    t_end: float
    analytic: Optional[Callable[[float], np.ndarray]] = None
    name: str = "ivp"

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError(f"t_end must be > 0, got {self.t_end}")
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=np.float64)))

    @property
    def dim(self):
        return self.x0.shape[0]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray    # (n,)
    states: np.ndarray   # (n, d)

    def __len__(self):
        return len(self.times)


def step_count(t_end, h):
    """Number of Euler steps to reach t_end: ceil(t_end / h), ignoring float fuzz."""
    return max(1, math.ceil(t_end / h - 1e-9))


def euler_solve(problem, h):
    """Integrate `problem` with step h. Raises NonFiniteStateError on blow-up."""
    if not (0 < h <= problem.t_end):
        raise ValueError(f"step h must satisfy 0 < h <= t_end={problem.t_end}, got {h}")

    n = step_count(problem.t_end, h)
    times = np.array([k * h for k in range(n)] + [problem.t_end], dtype=np.float64)
    states = np.empty((n + 1, problem.dim))
    states[0] = problem.x0

    for k in range(n):
        dt = times[k + 1] - times[k]
        slope = np.asarray(problem.rhs(times[k], states[k]), dtype=np.float64)
        if slope.shape != (problem.dim,):
            raise ValueError(
                f"rhs returned shape {slope.shape}, expected ({problem.dim},)"
            )
        states[k + 1] = states[k] + dt * slope
        if not np.all(np.isfinite(states[k + 1])):
            log.warning(f"{problem.name}: non-finite state at step {k + 1} (h={h})")
            raise NonFiniteStateError(k + 1)

    return Trajectory(times=times, states=states)


def max_abs_error(traj, problem):
    """Largest Euclidean distance between trajectory and analytic solution."""
    if problem.analytic is None:
        raise ValueError(f"problem '{problem.name}' has no analytic solution")
    exact = np.array([np.atleast_1d(problem.analytic(t)) for t in traj.times])
    return float(np.max(np.linalg.norm(traj.states - exact, axis=1)))


def growth_factor(lam, h):
    """Per-step amplification |1 + h*lam| of Euler on x' = lam*x."""
    return abs(1.0 + h * lam)


def is_stable(lam, h):
    return growth_factor(lam, h) <= 1.0


def decay_problem(lam=-2.3, x0=1.0, t_end=3.0):
    """Scalar linear test problem x' = lam*x with solution x0*exp(lam*t)."""
    return IVPProblem(
        rhs=lambda t, x: lam * x,
        x0=np.array([x0]),
        t_end=t_end,
        analytic=lambda t: np.array([x0 * math.exp(lam * t)]),
        name=f"decay(lam={lam})",
    )
