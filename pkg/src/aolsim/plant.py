"""Cart-pole plant: nonlinear dynamics, closed-form linear model, RK4 stepping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class DomainError(ValueError):
    """Raised on non-finite or out-of-domain plant inputs."""


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass(frozen=True)
class PlantParams:
    m_c: float = 1.0
    m_p: float = 0.1
    l: float = 0.5
    g: float = 9.8
    noise_sigma: float = 1.0
    theta0_min: float = -0.05
    theta0_max: float = 0.05
    # failure envelope; crossing it ends the episode
    theta_limit: float = 0.21
    x_limit: float = 2.4

    def __post_init__(self):
        for name in ("m_c", "m_p", "l", "g", "theta_limit", "x_limit"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be finite and > 0, got {v!r}")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise DomainError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        if not self.theta0_min < self.theta0_max:
            raise DomainError("theta0_min must be < theta0_max")


class StateVector(NamedTuple):
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = 0.0
    theta_dot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


@dataclass(frozen=True)
class LinearModel:
    A: np.ndarray
    B: np.ndarray

    def controllability_rank(self) -> int:
        n = self.A.shape[0]
        cols = [self.B]
        for _ in range(n - 1):
            cols.append(self.A @ cols[-1])
        return int(np.linalg.matrix_rank(np.hstack(cols)))


def _accel(theta, theta_dot, force, p):
    # theta_ddot first, then x_ddot uses it
    total = p.m_c + p.m_p
    s = math.sin(theta)
    c = math.cos(theta)
    theta_ddot = (p.g * s + c * ((-force - p.m_p * p.l * theta_dot * theta_dot * s) / total)) / (
        p.l * (4.0 / 3.0 - p.m_p * c * c / total)
    )
    x_ddot = (force + p.m_p * p.l * (theta_dot * theta_dot * s - theta_ddot * c)) / total
    return x_ddot, theta_ddot


def derivatives(s, force: float, p: PlantParams) -> StateVector:
    """Time derivative [x_dot, x_ddot, theta_dot, theta_ddot] of the nonlinear cart-pole."""
    if not (all(math.isfinite(v) for v in s) and math.isfinite(force)):
        raise DomainError(f"non-finite plant input: state={tuple(s)}, force={force}")
    x_ddot, theta_ddot = _accel(s[2], s[3], force, p)
    return StateVector(s[1], x_ddot, s[3], theta_ddot)


def linearize(p: PlantParams) -> LinearModel:
    """Closed-form A, B about the upright equilibrium.

    Uses the 13/12 inertia form of the published linear model, which is not
    the exact Jacobian of :func:`derivatives` (that one has a 4/3 term).
    """
    den = 13.0 * p.m_c + p.m_p
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 2] = -12.0 * p.m_p * p.g / den
    A[2, 3] = 1.0
    A[3, 2] = 12.0 * (p.m_p * p.g + p.m_c * p.g) / (p.l * den)
    B = np.array([[0.0], [13.0 / den], [0.0], [-12.0 / (p.l * den)]])
    return LinearModel(A, B)


def step(s, force: float, dt: float, w: float, p: PlantParams) -> StateVector:
    """Advance the nonlinear dynamics by ``dt`` with classical RK4.

    The effective force ``force + w`` is held constant over the step.
    Raises :class:`SimulationFault` if the result is not finite.
    """
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    f = force + w
    x, v, th, om = s
    h2 = 0.5 * dt

    try:
        a1, b1 = _accel(th, om, f, p)
        k1 = (v, a1, om, b1)
        a2, b2 = _accel(th + h2 * k1[2], om + h2 * k1[3], f, p)
        k2 = (v + h2 * a1, a2, om + h2 * b1, b2)
        a3, b3 = _accel(th + h2 * k2[2], om + h2 * k2[3], f, p)
        k3 = (v + h2 * a2, a3, om + h2 * b2, b3)
        a4, b4 = _accel(th + dt * k3[2], om + dt * k3[3], f, p)
        k4 = (v + dt * a3, a4, om + dt * b3, b4)

        d6 = dt / 6.0
        out = StateVector(
            x + d6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            v + d6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            th + d6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]),
            om + d6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3]),
        )
    except (ValueError, OverflowError) as exc:
        # sin/cos of an infinite angle, or float overflow mid-step
        raise SimulationFault(f"integration failed from state {tuple(s)}: {exc}") from None
    if not all(math.isfinite(v) for v in out):
        raise SimulationFault(f"non-finite state after step: {out}")
    return out


def sample_initial_state(rng: np.random.Generator, p: PlantParams) -> StateVector:
    theta = rng.uniform(p.theta0_min, p.theta0_max)
    # Generator.uniform is half-open; keep strictly inside the interval
    while theta <= p.theta0_min:
        theta = rng.uniform(p.theta0_min, p.theta0_max)
    return StateVector(0.0, 0.0, float(theta), 0.0)


def has_fallen(s, p: PlantParams) -> bool:
    return abs(s[2]) > p.theta_limit or abs(s[0]) > p.x_limit
