"""Continuous-time LQR: Riccati solve, gain, control law and cost quadrature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aolsim.plant import LinearModel


class LqrSolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def _is_spd(M: np.ndarray) -> bool:
    if M.ndim != 2 or M.shape[0] != M.shape[1] or not np.all(np.isfinite(M)):
        return False
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        return False
    return bool(np.all(np.linalg.eigvalsh(M) > 0))


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not _is_spd(Q):
            raise ValueError("Q must be symmetric positive definite")
        if not _is_spd(R):
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls, n: int = 4) -> "CostWeights":
        return cls(np.eye(n), np.eye(1))

    def integrand(self, x, u: float) -> float:
        """x'Qx + u'Ru for a scalar input."""
        x = np.asarray(x, dtype=float)
        return float(x @ self.Q @ x + self.R[0, 0] * u * u)


@dataclass(frozen=True)
class LqrSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int = 0

    @property
    def gain(self) -> np.ndarray:
        return self.K.reshape(-1)


def care_residual(A, B, Q, R, P) -> float:
    Rinv = np.linalg.inv(R)
    res = A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q
    return float(np.linalg.norm(res, "fro"))


def _riccati_rhs(P, A, B, Q, Rinv):
    return A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q


def _lyapunov(Acl: np.ndarray, C: np.ndarray) -> np.ndarray:
    # solve Acl' X + X Acl + C = 0 through the Kronecker form
    n = Acl.shape[0]
    eye = np.eye(n)
    L = np.kron(eye, Acl.T) + np.kron(Acl.T, eye)
    X = np.linalg.solve(L, -C.reshape(-1, order="F")).reshape((n, n), order="F")
    return 0.5 * (X + X.T)


def _stabilizing_seed(A, B, Q, Rinv, dt=1e-3, horizon=50.0):
    """Backward-integrate the Riccati ODE from P=0 until the induced gain stabilizes."""
    n = A.shape[0]
    P = np.zeros((n, n))
    steps = int(round(horizon / dt))
    for k in range(1, steps + 1):
        k1 = _riccati_rhs(P, A, B, Q, Rinv)
        k2 = _riccati_rhs(P + 0.5 * dt * k1, A, B, Q, Rinv)
        k3 = _riccati_rhs(P + 0.5 * dt * k2, A, B, Q, Rinv)
        k4 = _riccati_rhs(P + dt * k3, A, B, Q, Rinv)
        P = P + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        P = 0.5 * (P + P.T)
        if k % 50 == 0:
            K = Rinv @ B.T @ P
            if np.all(np.linalg.eigvals(A - B @ K).real < 0):
                return K
    return Rinv @ B.T @ P


def solve_care(model: LinearModel, weights: CostWeights, tol: float = 1e-9, max_iter: int = 200) -> LqrSolution:
    """Solve A'P + PA - PBR^-1B'P + Q = 0 by Newton-Kleinman iteration.

    The initial stabilizing gain comes from backward integration of the
    Riccati differential equation. Raises :class:`LqrSolverError` when the
    iteration does not settle or the result violates the residual/stability
    checks.
    """
    A = np.atleast_2d(np.asarray(model.A, dtype=float))
    B = np.asarray(model.B, dtype=float).reshape(A.shape[0], -1)
    Q, R = weights.Q, weights.R
    Rinv = np.linalg.inv(R)

    K = _stabilizing_seed(A, B, Q, Rinv)
    P = None
    for it in range(1, max_iter + 1):
        Acl = A - B @ K
        P_new = _lyapunov(Acl, Q + K.T @ R @ K)
        K = Rinv @ B.T @ P_new
        done = P is not None and np.linalg.norm(P_new - P) <= tol * max(1.0, np.linalg.norm(P_new))
        P = P_new
        if done:
            break
    else:
        raise LqrSolverError("Newton-Kleinman did not converge", care_residual(A, B, Q, R, P))

    residual = care_residual(A, B, Q, R, P)
    if residual > 1e-6:
        raise LqrSolverError("Riccati residual above 1e-6", residual)
    if not np.all(np.linalg.eigvals(A - B @ K).real < 0):
        raise LqrSolverError("closed loop A-BK is not Hurwitz", residual)
    return LqrSolution(P=P, K=K, iterations=it)


def control(s, sol: LqrSolution) -> float:
    """u = -K x."""
    k = sol.gain
    return -float(sum(k[i] * s[i] for i in range(len(k))))


@dataclass(frozen=True)
class CostAccumulator:
    j: float = 0.0
    t: float = 0.0


def accumulate_cost(acc: CostAccumulator, s, u: float, dt: float, weights: CostWeights) -> CostAccumulator:
    """Left-endpoint rectangle step of the quadratic cost integral."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return CostAccumulator(acc.j + weights.integrand(s, u) * dt, acc.t + dt)


def simulate_linear_closed_loop(
    model: LinearModel, sol: LqrSolution, weights: CostWeights, x0, horizon: float, dt: float = 1e-3
) -> tuple[np.ndarray, float]:
    """Noise-free network-free linear loop x' = (A - BK) x under continuous feedback.

    Returns (final state, accumulated cost).
    """
    Acl = model.A - model.B @ sol.K
    x = np.asarray(x0, dtype=float)
    acc = CostAccumulator()
    for _ in range(int(round(horizon / dt))):
        acc = accumulate_cost(acc, x, control(x, sol), dt, weights)
        k1 = Acl @ x
        k2 = Acl @ (x + 0.5 * dt * k1)
        k3 = Acl @ (x + 0.5 * dt * k2)
        k4 = Acl @ (x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x, acc.j
