"""Mean-field limit pair (x0, u0) and the decentralized feedback law.

The feedback gains live on the solver grid; evaluation between nodes uses
linear interpolation, exact at the nodes themselves.  The limit state x0 is
driven by the common noise alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec
from .riccati import DivergenceError, PositivityLoss, RiccatiSolution


@dataclass(frozen=True)
class FeedbackLaw:
    """Gain sample; the control is u = -K1 (xhat - x0) - K2 x0 - k3."""

    K1: np.ndarray
    K2: np.ndarray
    k3: np.ndarray

    def __post_init__(self):
        for name in ("K1", "K2", "k3"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
        m, n = self.K1.shape
        if self.K2.shape != (m, n) or self.k3.shape != (m,):
            raise ValueError("gain shapes inconsistent")


@dataclass(frozen=True)
class LimitPaths:
    """Node samples of the limit pair for one common-noise draw."""

    x0: np.ndarray
    u0: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "u0", np.asarray(self.u0, dtype=float))
        if self.x0.shape[0] != self.u0.shape[0]:
            raise ValueError("x0 and u0 node counts differ")

    @property
    def K(self) -> int:
        return self.x0.shape[0] - 1


def _path_at(arr: np.ndarray, t: float, T: float) -> np.ndarray:
    K = arr.shape[0] - 1
    if not 0.0 <= t <= T:
        tol = 1e-9 * max(1.0, T)
        if t < -tol or t > T + tol:
            raise ValueError(f"t={t:.6g} outside [0, {T:.6g}]")
        t = min(max(t, 0.0), T)
    s = t * K / T
    k = min(int(s), K - 1)
    w = s - k
    return (1.0 - w) * arr[k] + w * arr[k + 1]


def feedback_gains(sol: RiccatiSolution, t: float) -> FeedbackLaw:
    law = FeedbackLaw(
        K1=_path_at(sol.K1, t, sol.T),
        K2=_path_at(sol.K2, t, sol.T),
        k3=_path_at(sol.k3, t, sol.T),
    )
    for arr in (law.K1, law.K2, law.k3):
        if not np.all(np.isfinite(arr)):
            raise PositivityLoss(t, float("nan"))
    return law


def control_u0(sol: RiccatiSolution, t: float, x0) -> np.ndarray:
    law = feedback_gains(sol, t)
    return -(law.K2 @ np.asarray(x0, dtype=float) + law.k3)


def decentralized_control(sol: RiccatiSolution, t: float, xhat, x0) -> np.ndarray:
    law = feedback_gains(sol, t)
    xhat = np.asarray(xhat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    return -law.K1 @ (xhat - x0) - (law.K2 @ x0 + law.k3)


def simulate_x0(problem: ProblemSpec, sol: RiccatiSolution, dW0) -> LimitPaths:
    """Forward Euler integration of the limit state under one W0 draw."""
    dW0 = np.asarray(dW0, dtype=float).reshape(-1)
    grid = problem.grid
    K = grid.K
    if dW0.shape[0] != K:
        raise ValueError(f"dW0 has {dW0.shape[0]} increments, grid needs {K}")
    if sol.K != K:
        raise ValueError("solution grid does not match problem grid")
    dt = grid.dt
    n, m = problem.n, problem.m

    x0 = np.empty((K + 1, n))
    u0 = np.empty((K + 1, m))
    x0[0] = problem.x
    for k in range(K):
        u0[k] = -(sol.K2[k] @ x0[k] + sol.k3[k])
        A = problem.A.values[k]
        Abar = problem.Abar.values[k]
        B = problem.B.values[k]
        Bbar = problem.Bbar.values[k]
        D = problem.D.values[k]
        Dbar = problem.Dbar.values[k]
        F = problem.F.values[k]
        Fbar = problem.Fbar.values[k]
        drift = (A + Abar) @ x0[k] + (B + Bbar) @ u0[k] + problem.b.values[k]
        diff = (D + Dbar) @ x0[k] + (F + Fbar) @ u0[k] + problem.bbar.values[k]
        x0[k + 1] = x0[k] + drift * dt + diff * dW0[k]
        if not np.all(np.isfinite(x0[k + 1])):
            raise DivergenceError(f"limit state diverged at t={(k + 1) * dt:.6g}")
    u0[K] = -(sol.K2[K] @ x0[K] + sol.k3[K])
    return LimitPaths(x0=x0, u0=u0, T=grid.T)


def stationarity_residual(problem: ProblemSpec, sol: RiccatiSolution, k: int,
                          xhat, x0) -> np.ndarray:
    """Pointwise optimality residual of the feedback law at node k.

    Zero (to solver accuracy) whenever u is the decentralized control and
    the mean-field gain matrix is nonsingular.
    """
    xhat = np.asarray(xhat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    u = -sol.K1[k] @ (xhat - x0) - (sol.K2[k] @ x0 + sol.k3[k])
    u0 = -(sol.K2[k] @ x0 + sol.k3[k])

    Pi, Sg, rho = sol.Pi[k], sol.Sigma[k], sol.rho[k]
    B = problem.B.values[k]
    D = problem.D.values[k]
    Dbar = problem.Dbar.values[k]
    F = problem.F.values[k]
    Fbar = problem.Fbar.values[k]
    bbar = problem.bbar.values[k]
    S = problem.S.values[k]
    R = problem.R.values[k]
    r = problem.r.values[k]
    a2 = problem.alpha2
    b1 = problem.beta1

    phi = Pi @ (xhat - x0) + Sg @ x0 + rho
    eta = Pi @ (D @ (xhat - x0) + F @ (u - u0)) \
        + Sg @ ((D + Dbar) @ x0 + (F + Fbar) @ u0 + bbar)
    return B.T @ phi + F.T @ eta + S.T @ (xhat - a2 * x0) \
        + R @ (u - b1 * u0) + r


def write_limit_csv(paths: LimitPaths, file) -> None:
    K = paths.K
    n = paths.x0.shape[1]
    m = paths.u0.shape[1]
    header = ["t"] + [f"x0_{i}" for i in range(n)] + [f"u0_{j}" for j in range(m)]
    own = isinstance(file, (str, bytes))
    handle = open(file, "w", newline="", encoding="utf-8") if own else file
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for k in range(K + 1):
            t = paths.T * k / K
            row = [t] + list(paths.x0[k]) + list(paths.u0[k])
            writer.writerow(f"{v:.15g}" for v in row)
    finally:
        if own:
            handle.close()
