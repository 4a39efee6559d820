"""Relaxed cost compensators: quadruple assembly and admissibility checks.

A compensator is a symmetric time path P with derivative Pdot.  Completing
the square in the running cost along P turns an indefinite problem into a
"relaxed" one whose weights may satisfy standard definiteness conditions.
All checks here are pure and operate on grid node samples; analytic
callables, when available, refine evaluation between nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ProblemSpec

POS_FLOOR = 1e-8
PSD_SLACK = 1e-9


def _sym(M: np.ndarray) -> np.ndarray:
    return (M + M.T) / 2


def _min_eig_sym(M: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix; closed form for n <= 2."""
    n = M.shape[0]
    if n == 1:
        return float(M[0, 0])
    if n == 2:
        h = (M[0, 0] + M[1, 1]) / 2
        det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
        return float(h - math.sqrt(max(h * h - det, 0.0)))
    return float(np.linalg.eigvalsh(M)[0])


@dataclass(frozen=True)
class CompensatorPath:
    """Symmetric matrix path P with time derivative on [0, T].

    `at(t)` prefers the analytic callables when present, otherwise
    interpolates node samples linearly.
    """

    P: np.ndarray
    Pdot: np.ndarray
    T: float
    P_fn: Optional[Callable[[float], np.ndarray]] = None
    Pdot_fn: Optional[Callable[[float], np.ndarray]] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        Pdot = np.asarray(self.Pdot, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2] or P.shape != Pdot.shape:
            raise ValueError(f"compensator path needs (K+1, n, n) samples, got {P.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Pdot))):
            raise ValueError("compensator path has non-finite samples")
        if np.max(np.abs(P - P.transpose(0, 2, 1))) > 1e-9:
            raise ValueError("compensator path not symmetric at every node")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "Pdot", Pdot)

    @property
    def K(self) -> int:
        return self.P.shape[0] - 1

    @classmethod
    def from_nodes(cls, P, T: float, Pdot=None) -> "CompensatorPath":
        """Build from node samples; missing Pdot uses second-order differences."""
        P = np.asarray(P, dtype=float)
        if P.ndim == 1:
            P = P.reshape(-1, 1, 1)
        if Pdot is not None:
            Pdot = np.asarray(Pdot, dtype=float)
            if Pdot.ndim == 1:
                Pdot = Pdot.reshape(-1, 1, 1)
            return cls(P, Pdot, float(T))
        K = P.shape[0] - 1
        dt = float(T) / K
        Pdot = np.empty_like(P)
        if K == 1:
            Pdot[0] = Pdot[1] = (P[1] - P[0]) / dt
        else:
            Pdot[1:-1] = (P[2:] - P[:-2]) / (2 * dt)
            Pdot[0] = (-3 * P[0] + 4 * P[1] - P[2]) / (2 * dt)
            Pdot[-1] = (3 * P[-1] - 4 * P[-2] + P[-3]) / (2 * dt)
        return cls(P, Pdot, float(T))

    @classmethod
    def from_callables(cls, P_fn, Pdot_fn, T: float, K: int) -> "CompensatorPath":
        ts = np.linspace(0.0, float(T), K + 1)
        P = np.stack([np.atleast_2d(np.asarray(P_fn(t), dtype=float)) for t in ts])
        Pdot = np.stack([np.atleast_2d(np.asarray(Pdot_fn(t), dtype=float)) for t in ts])
        return cls(P, Pdot, float(T), P_fn=P_fn, Pdot_fn=Pdot_fn)

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        if not 0.0 <= t <= self.T:
            # tolerate rounding drift from accumulated step arithmetic
            tol = 1e-9 * max(1.0, self.T)
            if t < -tol or t > self.T + tol:
                raise ValueError(f"t={t} outside [0, {self.T}]")
            t = min(max(t, 0.0), self.T)
        if self.P_fn is not None and self.Pdot_fn is not None:
            P = np.atleast_2d(np.asarray(self.P_fn(t), dtype=float))
            Pd = np.atleast_2d(np.asarray(self.Pdot_fn(t), dtype=float))
            return P, Pd
        s = t * self.K / self.T
        k = min(int(math.floor(s)), self.K - 1)
        w = s - k
        return ((1 - w) * self.P[k] + w * self.P[k + 1],
                (1 - w) * self.Pdot[k] + w * self.Pdot[k + 1])


def zero_compensator(n: int, T: float, K: int) -> CompensatorPath:
    Z = np.zeros((K + 1, n, n))
    return CompensatorPath(Z, Z.copy(), T)


def schur_psd(Q, S, R, floor: float = POS_FLOOR, slack: float = PSD_SLACK) -> bool:
    """PSD test for [[Q, S], [S^T, R]] with R uniformly positive.

    True iff min eig(R) >= floor and Q - S R^{-1} S^T >= -slack.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if _min_eig_sym(_sym(R)) < floor:
        return False
    comp = Q - S @ np.linalg.solve(R, S.T)
    return _min_eig_sym(_sym(comp)) >= -slack


@dataclass(frozen=True)
class RelaxedQuadruple:
    """Weights of the completed-square cost at one node, given compensator P.

    Terminal entries use the terminal mean-field state; pass it explicitly
    when assembling at an interior node.
    """

    Qp: np.ndarray
    Sp: np.ndarray
    Rp: np.ndarray
    qp: np.ndarray
    rp: np.ndarray
    Mp: float
    LpT: np.ndarray
    lpT: np.ndarray
    mpT: float


def assemble_relaxed(problem: ProblemSpec, comp: CompensatorPath, t: float,
                     x0, u0, x0_T=None) -> RelaxedQuadruple:
    """Evaluate the relaxed quadruple at time t along mean-field paths (x0, u0)."""
    x0 = np.asarray(x0, dtype=float).reshape(problem.n)
    u0 = np.asarray(u0, dtype=float).reshape(problem.m)
    x0T = x0 if x0_T is None else np.asarray(x0_T, dtype=float).reshape(problem.n)
    P, Pd = comp.at(t)

    A = problem.A.at(t)
    Abar = problem.Abar.at(t)
    B = problem.B.at(t)
    Bbar = problem.Bbar.at(t)
    b = problem.b.at(t)
    D = problem.D.at(t)
    Dbar = problem.Dbar.at(t)
    F = problem.F.at(t)
    Fbar = problem.Fbar.at(t)
    bbar = problem.bbar.at(t)
    sig = problem.sigma.at(t)
    sigb = problem.sigbar.at(t)
    Q = problem.Q.at(t)
    q = problem.q.at(t)
    R = problem.R.at(t)
    r = problem.r.at(t)
    S = problem.S.at(t)
    a1, a2, a3 = problem.alpha1, problem.alpha2, problem.alpha3
    b1, b2 = problem.beta1, problem.beta2

    Qp = Q + Pd + P @ A + A.T @ P + D.T @ P @ D
    Sp = S + P @ B + D.T @ P @ F
    Rp = R + F.T @ P @ F
    qp = (q + P @ b + D.T @ P @ bbar
          + (P @ Abar + D.T @ P @ Dbar - a1 * Q) @ x0
          + (P @ Bbar + D.T @ P @ Fbar - b2 * S) @ u0)
    rp = (r + F.T @ P @ bbar
          + (F.T @ P @ Dbar - a2 * S.T) @ x0
          + (F.T @ P @ Fbar - b1 * R) @ u0)
    Mp = (float(((a1 * a1 * Q + Dbar.T @ P @ Dbar) @ x0
                 + 2 * Dbar.T @ P @ bbar - 2 * a1 * q) @ x0)
          + 2 * a2 * b2 * float((S @ u0) @ x0)
          + 2 * float((Dbar.T @ P @ Fbar @ u0) @ x0)
          + float(bbar @ P @ bbar)
          + float(np.trace(sig.T @ P @ sig))
          + float(np.trace(sigb.T @ P @ sigb))
          + float(((b1 * b1 * R + Fbar.T @ P @ Fbar) @ u0
                   + 2 * Fbar.T @ P @ bbar - 2 * b1 * r) @ u0))

    LT = problem.LT
    lT = problem.lT
    PT = comp.P[-1]
    LpT = LT - PT
    lpT = lT - a3 * LT @ x0T
    mpT = float((a3 * a3 * LT @ x0T - 2 * a3 * lT) @ x0T)
    return RelaxedQuadruple(_sym(Qp), Sp, _sym(Rp), qp, rp, Mp, _sym(LpT), lpT, mpT)


@dataclass(frozen=True)
class NAgentRelaxedTerms:
    """Completed-square weights on the population averages at one node.

    Names reflect which pairing each weight multiplies: own state, state
    average, control average, and their cross terms.
    """

    state_avg_quad: np.ndarray
    state_to_avg: np.ndarray
    state_lin: np.ndarray
    avg_lin: np.ndarray
    state_to_uavg: np.ndarray
    cross_avg: np.ndarray
    control_avg_quad: np.ndarray
    control_lin: np.ndarray
    control_to_avg: np.ndarray
    uavg_lin: np.ndarray
    control_to_uavg: np.ndarray
    const_term: float


def assemble_n_agent(problem: ProblemSpec, comp: CompensatorPath, t: float) -> NAgentRelaxedTerms:
    """Average-interaction weights of the completed-square population cost at t."""
    P, _ = comp.at(t)
    Abar = problem.Abar.at(t)
    Bbar = problem.Bbar.at(t)
    b = problem.b.at(t)
    D = problem.D.at(t)
    Dbar = problem.Dbar.at(t)
    F = problem.F.at(t)
    Fbar = problem.Fbar.at(t)
    bbar = problem.bbar.at(t)
    sig = problem.sigma.at(t)
    sigb = problem.sigbar.at(t)
    Q = problem.Q.at(t)
    q = problem.q.at(t)
    R = problem.R.at(t)
    r = problem.r.at(t)
    S = problem.S.at(t)
    a1, a2 = problem.alpha1, problem.alpha2
    b1, b2 = problem.beta1, problem.beta2

    return NAgentRelaxedTerms(
        state_avg_quad=a1 * a1 * Q + Dbar.T @ P @ Dbar,
        state_to_avg=-a1 * Q + Abar.T @ P + Dbar.T @ P @ D,
        state_lin=q + P @ b + D.T @ P @ bbar,
        avg_lin=-a1 * q + Dbar.T @ P @ bbar,
        state_to_uavg=-b2 * S.T + Bbar.T @ P + Fbar.T @ P @ D,
        cross_avg=a2 * b2 * S + Dbar.T @ P @ Fbar,
        control_avg_quad=b1 * b1 * R + Fbar.T @ P @ Fbar,
        control_lin=r + F.T @ P @ bbar,
        control_to_avg=-a2 * S + Dbar.T @ P @ F,
        uavg_lin=Fbar.T @ P @ bbar - b1 * r,
        control_to_uavg=Fbar.T @ P @ F - b1 * R,
        const_term=(float(bbar @ P @ bbar)
                    + float(np.trace(sig.T @ P @ sig))
                    + float(np.trace(sigb.T @ P @ sigb))),
    )


def check_condition_pd(Q, S, R, LT, lam0: float = POS_FLOOR, slack: float = PSD_SLACK) -> bool:
    """Definiteness check: R >> 0, block [[Q,S],[S^T,R]] PSD, L_T PSD, at every node."""
    Q = np.asarray(Q, dtype=float)
    S = np.asarray(S, dtype=float)
    R = np.asarray(R, dtype=float)
    LT = np.atleast_2d(np.asarray(LT, dtype=float))
    if Q.ndim == 2:
        Q = Q[None]
    if S.ndim == 2:
        S = S[None]
    if R.ndim == 2:
        R = R[None]
    nodes = max(Q.shape[0], S.shape[0], R.shape[0])
    for k in range(nodes):
        Qk = Q[min(k, Q.shape[0] - 1)]
        Sk = S[min(k, S.shape[0] - 1)]
        Rk = R[min(k, R.shape[0] - 1)]
        if not schur_psd(Qk, Sk, Rk, floor=lam0, slack=slack):
            return False
    return _min_eig_sym(_sym(LT)) >= -slack


@dataclass(frozen=True)
class RcReport:
    """Node-by-node record of the relaxed-compensator inequality check.

    `app_residual` carries the residual of an application-specific
    sufficiency form when a certificate supplies one; None otherwise.
    """

    satisfied: bool
    lhs_min_eig: np.ndarray
    gain_min_eig: np.ndarray
    terminal_slack: float
    lam0: float
    slack: float
    offending_node: Optional[int] = None
    app_residual: Optional[np.ndarray] = None

    def check(self, lam0: float, slack: float) -> bool:
        """Re-evaluate satisfaction of the stored eigenvalue series at new floors."""
        return (bool(np.min(self.gain_min_eig) >= lam0)
                and bool(np.min(self.lhs_min_eig) >= -slack)
                and self.terminal_slack >= -slack)

    def to_text(self) -> str:
        lines = [
            f"satisfied: {self.satisfied}",
            f"floors: lam0={self.lam0:g} slack={self.slack:g}",
            f"terminal slack min eig: {self.terminal_slack:.12g}",
            f"offending node: {self.offending_node}",
            "lhs min eig per node: " + " ".join(f"{v:.12g}" for v in self.lhs_min_eig),
            "gain min eig per node: " + " ".join(f"{v:.12g}" for v in self.gain_min_eig),
        ]
        if self.app_residual is not None:
            lines.append("application residual per node: "
                         + " ".join(f"{v:.12g}" for v in self.app_residual))
        return "\n".join(lines)


def check_condition_rc(problem: ProblemSpec, comp: CompensatorPath,
                       lam0: float = POS_FLOOR, slack: float = PSD_SLACK) -> RcReport:
    """Evaluate the compensator inequality system on every grid node.

    The left-hand side is
    Pdot + PA + A^T P + D^T P D + Q - (S+PB+D^T P F)(R+F^T P F)^{-1}(...)^T
    and must be PSD, with R + F^T P F uniformly positive and P_T <= L_T.
    """
    K = problem.grid.K
    if comp.K != K:
        raise ValueError(f"compensator grid K={comp.K} does not match problem K={K}")
    lhs_min = np.empty(K + 1)
    gain_min = np.empty(K + 1)
    offending = None
    for k in range(K + 1):
        P = comp.P[k]
        Pd = comp.Pdot[k]
        A = problem.A.values[k]
        B = problem.B.values[k]
        D = problem.D.values[k]
        F = problem.F.values[k]
        Q = problem.Q.values[k]
        R = problem.R.values[k]
        S = problem.S.values[k]
        Rp = _sym(R + F.T @ P @ F)
        Sp = S + P @ B + D.T @ P @ F
        gain_min[k] = _min_eig_sym(Rp)
        if gain_min[k] < lam0 and offending is None:
            offending = k
        try:
            corr = Sp @ np.linalg.solve(Rp, Sp.T)
        except np.linalg.LinAlgError:
            corr = Sp @ np.linalg.pinv(Rp) @ Sp.T
        lhs = Pd + P @ A + A.T @ P + D.T @ P @ D + Q - corr
        lhs_min[k] = _min_eig_sym(_sym(lhs))
    term = _min_eig_sym(_sym(problem.LT - comp.P[-1]))
    satisfied = (offending is None
                 and bool(np.min(lhs_min) >= -slack)
                 and term >= -slack)
    return RcReport(satisfied=satisfied, lhs_min_eig=lhs_min, gain_min_eig=gain_min,
                    terminal_slack=term, lam0=lam0, slack=slack, offending_node=offending)
