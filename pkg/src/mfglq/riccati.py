"""Backward integration of the Riccati system and its companion linear ODE.

Three coupled backward problems: the own-state Riccati equation, the
asymmetric mean-field Riccati equation, and the linear offset ODE.  All use
classical one-step 4th-order integration with `substeps` subdivisions per
grid interval, coefficients frozen per interval, and gain positivity
monitored at substep resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .compensator import CompensatorPath, _min_eig_sym, _sym, check_condition_rc
from .model import ProblemSpec


class PositivityLoss(RuntimeError):
    """Gain matrix lost uniform positivity during a backward sweep."""

    def __init__(self, time: float, eigenvalue: float):
        super().__init__(f"gain positivity lost at t={time:.6g} (min eig {eigenvalue:.3g})")
        self.time = float(time)
        self.eigenvalue = float(eigenvalue)


class DivergenceError(RuntimeError):
    """Backward integration produced non-finite values."""


@dataclass(frozen=True)
class SolverOptions:
    substeps: int = 10
    lam0: float = 1e-8
    symmetrize: bool = True

    def __post_init__(self):
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        if not self.lam0 > 0:
            raise ValueError("lam0 must be positive")
        object.__setattr__(self, "substeps", int(self.substeps))


@dataclass(frozen=True)
class RiccatiSolution:
    """Node samples of the backward system plus derived gain paths.

    K1 drives the deviation from the mean-field state, K2 and k3 drive the
    mean-field state itself.
    """

    Pi: np.ndarray
    Sigma: np.ndarray
    rho: np.ndarray
    Rpi: np.ndarray
    Pi_tilde: np.ndarray
    Rsig: np.ndarray
    Sigma_tilde: np.ndarray
    Sigma_bar: np.ndarray
    rho_tilde: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    k3: np.ndarray
    T: float

    @property
    def K(self) -> int:
        return self.Pi.shape[0] - 1


def _pi_rhs(y, A, B, D, F, Q, S, R):
    Rp = R + F.T @ y @ F
    Pt = y @ B + D.T @ y @ F + S
    return -(y @ A + A.T @ y + D.T @ y @ D + Q - Pt @ np.linalg.solve(Rp, Pt.T))


def _solve_pi_general(problem: ProblemSpec, opts: SolverOptions,
                      quad_at=None, terminal=None) -> np.ndarray:
    """Backward sweep of the own-state Riccati equation.

    `quad_at(t, k)` overrides the cost weights (Q, S, R) with time-continuous
    values; used by the compensator cross-check.
    """
    grid = problem.grid
    K = grid.K
    n = problem.n
    sub = opts.substeps
    h = -grid.dt / sub
    out = np.empty((K + 1, n, n))
    y = _sym(np.asarray(problem.LT if terminal is None else terminal, dtype=float))
    out[K] = y

    def gain_check(t, y, F, R):
        g = _min_eig_sym(_sym(R + F.T @ y @ F))
        if not g >= opts.lam0:
            raise PositivityLoss(t, g)

    Fk = problem.F.values[K]
    Rk = problem.R.values[K] if quad_at is None else quad_at(grid.T, K)[2]
    gain_check(grid.T, y, Fk, Rk)

    for k in range(K - 1, -1, -1):
        A = problem.A.values[k]
        B = problem.B.values[k]
        D = problem.D.values[k]
        F = problem.F.values[k]
        t_right = (k + 1) * grid.dt
        if quad_at is None:
            Q = problem.Q.values[k]
            S = problem.S.values[k]
            R = problem.R.values[k]
        for s in range(sub):
            t = t_right + s * h
            if quad_at is None:
                k1 = _pi_rhs(y, A, B, D, F, Q, S, R)
                y2 = y + (h / 2) * k1
                k2 = _pi_rhs(y2, A, B, D, F, Q, S, R)
                y3 = y + (h / 2) * k2
                k3 = _pi_rhs(y3, A, B, D, F, Q, S, R)
                y4 = y + h * k3
                k4 = _pi_rhs(y4, A, B, D, F, Q, S, R)
            else:
                Qa, Sa, Ra = quad_at(t, k)
                Qm, Sm, Rm = quad_at(t + h / 2, k)
                Qb, Sb, Rb = quad_at(t + h, k)
                k1 = _pi_rhs(y, A, B, D, F, Qa, Sa, Ra)
                k2 = _pi_rhs(y + (h / 2) * k1, A, B, D, F, Qm, Sm, Rm)
                k3 = _pi_rhs(y + (h / 2) * k2, A, B, D, F, Qm, Sm, Rm)
                k4 = _pi_rhs(y + h * k3, A, B, D, F, Qb, Sb, Rb)
            y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if opts.symmetrize:
                y = _sym(y)
            R_now = R if quad_at is None else quad_at(t + h, k)[2]
            gain_check(t + h, y, F, R_now)
        out[k] = y
    return out


def _solve_pi_scalar(problem: ProblemSpec, opts: SolverOptions) -> np.ndarray:
    grid = problem.grid
    K = grid.K
    sub = opts.substeps
    h = -grid.dt / sub
    A = problem.A.values[:, 0, 0]
    B = problem.B.values[:, 0, 0]
    D = problem.D.values[:, 0, 0]
    F = problem.F.values[:, 0, 0]
    Q = problem.Q.values[:, 0, 0]
    S = problem.S.values[:, 0, 0]
    R = problem.R.values[:, 0, 0]
    lam0 = opts.lam0
    out = np.empty(K + 1)
    y = float(problem.LT[0, 0])
    out[K] = y
    g = R[K] + F[K] * y * F[K]
    if not g >= lam0:
        raise PositivityLoss(grid.T, g)

    def rhs(y, a, b, d, f, q, s, r):
        pt = y * b + d * y * f + s
        return -(2 * a * y + d * d * y + q - pt * pt / (r + f * y * f))

    for k in range(K - 1, -1, -1):
        a, b, d, f = A[k], B[k], D[k], F[k]
        q, s, r = Q[k], S[k], R[k]
        t_right = (k + 1) * grid.dt
        for s_i in range(sub):
            k1 = rhs(y, a, b, d, f, q, s, r)
            k2 = rhs(y + (h / 2) * k1, a, b, d, f, q, s, r)
            k3 = rhs(y + (h / 2) * k2, a, b, d, f, q, s, r)
            k4 = rhs(y + h * k3, a, b, d, f, q, s, r)
            y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            g = r + f * y * f
            if not g >= lam0:
                raise PositivityLoss(t_right + (s_i + 1) * h, g)
        out[k] = y
    return out.reshape(K + 1, 1, 1)


def solve_pi(problem: ProblemSpec, opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Node samples of the own-state Riccati solution, terminal value L_T."""
    if problem.n == 1 and problem.m == 1:
        return _solve_pi_scalar(problem, opts)
    return _solve_pi_general(problem, opts)


def _sigma_rho_rhs(Sg, rho, A, Abar, B, Bbar, b, D, Dbar, F, Fbar, bbar,
                   Q, q, R, r, S, a1, a2, b1, b2):
    FF = F + Fbar
    Rt = (1 - b1) * R + F.T @ Sg @ FF
    St = Sg @ (B + Bbar) + D.T @ Sg @ FF + (1 - b2) * S
    SbT = B.T @ Sg + F.T @ Sg @ (D + Dbar) + (1 - a2) * S.T
    rt = B.T @ rho + F.T @ Sg @ bbar + r
    sol = np.linalg.solve(Rt, np.concatenate([SbT, rt[:, None]], axis=1))
    dS = -(Sg @ (A + Abar) + A.T @ Sg + D.T @ Sg @ (D + Dbar)
           + (1 - a1) * Q - St @ sol[:, :-1])
    dr = -(A.T @ rho + Sg @ b + D.T @ Sg @ bbar + q - St @ sol[:, -1])
    return dS, dr, Rt


def _solve_sigma_rho_general(problem: ProblemSpec, opts: SolverOptions):
    grid = problem.grid
    K = grid.K
    n, m = problem.n, problem.m
    sub = opts.substeps
    h = -grid.dt / sub
    a1, a2 = problem.alpha1, problem.alpha2
    b1, b2 = problem.beta1, problem.beta2
    Sig = np.empty((K + 1, n, n))
    rho = np.empty((K + 1, n))
    Sg = (1 - problem.alpha3) * np.asarray(problem.LT, dtype=float)
    rg = np.asarray(problem.lT, dtype=float).copy()
    Sig[K] = Sg
    rho[K] = rg

    def monitor(t, Rt):
        g = _min_eig_sym(Rt + Rt.T)
        if not g >= opts.lam0:
            raise PositivityLoss(t, g)

    F_T = problem.F.values[K]
    Rt_T = (1 - b1) * problem.R.values[K] + F_T.T @ Sg @ (F_T + problem.Fbar.values[K])
    monitor(grid.T, Rt_T)

    for k in range(K - 1, -1, -1):
        cf = (problem.A.values[k], problem.Abar.values[k], problem.B.values[k],
              problem.Bbar.values[k], problem.b.values[k], problem.D.values[k],
              problem.Dbar.values[k], problem.F.values[k], problem.Fbar.values[k],
              problem.bbar.values[k], problem.Q.values[k], problem.q.values[k],
              problem.R.values[k], problem.r.values[k], problem.S.values[k],
              a1, a2, b1, b2)
        t_right = (k + 1) * grid.dt
        for s_i in range(sub):
            dS1, dr1, Rt = _sigma_rho_rhs(Sg, rg, *cf)
            dS2, dr2, _ = _sigma_rho_rhs(Sg + (h / 2) * dS1, rg + (h / 2) * dr1, *cf)
            dS3, dr3, _ = _sigma_rho_rhs(Sg + (h / 2) * dS2, rg + (h / 2) * dr2, *cf)
            dS4, dr4, _ = _sigma_rho_rhs(Sg + h * dS3, rg + h * dr3, *cf)
            Sg = Sg + (h / 6) * (dS1 + 2 * dS2 + 2 * dS3 + dS4)
            rg = rg + (h / 6) * (dr1 + 2 * dr2 + 2 * dr3 + dr4)
            t_new = t_right + (s_i + 1) * h
            if not (np.all(np.isfinite(Sg)) and np.all(np.isfinite(rg))):
                raise DivergenceError(f"non-finite mean-field Riccati values at t={t_new:.6g}")
            F, Fb, R = cf[7], cf[8], cf[12]
            monitor(t_new, (1 - b1) * R + F.T @ Sg @ (F + Fb))
        Sig[k] = Sg
        rho[k] = rg
    return Sig, rho


def _solve_sigma_rho_scalar(problem: ProblemSpec, opts: SolverOptions):
    grid = problem.grid
    K = grid.K
    sub = opts.substeps
    h = -grid.dt / sub
    a1, a2 = problem.alpha1, problem.alpha2
    b1, b2 = problem.beta1, problem.beta2
    cols = {name: getattr(problem, name).values[:, 0, 0]
            for name in ("A", "Abar", "B", "Bbar", "D", "Dbar", "F", "Fbar",
                         "Q", "R", "S")}
    vecs = {name: getattr(problem, name).values[:, 0]
            for name in ("b", "bbar", "q", "r")}
    lam0 = opts.lam0
    Sig = np.empty(K + 1)
    rho = np.empty(K + 1)
    Sg = (1 - problem.alpha3) * float(problem.LT[0, 0])
    rg = float(problem.lT[0])
    Sig[K] = Sg
    rho[K] = rg

    def rhs(Sg, rg, a, ab, bm, bb, d, db, f, fb, qq, rr, ss, bv, bbv, qv, rv):
        rt_gain = (1 - b1) * rr + f * Sg * (f + fb)
        st = Sg * (bm + bb) + d * Sg * (f + fb) + (1 - b2) * ss
        sbT = bm * Sg + f * Sg * (d + db) + (1 - a2) * ss
        rt = bm * rg + f * Sg * bbv + rv
        dS = -(Sg * (a + ab) + a * Sg + d * Sg * (d + db) + (1 - a1) * qq
               - st * sbT / rt_gain)
        dr = -(a * rg + Sg * bv + d * Sg * bbv + qv - st * rt / rt_gain)
        return dS, dr, rt_gain

    g0 = 2 * ((1 - b1) * cols["R"][K] + cols["F"][K] * Sg * (cols["F"][K] + cols["Fbar"][K]))
    if not g0 >= lam0:
        raise PositivityLoss(grid.T, g0)

    for k in range(K - 1, -1, -1):
        cf = (cols["A"][k], cols["Abar"][k], cols["B"][k], cols["Bbar"][k],
              cols["D"][k], cols["Dbar"][k], cols["F"][k], cols["Fbar"][k],
              cols["Q"][k], cols["R"][k], cols["S"][k],
              vecs["b"][k], vecs["bbar"][k], vecs["q"][k], vecs["r"][k])
        t_right = (k + 1) * grid.dt
        for s_i in range(sub):
            dS1, dr1, _ = rhs(Sg, rg, *cf)
            dS2, dr2, _ = rhs(Sg + (h / 2) * dS1, rg + (h / 2) * dr1, *cf)
            dS3, dr3, _ = rhs(Sg + (h / 2) * dS2, rg + (h / 2) * dr2, *cf)
            dS4, dr4, _ = rhs(Sg + h * dS3, rg + h * dr3, *cf)
            Sg = Sg + (h / 6) * (dS1 + 2 * dS2 + 2 * dS3 + dS4)
            rg = rg + (h / 6) * (dr1 + 2 * dr2 + 2 * dr3 + dr4)
            t_new = t_right + (s_i + 1) * h
            if not (np.isfinite(Sg) and np.isfinite(rg)):
                raise DivergenceError(f"non-finite mean-field Riccati values at t={t_new:.6g}")
            rt_gain = (1 - b1) * cf[9] + cf[6] * Sg * (cf[6] + cf[7])
            if not 2 * rt_gain >= lam0:
                raise PositivityLoss(t_new, 2 * rt_gain)
        Sig[k] = Sg
        rho[k] = rg
    return Sig.reshape(K + 1, 1, 1), rho.reshape(K + 1, 1)


def _solve_sigma_rho(problem: ProblemSpec, opts: SolverOptions):
    if problem.n == 1 and problem.m == 1:
        return _solve_sigma_rho_scalar(problem, opts)
    return _solve_sigma_rho_general(problem, opts)


def solve_sigma(problem: ProblemSpec, opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Node samples of the mean-field Riccati solution; possibly asymmetric."""
    Sig, _ = _solve_sigma_rho(problem, opts)
    return Sig


def solve_rho(problem: ProblemSpec, Sigma: np.ndarray,
              opts: SolverOptions = SolverOptions()) -> np.ndarray:
    """Node samples of the offset ODE solution.

    The offset couples to the mean-field Riccati path at substep resolution,
    so the pair is re-integrated jointly; the supplied node samples only
    guard against a mismatched problem/path pair.
    """
    Sig, rho = _solve_sigma_rho(problem, opts)
    given = np.asarray(Sigma, dtype=float)
    if given.shape != Sig.shape or np.max(np.abs(given - Sig)) > 1e-8:
        raise ValueError("Sigma path does not match this problem and grid")
    return rho


def assemble_solution(problem: ProblemSpec, Pi: np.ndarray, Sigma: np.ndarray,
                      rho: np.ndarray, Rsig_override: Optional[np.ndarray] = None
                      ) -> RiccatiSolution:
    """Derive gain paths from solved node samples.

    `Rsig_override` substitutes the control-average gain node-by-node; the
    mean-variance application carries its own nonsingular gain where the
    general one is singular.
    """
    K = problem.grid.K
    n, m = problem.n, problem.m
    Pi = np.asarray(Pi, dtype=float).reshape(K + 1, n, n)
    Sigma = np.asarray(Sigma, dtype=float).reshape(K + 1, n, n)
    rho = np.asarray(rho, dtype=float).reshape(K + 1, n)
    a2 = problem.alpha2
    b1, b2 = problem.beta1, problem.beta2
    Rpi = np.empty((K + 1, m, m))
    Pi_tilde = np.empty((K + 1, n, m))
    Rsig = np.empty((K + 1, m, m))
    Sigma_tilde = np.empty((K + 1, n, m))
    Sigma_bar = np.empty((K + 1, n, m))
    rho_tilde = np.empty((K + 1, m))
    K1 = np.empty((K + 1, m, n))
    K2 = np.empty((K + 1, m, n))
    k3 = np.empty((K + 1, m))
    for k in range(K + 1):
        B = problem.B.values[k]
        Bbar = problem.Bbar.values[k]
        D = problem.D.values[k]
        Dbar = problem.Dbar.values[k]
        F = problem.F.values[k]
        Fbar = problem.Fbar.values[k]
        S = problem.S.values[k]
        R = problem.R.values[k]
        r = problem.r.values[k]
        bbar = problem.bbar.values[k]
        P = Pi[k]
        Sg = Sigma[k]
        Rpi[k] = _sym(R + F.T @ P @ F)
        Pi_tilde[k] = P @ B + D.T @ P @ F + S
        Rsig[k] = ((1 - b1) * R + F.T @ Sg @ (F + Fbar)
                   if Rsig_override is None else Rsig_override[k])
        Sigma_tilde[k] = Sg @ (B + Bbar) + D.T @ Sg @ (F + Fbar) + (1 - b2) * S
        Sigma_bar[k] = Sg.T @ B + (D + Dbar).T @ Sg.T @ F + (1 - a2) * S
        rho_tilde[k] = B.T @ rho[k] + F.T @ Sg @ bbar + r
        try:
            K1[k] = np.linalg.solve(Rpi[k], Pi_tilde[k].T)
            sol = np.linalg.solve(Rsig[k], np.concatenate(
                [Sigma_bar[k].T, rho_tilde[k][:, None]], axis=1))
        except np.linalg.LinAlgError as exc:
            raise PositivityLoss(k * problem.grid.dt,
                                 _min_eig_sym(_sym(Rsig[k]))) from exc
        K2[k] = sol[:, :-1]
        k3[k] = sol[:, -1]
    return RiccatiSolution(Pi=Pi, Sigma=Sigma, rho=rho, Rpi=Rpi, Pi_tilde=Pi_tilde,
                           Rsig=Rsig, Sigma_tilde=Sigma_tilde, Sigma_bar=Sigma_bar,
                           rho_tilde=rho_tilde, K1=K1, K2=K2, k3=k3, T=problem.grid.T)


def build_solution(problem: ProblemSpec, opts: SolverOptions = SolverOptions()
                   ) -> RiccatiSolution:
    """Solve all three backward problems and assemble the gain paths."""
    Pi = solve_pi(problem, opts)
    Sig, rho = _solve_sigma_rho(problem, opts)
    return assemble_solution(problem, Pi, Sig, rho)


def verify_via_compensator(problem: ProblemSpec, comp: CompensatorPath,
                           opts: SolverOptions = SolverOptions()):
    """Cross-check: solve the definite relaxed Riccati equation and compare.

    Returns (relaxed path, maxdiff) where maxdiff is the largest entrywise
    gap over nodes between the direct solution and relaxed-plus-compensator.
    """
    rep = check_condition_rc(problem, comp, lam0=opts.lam0)
    if not rep.satisfied:
        raise ValueError("compensator fails the definiteness inequality system; "
                         "cross-check undefined")

    Avals = problem.A.values
    Bvals = problem.B.values
    Dvals = problem.D.values
    Fvals = problem.F.values
    Qvals = problem.Q.values
    Svals = problem.S.values
    Rvals = problem.R.values

    def quad_at(t, k):
        P, Pd = comp.at(t)
        A, B, D, F = Avals[k], Bvals[k], Dvals[k], Fvals[k]
        Qp = Qvals[k] + Pd + P @ A + A.T @ P + D.T @ P @ D
        Sp = Svals[k] + P @ B + D.T @ P @ F
        Rp = Rvals[k] + F.T @ P @ F
        return Qp, Sp, Rp

    LpT = np.asarray(problem.LT, dtype=float) - comp.P[-1]
    Pi_p = _solve_pi_general(problem, opts, quad_at=quad_at, terminal=LpT)
    Pi = solve_pi(problem, opts)
    maxdiff = float(np.max(np.abs(Pi - (Pi_p + comp.P))))
    return Pi_p, maxdiff


def write_solution_csv(path: str, solution: RiccatiSolution) -> None:
    """One row per node: t, then row-major entries of each solved path."""
    import csv

    K = solution.K
    n = solution.Pi.shape[1]
    times = np.linspace(0.0, solution.T, K + 1)
    header = ["t"]
    header += [f"Pi_{i}{j}" for i in range(n) for j in range(n)]
    header += [f"Sigma_{i}{j}" for i in range(n) for j in range(n)]
    header += [f"rho_{i}" for i in range(n)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(K + 1):
            row = [f"{times[k]:.15g}"]
            row += [f"{v:.15g}" for v in solution.Pi[k].ravel()]
            row += [f"{v:.15g}" for v in solution.Sigma[k].ravel()]
            row += [f"{v:.15g}" for v in solution.rho[k]]
            writer.writerow(row)
