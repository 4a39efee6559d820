"""N-agent simulation, Monte Carlo cost evaluation, and structural checks.

Two engines share the step formulas.  `simulate_population` loops replications
with one RNG substream per (seed, replication, agent, channel) so results do
not depend on execution order; the internal batched engine vectorizes over
replications with one stream per channel and serves the common-random-number
contrasts (completing-square, gradient, convexity).

Channel ids: 0 = common noise, 1 = own state noise, 2 = observation noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .compensator import CompensatorPath, assemble_n_agent, assemble_relaxed
from .filtering import kalman_gain, psd_project
from .meanfield import simulate_x0
from .model import ProblemSpec
from .riccati import DivergenceError, RiccatiSolution


@dataclass(frozen=True)
class PopulationConfig:
    N: int
    M: int
    seed: int
    limit_mode: bool = False
    store_observations: bool = True

    def __post_init__(self):
        if int(self.N) < 1 or int(self.M) < 1:
            raise ValueError("N and M must be >= 1")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class PopulationResult:
    """Paths indexed (replication, agent, node, entry); averages (replication, node, entry)."""

    x: np.ndarray
    u: np.ndarray
    xhat: np.ndarray
    y: Optional[np.ndarray]
    theta: np.ndarray
    xN: np.ndarray
    uN: np.ndarray
    x0: np.ndarray
    u0: np.ndarray
    cost_samples: np.ndarray
    config: PopulationConfig
    T: float

    @property
    def K(self) -> int:
        return self.x.shape[2] - 1


@dataclass(frozen=True)
class AdjointReconstruction:
    phi: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    vartheta: np.ndarray


@dataclass(frozen=True)
class EquivalenceReport:
    limit_residual: float
    limit_se: float
    n_agent_residual: float
    n_agent_se: float


@dataclass(frozen=True)
class GradientEstimate:
    eps: float
    derivative: float
    derivative_se: float
    second_difference: float
    second_se: float


def _stream(seed: int, key: tuple) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _rep_increments(problem: ProblemSpec, seed: int, rep: int, N: int):
    """Increment arrays for one replication, keyed per agent and channel."""
    K, d = problem.grid.K, problem.d
    sq = np.sqrt(problem.grid.dt)
    dW0 = _stream(seed, (rep, 0)).normal(0.0, sq, size=K)
    dW = np.empty((N, K, d))
    dWbar = np.empty((N, K, d))
    for a in range(N):
        dW[a] = _stream(seed, (rep, a, 1)).normal(0.0, sq, size=(K, d))
        dWbar[a] = _stream(seed, (rep, a, 2)).normal(0.0, sq, size=(K, d))
    return dW0, dW, dWbar


def _node_coeffs(problem: ProblemSpec, k: int) -> dict:
    return {name: getattr(problem, name).values[k] for name in (
        "A", "Abar", "B", "Bbar", "b", "D", "Dbar", "F", "Fbar", "bbar",
        "sigma", "sigbar", "G", "Gbar", "H", "Hbar", "btilde", "sigtilde",
        "I", "bcheck", "sigcheck")}


def simulate_population(problem: ProblemSpec, sol: RiccatiSolution,
                        cfg: PopulationConfig, *,
                        deviator=None) -> PopulationResult:
    """Coupled N-agent simulation under the candidate feedback.

    deviator, when given, is called as deviator(k, xhat, x0_k, u_candidate)
    and replaces agent 0's control at every node; the remaining agents keep
    the candidate feedback.
    """
    grid = problem.grid
    K, dt = grid.K, grid.dt
    n, m = problem.n, problem.m
    N, M = cfg.N, cfg.M
    if sol.K != K:
        raise ValueError("solution grid does not match problem grid")

    x = np.empty((M, N, K + 1, n))
    u = np.empty((M, N, K + 1, m))
    xhat = np.empty((M, N, K + 1, n))
    y = np.empty((M, N, K + 1, n)) if cfg.store_observations else None
    theta = np.empty((M, K + 1))
    xN = np.empty((M, K + 1, n))
    uN = np.empty((M, K + 1, m))
    x0 = np.empty((M, K + 1, n))
    u0 = np.empty((M, K + 1, m))
    cost_samples = np.empty(M)

    for rep in range(M):
        dW0, dW, dWbar = _rep_increments(problem, cfg.seed, rep, N)
        limit = simulate_x0(problem, sol, dW0)
        x0[rep], u0[rep] = limit.x0, limit.u0

        X = np.tile(problem.x, (N, 1))
        Xh = X.copy()
        Pf = np.zeros((n, n))
        Y = np.zeros((N, n))
        th = 0.0
        x[rep, :, 0] = X
        xhat[rep, :, 0] = Xh
        if y is not None:
            y[rep, :, 0] = Y
        theta[rep, 0] = th

        for k in range(K):
            c = _node_coeffs(problem, k)
            U = -(Xh - limit.x0[k]) @ sol.K1[k].T \
                - (limit.x0[k] @ sol.K2[k].T + sol.k3[k])
            if deviator is not None:
                U[0] = deviator(k, Xh[0], limit.x0[k], U[0])
            u[rep, :, k] = U
            xNk = X.mean(axis=0)
            uNk = U.mean(axis=0)
            xN[rep, k], uN[rep, k] = xNk, uNk
            xa, ua = (limit.x0[k], limit.u0[k]) if cfg.limit_mode else (xNk, uNk)

            dY = (X @ c["G"].T + U @ c["H"].T + xa @ c["Gbar"].T
                  + ua @ c["Hbar"].T + c["btilde"]) * dt + dWbar[:, k] @ c["sigtilde"].T
            dth = (c["I"] * th + c["bcheck"]) * dt + c["sigcheck"] * dW0[k]
            X = X + (X @ c["A"].T + U @ c["B"].T + xa @ c["Abar"].T
                     + ua @ c["Bbar"].T + c["b"]) * dt \
                + dW[:, k] @ c["sigma"].T \
                + (X @ c["D"].T + U @ c["F"].T + xa @ c["Dbar"].T
                   + ua @ c["Fbar"].T + c["bbar"]) * dW0[k] \
                + dWbar[:, k] @ c["sigbar"].T
            if not np.all(np.isfinite(X)):
                bad = int(np.argmax(~np.isfinite(X).all(axis=1)))
                raise DivergenceError(
                    f"state diverged: replication {rep} agent {bad} node {k + 1}")

            dW0rec = (dth - (c["I"] * th + c["bcheck"]) * dt) / c["sigcheck"]
            dnu = dY - (Xh @ c["G"].T + U @ c["H"].T + limit.x0[k] @ c["Gbar"].T
                        + limit.u0[k] @ c["Hbar"].T + c["btilde"]) * dt
            Kg = kalman_gain(Pf, c["G"], c["sigbar"], c["sigtilde"])
            Xh = Xh + (Xh @ c["A"].T + U @ c["B"].T + limit.x0[k] @ c["Abar"].T
                       + limit.u0[k] @ c["Bbar"].T + c["b"]) * dt \
                + (Xh @ c["D"].T + U @ c["F"].T + limit.x0[k] @ c["Dbar"].T
                   + limit.u0[k] @ c["Fbar"].T + c["bbar"]) * dW0rec \
                + dnu @ Kg.T
            obs_cov = c["sigtilde"] @ c["sigtilde"].T
            Pf = Pf + (c["A"] @ Pf + Pf @ c["A"].T + c["D"] @ Pf @ c["D"].T
                       + c["sigma"] @ c["sigma"].T + c["sigbar"] @ c["sigbar"].T
                       - Kg @ obs_cov @ Kg.T) * dt \
                + (c["D"] @ Pf + Pf @ c["D"].T) * dW0rec
            Pf = psd_project(Pf)

            Y = Y + dY
            th = th + dth
            x[rep, :, k + 1] = X
            xhat[rep, :, k + 1] = Xh
            if y is not None:
                y[rep, :, k + 1] = Y
            theta[rep, k + 1] = th

        U = -(Xh - limit.x0[K]) @ sol.K1[K].T \
            - (limit.x0[K] @ sol.K2[K].T + sol.k3[K])
        if deviator is not None:
            U[0] = deviator(K, Xh[0], limit.x0[K], U[0])
        u[rep, :, K] = U
        xN[rep, K] = X.mean(axis=0)
        uN[rep, K] = U.mean(axis=0)
        xa_path = x0[rep] if cfg.limit_mode else xN[rep]
        ua_path = u0[rep] if cfg.limit_mode else uN[rep]
        cost_samples[rep] = cost_quadrature(problem, x[rep, 0], u[rep, 0],
                                            xa_path, ua_path)

    return PopulationResult(x=x, u=u, xhat=xhat, y=y, theta=theta, xN=xN,
                            uN=uN, x0=x0, u0=u0, cost_samples=cost_samples,
                            config=cfg, T=grid.T)


def simulate_limit(problem: ProblemSpec, sol: RiccatiSolution,
                   cfg: PopulationConfig) -> PopulationResult:
    """Representative-agent system with (x0, u0) in place of the averages."""
    return simulate_population(problem, sol, replace(cfg, limit_mode=True))


def cost_quadrature(problem: ProblemSpec, x: np.ndarray, u: np.ndarray,
                    xa: np.ndarray, ua: np.ndarray) -> float:
    """Trapezoid running cost plus terminal cost along one path."""
    dt = problem.grid.dt
    dx = x - problem.alpha1 * xa
    dxs = x - problem.alpha2 * xa
    du = u - problem.beta1 * ua
    dus = u - problem.beta2 * ua
    Q, q = problem.Q.values, problem.q.values
    R, r = problem.R.values, problem.r.values
    S = problem.S.values
    f = (np.einsum("ti,tij,tj->t", dx, Q, dx)
         + 2.0 * np.einsum("ti,ti->t", q, dx)
         + np.einsum("ti,tij,tj->t", du, R, du)
         + 2.0 * np.einsum("ti,ti->t", r, du)
         + 2.0 * np.einsum("tij,tj,ti->t", S, dus, dxs))
    run = dt * (0.5 * f[0] + f[1:-1].sum() + 0.5 * f[-1])
    dT = x[-1] - problem.alpha3 * xa[-1]
    term = float(dT @ problem.LT @ dT + 2.0 * problem.lT @ dT)
    return 0.5 * (run + term)


def _mean_se(samples: np.ndarray):
    samples = np.asarray(samples, dtype=float)
    M = samples.shape[0]
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return mean, se


def evaluate_cost_N(result: PopulationResult, problem: ProblemSpec, i: int):
    costs = [cost_quadrature(problem, result.x[rep, i], result.u[rep, i],
                             result.xN[rep], result.uN[rep])
             for rep in range(result.config.M)]
    return _mean_se(np.array(costs))


def evaluate_cost_limit(x: np.ndarray, u: np.ndarray, x0: np.ndarray,
                        u0: np.ndarray, problem: ProblemSpec):
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return cost_quadrature(problem, x, u, x0, u0), 0.0
    costs = [cost_quadrature(problem, x[rep], u[rep], x0[rep], u0[rep])
             for rep in range(x.shape[0])]
    return _mean_se(np.array(costs))


def reconstruct_adjoint(result: PopulationResult, sol: RiccatiSolution,
                        problem: ProblemSpec, rep: int = 0, agent: int = 0
                        ) -> AdjointReconstruction:
    K = result.K
    xbar = result.x[rep, agent]
    ubar = result.u[rep, agent]
    x0, u0 = result.x0[rep], result.u0[rep]
    n, d = problem.n, problem.d
    phi = np.empty((K + 1, n))
    eta = np.empty((K + 1, n))
    zeta = np.empty((K + 1, n, d))
    vartheta = np.empty((K + 1, n, d))
    for k in range(K + 1):
        Pi, Sg = sol.Pi[k], sol.Sigma[k]
        D = problem.D.values[k]
        Dbar = problem.Dbar.values[k]
        F = problem.F.values[k]
        Fbar = problem.Fbar.values[k]
        phi[k] = Pi @ (xbar[k] - x0[k]) + Sg @ x0[k] + sol.rho[k]
        eta[k] = Pi @ (D @ (xbar[k] - x0[k]) + F @ (ubar[k] - u0[k])) \
            + Sg @ ((D + Dbar) @ x0[k] + (F + Fbar) @ u0[k]
                    + problem.bbar.values[k])
        zeta[k] = Pi @ problem.sigma.values[k]
        vartheta[k] = Pi @ problem.sigbar.values[k]
    return AdjointReconstruction(phi=phi, eta=eta, zeta=zeta, vartheta=vartheta)


def adjoint_consistency(result: PopulationResult, sol: RiccatiSolution,
                        problem: ProblemSpec, rep: int = 0, agent: int = 0
                        ) -> float:
    """Terminal defect of the reconstructed adjoint under its backward equation."""
    adj = reconstruct_adjoint(result, sol, problem, rep, agent)
    K, dt = result.K, problem.grid.dt
    dW0, dW, dWbar = _rep_increments(problem, result.config.seed, rep,
                                     result.config.N)
    xbar = result.x[rep, agent]
    ubar = result.u[rep, agent]
    x0, u0 = result.x0[rep], result.u0[rep]
    phit = adj.phi[0].copy()
    for k in range(K):
        A = problem.A.values[k]
        D = problem.D.values[k]
        Q, q = problem.Q.values[k], problem.q.values[k]
        S = problem.S.values[k]
        drift = A.T @ adj.phi[k] + D.T @ adj.eta[k] \
            + Q @ (xbar[k] - problem.alpha1 * x0[k]) \
            + S @ (ubar[k] - problem.beta2 * u0[k]) + q
        phit = phit - drift * dt + adj.zeta[k] @ dW[agent, k] \
            + adj.eta[k] * dW0[k] + adj.vartheta[k] @ dWbar[agent, k]
    terminal = problem.LT @ (xbar[K] - problem.alpha3 * x0[K]) + problem.lT
    return float(np.max(np.abs(phit - terminal)))


def _relaxed_tables(problem: ProblemSpec, comp: CompensatorPath):
    """Node arrays of the relaxed cost pieces (own-state core plus average terms)."""
    K = problem.grid.K
    zero_x = np.zeros(problem.n)
    zero_u = np.zeros(problem.m)
    cores = []
    terms = []
    for k in range(K + 1):
        t = problem.grid.T * k / K
        quad = assemble_relaxed(problem, comp, t, zero_x, zero_u)
        cores.append((quad.Qp, quad.Sp, quad.Rp))
        terms.append(assemble_n_agent(problem, comp, t))
    Qc = np.stack([c[0] for c in cores])
    Sc = np.stack([c[1] for c in cores])
    Rc = np.stack([c[2] for c in cores])
    fields = ("state_avg_quad", "state_to_avg", "state_lin", "avg_lin",
              "state_to_uavg", "cross_avg", "control_avg_quad", "control_lin",
              "control_to_avg", "uavg_lin", "control_to_uavg", "const_term")
    avg = {f: np.stack([np.asarray(getattr(tm, f), dtype=float) for tm in terms])
           for f in fields}
    return Qc, Sc, Rc, avg


def _relaxed_integrand(tables, k: int, x, u, xa, ua):
    """Relaxed running integrand; x, u and the averages carry leading batch axes."""
    Qc, Sc, Rc, avg = tables
    f = (np.einsum("...i,ij,...j->...", x, Qc[k], x)
         + 2.0 * np.einsum("ij,...j,...i->...", Sc[k], u, x)
         + np.einsum("...i,ij,...j->...", u, Rc[k], u)
         + np.einsum("...i,ij,...j->...", xa, avg["state_avg_quad"][k], xa)
         + 2.0 * np.einsum("...i,ij,...j->...", xa, avg["state_to_avg"][k], x)
         + 2.0 * np.einsum("...i,i->...", x, avg["state_lin"][k])
         + 2.0 * np.einsum("...i,i->...", xa, avg["avg_lin"][k])
         + 2.0 * np.einsum("...i,ij,...j->...", ua, avg["state_to_uavg"][k], x)
         + 2.0 * np.einsum("ij,...j,...i->...", avg["cross_avg"][k], ua, xa)
         + np.einsum("...i,ij,...j->...", ua, avg["control_avg_quad"][k], ua)
         + 2.0 * np.einsum("...i,i->...", u, avg["control_lin"][k])
         + 2.0 * np.einsum("ij,...j,...i->...", avg["control_to_avg"][k], u, xa)
         + 2.0 * np.einsum("...i,i->...", ua, avg["uavg_lin"][k])
         + 2.0 * np.einsum("ji,...j,...i->...", avg["control_to_uavg"][k], ua, u)
         + avg["const_term"][k])
    return f


def _relaxed_terminal(problem: ProblemSpec, PT: np.ndarray, x, xa):
    LT, lT = problem.LT, problem.lT
    a3 = problem.alpha3
    return (np.einsum("...i,ij,...j->...", x, LT - PT, x)
            - 2.0 * a3 * np.einsum("...i,ij,...j->...", xa, LT, x)
            + a3 ** 2 * np.einsum("...i,ij,...j->...", xa, LT, xa)
            + 2.0 * np.einsum("...i,i->...", x, lT)
            - 2.0 * a3 * np.einsum("...i,i->...", xa, lT))


def _factored_integrand(problem: ProblemSpec, k: int, x, u, xa, ua):
    Q, q = problem.Q.values[k], problem.q.values[k]
    R, r = problem.R.values[k], problem.r.values[k]
    S = problem.S.values[k]
    dx = x - problem.alpha1 * xa
    dxs = x - problem.alpha2 * xa
    du = u - problem.beta1 * ua
    dus = u - problem.beta2 * ua
    return (np.einsum("...i,ij,...j->...", dx, Q, dx)
            + 2.0 * np.einsum("...i,i->...", dx, q)
            + np.einsum("...i,ij,...j->...", du, R, du)
            + 2.0 * np.einsum("...i,i->...", du, r)
            + 2.0 * np.einsum("ij,...j,...i->...", S, dus, dxs))


def _factored_terminal(problem: ProblemSpec, x, xa):
    dT = x - problem.alpha3 * xa
    return (np.einsum("...i,ij,...j->...", dT, problem.LT, dT)
            + 2.0 * np.einsum("...i,i->...", dT, problem.lT))


def _mc_costs(problem: ProblemSpec, sol: RiccatiSolution, M: int, seed: int,
              *, N: int = 1, limit_mode: bool = True, offsets=None,
              comp: Optional[CompensatorPath] = None, chunk: int = 2048):
    """Batched engine: per-replication costs of agent 0 under control variants.

    offsets: list of open-loop control offsets ((K+1, m) or None) added to the
    feedback law; all variants share every noise draw.  Returns (J, Jp) with
    shape (V, M); Jp is None without a compensator.
    """
    grid = problem.grid
    K, dt = grid.K, grid.dt
    n, m, d = problem.n, problem.m, problem.d
    if offsets is None:
        offsets = [None]
    V = len(offsets)
    off = np.zeros((V, K + 1, m))
    for j, o in enumerate(offsets):
        if o is not None:
            o = np.asarray(o, dtype=float)
            off[j] = o if o.ndim == 2 else np.tile(o, (K + 1, 1))

    tables = _relaxed_tables(problem, comp) if comp is not None else None
    gen = {ch: _stream(seed, (ch,)) for ch in (0, 1, 2)}
    sq = np.sqrt(dt)
    J = np.empty((V, M))
    Jp = np.empty((V, M)) if comp is not None else None

    done = 0
    while done < M:
        C = min(chunk, M - done)
        X = np.broadcast_to(problem.x, (C, V, N, n)).copy()
        Xh = X.copy()
        Pf = np.zeros((C, n, n))
        x0 = np.broadcast_to(problem.x, (C, n)).copy()
        th = np.zeros(C)
        runJ = np.zeros((C, V))
        runJp = np.zeros((C, V))

        for k in range(K + 1):
            c = _node_coeffs(problem, k)
            u0 = -(x0 @ sol.K2[k].T + sol.k3[k])
            U = -(Xh - x0[:, None, None, :]) @ sol.K1[k].T \
                - (x0 @ sol.K2[k].T + sol.k3[k])[:, None, None, :] \
                + off[None, :, k, None, :]
            xNk = X.mean(axis=2, keepdims=True)
            uNk = U.mean(axis=2, keepdims=True)
            if limit_mode:
                xa, ua = x0[:, None, None, :], u0[:, None, None, :]
            else:
                xa, ua = xNk, uNk

            w = dt if 0 < k < K else 0.5 * dt
            fx, fu = X[:, :, 0, :], U[:, :, 0, :]
            fxa = np.broadcast_to(xa[:, :, 0, :], (C, V, n))
            fua = np.broadcast_to(ua[:, :, 0, :], (C, V, m))
            runJ += w * _factored_integrand(problem, k, fx, fu, fxa, fua)
            if tables is not None:
                runJp += w * _relaxed_integrand(tables, k, fx, fu, fxa, fua)
            if k == K:
                termJ = _factored_terminal(problem, fx, fxa)
                if tables is not None:
                    termJp = _relaxed_terminal(problem, comp.at(grid.T)[0],
                                               fx, fxa)
                break

            dW0 = gen[0].normal(0.0, sq, size=C)
            dW = gen[1].normal(0.0, sq, size=(C, 1, N, d))
            dWb = gen[2].normal(0.0, sq, size=(C, 1, N, d))

            dY = (X @ c["G"].T + U @ c["H"].T + xa @ c["Gbar"].T
                  + ua @ c["Hbar"].T + c["btilde"]) * dt + dWb @ c["sigtilde"].T
            dth = (c["I"] * th + c["bcheck"]) * dt + c["sigcheck"] * dW0
            x0_new = x0 + (x0 @ (c["A"] + c["Abar"]).T
                           + u0 @ (c["B"] + c["Bbar"]).T + c["b"]) * dt \
                + (x0 @ (c["D"] + c["Dbar"]).T
                   + u0 @ (c["F"] + c["Fbar"]).T + c["bbar"]) * dW0[:, None]

            X = X + (X @ c["A"].T + U @ c["B"].T + xa @ c["Abar"].T
                     + ua @ c["Bbar"].T + c["b"]) * dt \
                + dW @ c["sigma"].T \
                + (X @ c["D"].T + U @ c["F"].T + xa @ c["Dbar"].T
                   + ua @ c["Fbar"].T + c["bbar"]) * dW0[:, None, None, None] \
                + dWb @ c["sigbar"].T
            if not np.all(np.isfinite(X)):
                raise DivergenceError(f"batched state diverged at node {k + 1}")

            dW0rec = (dth - (c["I"] * th + c["bcheck"]) * dt) / c["sigcheck"]
            dnu = dY - (Xh @ c["G"].T + U @ c["H"].T
                        + x0[:, None, None, :] @ c["Gbar"].T
                        + u0[:, None, None, :] @ c["Hbar"].T
                        + c["btilde"]) * dt
            obs_cov = c["sigtilde"] @ c["sigtilde"].T
            gains = (Pf @ c["G"].T + c["sigbar"] @ c["sigtilde"].T) \
                @ np.linalg.inv(obs_cov)
            Xh = Xh + (Xh @ c["A"].T + U @ c["B"].T
                       + x0[:, None, None, :] @ c["Abar"].T
                       + u0[:, None, None, :] @ c["Bbar"].T + c["b"]) * dt \
                + (Xh @ c["D"].T + U @ c["F"].T
                   + x0[:, None, None, :] @ c["Dbar"].T
                   + u0[:, None, None, :] @ c["Fbar"].T
                   + c["bbar"]) * dW0rec[:, None, None, None] \
                + np.einsum("cvai,cji->cvaj", dnu, gains)
            Pf = Pf + (c["A"] @ Pf + Pf @ c["A"].T
                       + c["D"] @ Pf @ c["D"].T
                       + c["sigma"] @ c["sigma"].T + c["sigbar"] @ c["sigbar"].T
                       - gains @ obs_cov @ np.swapaxes(gains, 1, 2)) * dt \
                + (c["D"] @ Pf + Pf @ c["D"].T) * dW0rec[:, None, None]
            Pf = 0.5 * (Pf + np.swapaxes(Pf, 1, 2))
            vals = np.linalg.eigvalsh(Pf)
            if np.any(vals[:, 0] < -1e-12):
                w_, v_ = np.linalg.eigh(Pf)
                w_ = np.clip(w_, 0.0, None)
                Pf = np.einsum("cij,cj,ckj->cik", v_, w_, v_)
            th = th + dth
            x0 = x0_new

        J[:, done:done + C] = (0.5 * (runJ + termJ)).T
        if Jp is not None:
            Jp[:, done:done + C] = (0.5 * (runJp + termJp)).T
        done += C
    return J, Jp


def equivalence_check(problem: ProblemSpec, comp: CompensatorPath,
                      sol: RiccatiSolution, M: int, seed: int, *,
                      offset=None, N: int = 8) -> EquivalenceReport:
    """Completing-square identity residuals on shared paths.

    The identity states cost = relaxed cost + (1/2) <P(0) x, x> for any
    admissible control; the residual is a pure Monte Carlo fluctuation.
    """
    half_quad = 0.5 * float(problem.x @ comp.P[0] @ problem.x)
    offsets = [offset]
    J, Jp = _mc_costs(problem, sol, M, seed, N=1, limit_mode=True,
                      offsets=offsets, comp=comp)
    delta = J[0] - Jp[0] - half_quad
    lim_mean, lim_se = _mean_se(delta)
    J, Jp = _mc_costs(problem, sol, M, seed + 1, N=N, limit_mode=False,
                      offsets=offsets, comp=comp)
    delta = J[0] - Jp[0] - half_quad
    n_mean, n_se = _mean_se(delta)
    return EquivalenceReport(limit_residual=abs(lim_mean), limit_se=lim_se,
                             n_agent_residual=abs(n_mean), n_agent_se=n_se)


def gradient_check(problem: ProblemSpec, sol: RiccatiSolution, v, eps_list,
                   M: int, seed: int):
    """Central-difference directional derivatives of the limiting cost at the
    feedback law, with second differences for convexity."""
    v = np.asarray(v, dtype=float)
    K = problem.grid.K
    if v.ndim == 1:
        v = np.tile(v, (K + 1, 1))
    eps_list = [float(e) for e in eps_list]
    offsets = [None]
    for e in eps_list:
        offsets.extend([e * v, -e * v])
    J, _ = _mc_costs(problem, sol, M, seed, N=1, limit_mode=True,
                     offsets=offsets)
    out = []
    for j, e in enumerate(eps_list):
        plus, minus = J[1 + 2 * j], J[2 + 2 * j]
        der, der_se = _mean_se((plus - minus) / (2.0 * e))
        sec, sec_se = _mean_se((plus + minus - 2.0 * J[0]) / e ** 2)
        out.append(GradientEstimate(eps=e, derivative=der, derivative_se=der_se,
                                    second_difference=sec, second_se=sec_se))
    return out


def decomposition_check(problem: ProblemSpec, result: PopulationResult) -> float:
    """Re-simulate the noise-only and control parts; additivity is exact for
    the shared one-step scheme up to float roundoff."""
    cfg = result.config
    K, dt = result.K, problem.grid.dt
    n, N = problem.n, cfg.N
    worst = 0.0
    for rep in range(cfg.M):
        dW0, dW, dWbar = _rep_increments(problem, cfg.seed, rep, N)
        X0c = np.tile(problem.x, (N, 1))
        X1c = np.zeros((N, n))
        for k in range(K):
            c = _node_coeffs(problem, k)
            U = result.u[rep, :, k]
            if cfg.limit_mode:
                xa0 = np.zeros(n)
                xa1, ua = result.x0[rep, k], result.u0[rep, k]
            else:
                xa0 = X0c.mean(axis=0)
                xa1, ua = X1c.mean(axis=0), result.uN[rep, k]
            X0c = X0c + (X0c @ c["A"].T + xa0 @ c["Abar"].T) * dt \
                + dW[:, k] @ c["sigma"].T \
                + (X0c @ c["D"].T + xa0 @ c["Dbar"].T) * dW0[k] \
                + dWbar[:, k] @ c["sigbar"].T
            X1c = X1c + (X1c @ c["A"].T + U @ c["B"].T + xa1 @ c["Abar"].T
                         + ua @ c["Bbar"].T + c["b"]) * dt \
                + (X1c @ c["D"].T + U @ c["F"].T + xa1 @ c["Dbar"].T
                   + ua @ c["Fbar"].T + c["bbar"]) * dW0[k]
            err = np.max(np.abs(result.x[rep, :, k + 1] - X0c - X1c))
            worst = max(worst, float(err))
    return worst


def summary_text(result: PopulationResult) -> str:
    cfg = result.config
    gap = float(np.max(np.abs(result.xN - result.x0)))
    ugap = float(np.max(np.abs(result.uN - result.u0)))
    mean, se = _mean_se(result.cost_samples)
    lines = [
        f"replications: {cfg.M}  agents: {cfg.N}  nodes: {result.K + 1}",
        f"mode: {'limit' if cfg.limit_mode else 'population'}",
        f"sup |state avg - x0|: {gap:.6g}",
        f"sup |control avg - u0|: {ugap:.6g}",
        f"agent-0 cost: {mean:.10g} (se {se:.3g})",
    ]
    return "\n".join(lines)


def write_population_csv(result: PopulationResult, file) -> None:
    K = result.K
    cfg = result.config
    n = result.x.shape[3]
    m = result.u.shape[3]
    header = (["t", "replication", "agent"]
              + [f"x_{i}" for i in range(n)]
              + [f"u_{j}" for j in range(m)]
              + [f"xhat_{i}" for i in range(n)])
    own = isinstance(file, (str, bytes))
    handle = open(file, "w", newline="", encoding="utf-8") if own else file
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for rep in range(cfg.M):
            for a in range(cfg.N):
                for k in range(K + 1):
                    t = result.T * k / K
                    row = [f"{t:.15g}", rep, a]
                    row += [f"{v:.15g}" for v in result.x[rep, a, k]]
                    row += [f"{v:.15g}" for v in result.u[rep, a, k]]
                    row += [f"{v:.15g}" for v in result.xhat[rep, a, k]]
                    writer.writerow(row)
    finally:
        if own:
            handle.close()
