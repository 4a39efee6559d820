"""Conditionally Gaussian filtering of the own state from observations.

The common noise is observable through the common observation process, so
the conditional law of an agent's state given its augmented observation is
Gaussian with mean xhat and covariance Pf.  The covariance is pathwise when
the state multiplies the common noise; otherwise it is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ProblemSpec

PSD_CLIP = -1e-12
GAIN_FLOOR = 1e-12


class DegeneracyError(ValueError):
    """An observation channel has no usable noise."""


@dataclass(frozen=True)
class FilterState:
    xhat: np.ndarray
    Pf: np.ndarray


@dataclass(frozen=True)
class ObservationIncrement:
    dY: np.ndarray
    dtheta: float
    dt: float


def recover_dW0(dtheta: float, theta: float, t: float, problem: ProblemSpec) -> float:
    """Common-noise increment implied by the common observation over one grid step."""
    sc = float(problem.sigcheck.at(t))
    if abs(sc) < problem.sigcheck_floor:
        raise DegeneracyError(f"common observation degenerate at t={t:.6g}")
    drift = float(problem.I.at(t)) * theta + float(problem.bcheck.at(t))
    return (dtheta - drift * problem.grid.dt) / sc


def kalman_gain(Pf: np.ndarray, G: np.ndarray, sigbar: np.ndarray,
                sigtilde: np.ndarray) -> np.ndarray:
    obs_cov = sigtilde @ sigtilde.T
    if np.linalg.eigvalsh((obs_cov + obs_cov.T) / 2)[0] < GAIN_FLOOR:
        raise DegeneracyError("observation noise covariance is singular")
    return np.linalg.solve(obs_cov, (Pf @ G.T + sigbar @ sigtilde.T).T).T


def psd_project(Pf: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues; applied only on violation beyond tolerance."""
    Pf = (Pf + Pf.T) / 2
    vals, vecs = np.linalg.eigh(Pf)
    if vals[0] >= PSD_CLIP:
        return Pf
    vals = np.clip(vals, 0.0, None)
    return (vecs * vals) @ vecs.T


def filter_step(state: FilterState, inc: ObservationIncrement, u, x0, u0,
                t: float, problem: ProblemSpec, theta: float = 0.0) -> FilterState:
    """One explicit step of the correlated-noise conditional filter."""
    u = np.asarray(u, dtype=float).reshape(problem.m)
    x0 = np.asarray(x0, dtype=float).reshape(problem.n)
    u0 = np.asarray(u0, dtype=float).reshape(problem.m)
    dt = inc.dt
    dY = np.asarray(inc.dY, dtype=float).reshape(problem.n)

    A = problem.A.at(t)
    B = problem.B.at(t)
    Abar = problem.Abar.at(t)
    Bbar = problem.Bbar.at(t)
    b = problem.b.at(t)
    D = problem.D.at(t)
    F = problem.F.at(t)
    Dbar = problem.Dbar.at(t)
    Fbar = problem.Fbar.at(t)
    bbar = problem.bbar.at(t)
    sig = problem.sigma.at(t)
    sigbar = problem.sigbar.at(t)
    G = problem.G.at(t)
    H = problem.H.at(t)
    Gbar = problem.Gbar.at(t)
    Hbar = problem.Hbar.at(t)
    btilde = problem.btilde.at(t)
    sigtilde = problem.sigtilde.at(t)

    sc = float(problem.sigcheck.at(t))
    if abs(sc) < problem.sigcheck_floor:
        raise DegeneracyError(f"common observation degenerate at t={t:.6g}")
    drift0 = float(problem.I.at(t)) * theta + float(problem.bcheck.at(t))
    dW0 = (inc.dtheta - drift0 * dt) / sc

    xhat = state.xhat
    Pf = state.Pf
    Kg = kalman_gain(Pf, G, sigbar, sigtilde)
    dnu = dY - (G @ xhat + H @ u + Gbar @ x0 + Hbar @ u0 + btilde) * dt
    xhat_new = (xhat
                + (A @ xhat + B @ u + Abar @ x0 + Bbar @ u0 + b) * dt
                + (D @ xhat + F @ u + Dbar @ x0 + Fbar @ u0 + bbar) * dW0
                + Kg @ dnu)
    obs_cov = sigtilde @ sigtilde.T
    Pf_new = (Pf
              + (A @ Pf + Pf @ A.T + D @ Pf @ D.T + sig @ sig.T
                 + sigbar @ sigbar.T - Kg @ obs_cov @ Kg.T) * dt
              + (D @ Pf + Pf @ D.T) * dW0)
    return FilterState(xhat=xhat_new, Pf=psd_project(Pf_new))


@dataclass(frozen=True)
class ProbeReport:
    max_error: float
    errors: np.ndarray
    se: np.ndarray
    ess: float


def filter_consistency_probe(problem: ProblemSpec, n_particles: int, seed,
                             u_path: Optional[np.ndarray] = None,
                             x0_path: Optional[np.ndarray] = None,
                             u0_path: Optional[np.ndarray] = None,
                             full: bool = False):
    """Compare the filter mean against a weighted particle estimate.

    One truth path is simulated; particles share its common noise and are
    driven by the observation-implied increments of the correlated channel,
    weighted by the observation likelihood.  Returns the max deviation over
    nodes, or a full report when requested.
    """
    n, m, d = problem.n, problem.m, problem.d
    grid = problem.grid
    K = grid.K
    dt = grid.dt
    sqdt = np.sqrt(dt)
    if u_path is None:
        u_path = np.zeros((K, m))
    if x0_path is None:
        x0_path = np.zeros((K + 1, n))
    if u0_path is None:
        u0_path = np.zeros((K + 1, m))

    st0 = problem.sigtilde.values[0]
    if st0.shape[0] != st0.shape[1]:
        raise ValueError("probe needs a square invertible observation noise matrix")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = problem.x.copy()
    theta = 0.0
    P = int(n_particles)
    Xp = np.tile(problem.x, (P, 1))
    logw = np.zeros(P)
    state = FilterState(xhat=problem.x.copy(), Pf=np.zeros((n, n)))

    errors = np.zeros(K + 1)
    se = np.zeros(K + 1)

    for k in range(K):
        t = k * dt
        A = problem.A.values[k]
        B = problem.B.values[k]
        Abar = problem.Abar.values[k]
        Bbar = problem.Bbar.values[k]
        b = problem.b.values[k]
        D = problem.D.values[k]
        F = problem.F.values[k]
        Dbar = problem.Dbar.values[k]
        Fbar = problem.Fbar.values[k]
        bbar = problem.bbar.values[k]
        sig = problem.sigma.values[k]
        sigbar = problem.sigbar.values[k]
        G = problem.G.values[k]
        H = problem.H.values[k]
        Gbar = problem.Gbar.values[k]
        Hbar = problem.Hbar.values[k]
        btilde = problem.btilde.values[k]
        sigtilde = problem.sigtilde.values[k]
        obs_cov = sigtilde @ sigtilde.T
        u = u_path[k]
        x0 = x0_path[k]
        u0 = u0_path[k]

        dW0 = rng.normal() * sqdt
        dW = rng.normal(size=d) * sqdt
        dWbar = rng.normal(size=d) * sqdt

        obs_drift_truth = G @ x + H @ u + Gbar @ x0 + Hbar @ u0 + btilde
        dY = obs_drift_truth * dt + sigtilde @ dWbar
        theta_old = theta
        dtheta = ((float(problem.I.values[k]) * theta
                   + float(problem.bcheck.values[k])) * dt
                  + float(problem.sigcheck.values[k]) * dW0)
        x = (x + (A @ x + B @ u + Abar @ x0 + Bbar @ u0 + b) * dt
             + sig @ dW + (D @ x + F @ u + Dbar @ x0 + Fbar @ u0 + bbar) * dW0
             + sigbar @ dWbar)
        theta += dtheta

        # particle update: implied correlated increments, likelihood weights
        obs_drift_p = Xp @ G.T + H @ u + Gbar @ x0 + Hbar @ u0 + btilde
        resid = dY - obs_drift_p * dt
        logw -= 0.5 * np.einsum("pi,pi->p", resid,
                                np.linalg.solve(obs_cov, resid.T).T) / dt
        dWbar_p = np.linalg.solve(sigtilde, resid.T).T
        dWp = rng.normal(size=(P, d)) * sqdt
        Xp = (Xp + (Xp @ A.T + B @ u + Abar @ x0 + Bbar @ u0 + b) * dt
              + dWp @ sig.T
              + (Xp @ D.T + F @ u + Dbar @ x0 + Fbar @ u0 + bbar) * dW0
              + dWbar_p @ sigbar.T)

        inc = ObservationIncrement(dY=dY, dtheta=dtheta, dt=dt)
        state = filter_step(state, inc, u, x0, u0, t, problem, theta=theta_old)

        w = np.exp(logw - np.max(logw))
        w /= np.sum(w)
        est = w @ Xp
        dev = np.abs(state.xhat - est)
        errors[k + 1] = float(np.max(dev))
        var = w @ (Xp - est) ** 2
        se[k + 1] = float(np.sqrt(np.max(var * np.sum(w ** 2))))

    w = np.exp(logw - np.max(logw))
    w /= np.sum(w)
    ess = float(1.0 / np.sum(w ** 2))
    if full:
        return ProbeReport(max_error=float(np.max(errors)), errors=errors,
                           se=se, ess=ess)
    return float(np.max(errors))
