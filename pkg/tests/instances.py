"""Shared builders for randomized test instances."""

import json
import os

import numpy as np

from mfglq.model import load_problem
from mfglq.riccati import assemble_solution

HERE = os.path.dirname(__file__)
PORTFOLIO_CONFIG = os.path.join(HERE, "..", "configs", "portfolio.json")

PORTFOLIO_RATE = 2 * 0.06 - 0.09 ** 2 / 0.25 ** 2


def portfolio_problem(K=1000):
    with open(PORTFOLIO_CONFIG, encoding="utf-8") as fh:
        cfg = json.load(fh)
    cfg["grid"]["K"] = K
    return load_problem(cfg)


def portfolio_solution(K=1000):
    """Closed-form node samples assembled with the application gain."""
    prob = portfolio_problem(K)
    t = np.linspace(0.0, 1.0, K + 1)
    Pi = 0.6 * np.exp(PORTFOLIO_RATE * (1.0 - t))
    rho = -0.5 * np.exp(0.06 * (1.0 - t))
    Rsig = (0.25 ** 2 * Pi).reshape(K + 1, 1, 1)
    sol = assemble_solution(prob, Pi.reshape(K + 1, 1, 1),
                            np.zeros((K + 1, 1, 1)), rho.reshape(K + 1, 1),
                            Rsig_override=Rsig)
    return prob, sol


def portfolio_compensator(K=1000):
    from mfglq.compensator import CompensatorPath

    def P_fn(t):
        return 0.6 * np.exp(PORTFOLIO_RATE * (1.0 - t))

    def Pdot_fn(t):
        return -PORTFOLIO_RATE * P_fn(t)

    return CompensatorPath.from_callables(P_fn, Pdot_fn, T=1.0, K=K)


def sym(rng, n, scale=1.0):
    W = rng.normal(size=(n, n)) * scale
    return (W + W.T) / 2


def spd(rng, n, scale=1.0, shift=1.0):
    W = rng.normal(size=(n, n)) * scale
    return W @ W.T + shift * np.eye(n)


def random_problem(rng, n=1, m=1, d=1, K=8, T=1.0, pd_cost=False, scale=0.3,
                   meanfield=True, coupling=True, x0_scale=1.0):
    """Random constant-coefficient instance; pd_cost makes the weights definite.

    coupling=False zeroes the average-interaction matrices so the own-state
    and mean-field equations coincide.
    """
    def mat(rows, cols, s=scale):
        return (rng.normal(size=(rows, cols)) * s).tolist()

    def vec(rows, s=scale):
        return (rng.normal(size=rows) * s).tolist()

    def cmat(rows, cols):
        return mat(rows, cols, scale if coupling else 0.0)

    if pd_cost:
        R = spd(rng, m, scale=0.3, shift=1.0)
        S = rng.normal(size=(n, m)) * scale
        Q = S @ np.linalg.solve(R, S.T) + spd(rng, n, scale=0.3, shift=0.5)
        LT = spd(rng, n, scale=0.3, shift=0.5)
    else:
        R = sym(rng, m, scale)
        S = rng.normal(size=(n, m)) * scale
        Q = sym(rng, n, scale)
        LT = sym(rng, n, scale)

    if meanfield:
        a1, a2, a3, b1, b2 = rng.uniform(0.0, 1.0, size=5)
    else:
        a1 = a2 = a3 = b1 = b2 = 0.0

    cfg = {
        "dims": {"n": n, "m": m, "d": d},
        "grid": {"T": T, "K": K},
        "dynamics": {
            "A": mat(n, n), "Abar": cmat(n, n), "B": mat(n, m), "Bbar": cmat(n, m),
            "b": vec(n), "D": mat(n, n), "Dbar": cmat(n, n), "F": mat(n, m),
            "Fbar": cmat(n, m), "bbar": vec(n),
            "sigma": mat(n, d), "sigbar": mat(n, d),
        },
        "observation": {
            "G": mat(n, n), "H": mat(n, m), "btilde": vec(n),
            "sigtilde": np.eye(n, d).tolist(),
        },
        "common_observation": {"I": 0.0, "bcheck": 0.0, "sigcheck": 1.0},
        "cost": {
            "Q": Q.tolist(), "q": vec(n), "R": R.tolist(), "r": vec(m),
            "S": S.tolist(), "LT": LT.tolist(), "lT": vec(n),
        },
        "meanfield": {"alpha1": float(a1), "alpha2": float(a2), "alpha3": float(a3),
                      "beta1": float(b1), "beta2": float(b2)},
        "initial_state": (rng.normal(size=n) * x0_scale).tolist(),
    }
    return load_problem(cfg)
