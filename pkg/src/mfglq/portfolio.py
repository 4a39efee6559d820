"""Mean-variance cash-balance application.

A company's cash balance earns the risk-free rate, the investor moves an
amount into a risky stock with excess return B = mu - r and volatility
sigma (driven by the common noise), and liabilities add idiosyncratic
noise.  Each agent trades terminal wealth against the variance of its
distance to the population average.  The control weight in the cost is
zero, so the problem is indefinite; the backward gain equations still
decouple in closed form and this module carries that solution, its
compensator certificate, the feedback strategy, and the figure data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .compensator import CompensatorPath, RcReport, check_condition_rc
from .model import GridSpec, ProblemSpec, load_problem
from .population import PopulationConfig, simulate_population
from .riccati import RiccatiSolution, assemble_solution

__all__ = [
    "PortfolioParams",
    "ClosedForm",
    "closed_form",
    "to_problem",
    "compensator_certificate",
    "limit_solution",
    "portfolio_strategy",
    "reproduce_figures",
]


@dataclass(frozen=True)
class PortfolioParams:
    """Scalar market and observation data; defaults are the worked example."""

    r: float = 0.06
    mu: float = 0.15
    b: float = 0.06
    sigma: float = 0.25
    c: float = 0.5
    cbar: float = 0.0
    G: float = 1.0
    btilde: float = 0.0
    sigtilde: float = 1.0
    I: float = 0.0
    bcheck: float = 0.0
    sigcheck: float = 1.0
    gamma: float = 0.6
    x0: float = 2.0
    T: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("risk weight gamma must be positive")
        if not self.sigma > 0:
            raise ValueError("stock volatility sigma must be positive")
        if self.sigtilde == 0:
            raise ValueError("observation noise sigtilde must be nonzero")
        if self.sigcheck == 0:
            raise ValueError("public signal noise sigcheck must be nonzero")

    @property
    def B(self) -> float:
        return self.mu - self.r


@dataclass(frozen=True)
class ClosedForm:
    """Node values of the backward gain system on a uniform grid."""

    Pi: np.ndarray
    Sigma: np.ndarray
    rho: np.ndarray
    T: float

    def __post_init__(self):
        if not np.all(self.Pi > 0.0):
            raise ValueError("closed form requires Pi > 0 on the whole grid")
        if np.any(self.Sigma != 0.0):
            raise ValueError("closed form requires Sigma identically zero")
        if not np.all(self.rho < 0.0):
            raise ValueError("closed form requires rho < 0 on the whole grid")

    @property
    def K(self) -> int:
        return len(self.Pi) - 1


def _rate(params: PortfolioParams) -> float:
    return 2.0 * params.r - params.B ** 2 / params.sigma ** 2


def closed_form(params: PortfolioParams, grid: GridSpec) -> ClosedForm:
    """Exact node values Pi = gamma*e^{(2r - B^2/sigma^2)(T-t)},
    Sigma = 0, rho = -e^{r(T-t)}/2 for constant coefficients."""
    if abs(grid.T - params.T) > 1e-12 * max(1.0, params.T):
        raise ValueError("grid horizon does not match params.T")
    back = params.T - grid.times()
    Pi = params.gamma * np.exp(_rate(params) * back)
    rho = -0.5 * np.exp(params.r * back)
    return ClosedForm(Pi=Pi, Sigma=np.zeros(grid.K + 1), rho=rho, T=params.T)


def to_problem(params: PortfolioParams, K: int) -> ProblemSpec:
    """Instantiate the general model: cash balance as the state, invested
    amount as the control, terminal weights (gamma, -1/2)."""
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": params.T, "K": K},
        "dynamics": {
            "A": params.r, "B": params.B, "b": -params.b,
            "F": params.sigma, "sigma": params.c, "sigbar": params.cbar,
        },
        "observation": {"G": params.G, "btilde": params.btilde,
                        "sigtilde": params.sigtilde},
        "common_observation": {"I": params.I, "bcheck": params.bcheck,
                               "sigcheck": params.sigcheck},
        "cost": {"LT": params.gamma, "lT": -0.5},
        "meanfield": {"alpha1": 1.0, "alpha2": 1.0, "alpha3": 1.0,
                      "beta1": 0.0, "beta2": 0.0},
        "initial_state": params.x0,
    }
    return load_problem(cfg)


def compensator_certificate(params: PortfolioParams,
                            grid: GridSpec) -> RcReport:
    """Certify Pi as a relaxed compensator for the application instance.

    Runs the general node-by-node inequality check, then attaches the
    application-form residual Pdot + 2rP + (B^2/sigma^2)P, which equals
    2(B^2/sigma^2)P for the closed-form path.
    """
    rate = _rate(params)

    def P_fn(t):
        return np.array([[params.gamma * np.exp(rate * (params.T - t))]])

    def Pdot_fn(t):
        return -rate * P_fn(t)

    comp = CompensatorPath.from_callables(P_fn, Pdot_fn, grid.T, grid.K)
    problem = to_problem(params, grid.K)
    report = check_condition_rc(problem, comp)
    ratio = params.B ** 2 / params.sigma ** 2
    app = (comp.Pdot[:, 0, 0] + (2.0 * params.r + ratio) * comp.P[:, 0, 0])
    return replace(report, app_residual=app)


def limit_solution(params: PortfolioParams, K: int,
                   problem: ProblemSpec | None = None) -> RiccatiSolution:
    """Assemble feedback gains from the closed form.

    The generic backward solver cannot produce Sigma here (the running
    control weight is zero, so its gain matrix is singular); the
    application equations put sigma^2*Pi in the denominators instead,
    which enters as a per-node gain override.
    """
    if problem is None:
        problem = to_problem(params, K)
    closed = closed_form(params, problem.grid)
    Pi = closed.Pi.reshape(-1, 1, 1)
    Sigma = closed.Sigma.reshape(-1, 1, 1)
    rho = closed.rho.reshape(-1, 1)
    Rsig = params.sigma ** 2 * Pi
    return assemble_solution(problem, Pi, Sigma, rho, Rsig_override=Rsig)


def _closed_at(closed: ClosedForm, t: float) -> tuple[float, float]:
    K = closed.K
    pos = np.clip(t / closed.T, 0.0, 1.0) * K
    k = min(int(pos), K - 1)
    w = pos - k
    Pi = (1.0 - w) * closed.Pi[k] + w * closed.Pi[k + 1]
    rho = (1.0 - w) * closed.rho[k] + w * closed.rho[k + 1]
    return float(Pi), float(rho)


def portfolio_strategy(params: PortfolioParams, closed: ClosedForm,
                       t: float, xhat: float, x0: float) -> float:
    """Invested amount u = -B(xhat - x0)/sigma^2 - B*rho/(sigma^2*Pi)."""
    Pi, rho = _closed_at(closed, t)
    if Pi <= 0.0:
        raise ValueError(f"closed form invalid: Pi({t}) = {Pi:g} <= 0")
    s2 = params.sigma ** 2
    return -params.B * (xhat - x0) / s2 - params.B * rho / (s2 * Pi)


def reproduce_figures(params: PortfolioParams, N: int, seed: int,
                      out_dir: str, K: int = 1000) -> tuple[str, str]:
    """Simulate N agents under the closed-form feedback and write the
    state and control trajectory files; returns the two paths."""
    if N < 2:
        raise ValueError("need at least 2 agents for a population average")
    problem = to_problem(params, K)
    sol = limit_solution(params, K, problem)
    cfg = PopulationConfig(N=N, M=1, seed=seed, store_observations=False)
    res = simulate_population(problem, sol, cfg)
    t = problem.grid.times()

    state_path = os.path.join(out_dir, "figure_state.csv")
    control_path = os.path.join(out_dir, "figure_control.csv")
    with open(state_path, "w", newline="\n") as f:
        f.write("t,state_avg,state_limit\n")
        for k in range(K + 1):
            f.write(f"{t[k]:.15g},{res.xN[0, k, 0]:.15g},"
                    f"{res.x0[0, k, 0]:.15g}\n")
    with open(control_path, "w", newline="\n") as f:
        f.write("t,control_avg,control_limit\n")
        for k in range(K + 1):
            f.write(f"{t[k]:.15g},{res.uN[0, k, 0]:.15g},"
                    f"{res.u0[0, k, 0]:.15g}\n")

    xgap = res.xN[0, :, 0] - res.x0[0, :, 0]
    ugap = res.uN[0, :, 0] - res.u0[0, :, 0]
    print(f"sup |state avg - limit|   = {np.max(np.abs(xgap)):.6g}")
    print(f"rms |state avg - limit|   = {np.sqrt(np.mean(xgap ** 2)):.6g}")
    print(f"sup |control avg - limit| = {np.max(np.abs(ugap)):.6g}")
    print(f"rms |control avg - limit| = {np.sqrt(np.mean(ugap ** 2)):.6g}")
    return state_path, control_path
