"""Empirical probes of the near-equilibrium property of the feedback law.

The candidate strategy is exactly optimal only in the infinite-population
limit.  This module measures how far a finite population is from that
limit: how fast the empirical state average tracks the limit path, how
fast a single agent's cost approaches the limit cost, how much one agent
can gain by deviating while everyone else keeps the candidate, and how
convex the homogeneous part of the cost is along random open-loop
controls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ProblemSpec
from .riccati import RiccatiSolution
from .compensator import CompensatorPath
from .population import (
    PopulationConfig,
    _stream,
    simulate_limit,
    simulate_population,
)

__all__ = [
    "ConvergenceReport",
    "Policy",
    "PerturbationFamily",
    "EpsilonNashReport",
    "ConvexityReport",
    "meanfield_gap_sweep",
    "cost_gap_sweep",
    "epsilon_nash_probe",
    "convexity_probe",
]


@dataclass(frozen=True)
class ConvergenceReport:
    """Per-population-size gap estimates and a fitted log-log decay rate.

    slope and half_width are NaN when any gap estimate is non-positive
    (log undefined); half_width is two standard errors of the fitted
    slope.
    """

    Ns: tuple
    gaps: np.ndarray
    ses: np.ndarray
    samples: np.ndarray
    slope: float
    half_width: float
    residuals: np.ndarray
    label: str = ""

    def to_text(self) -> str:
        lines = [f"gap sweep: {self.label}" if self.label else "gap sweep"]
        lines.append(f"{'N':>8} {'gap':>13} {'se':>13}")
        for N, g, s in zip(self.Ns, self.gaps, self.ses):
            lines.append(f"{N:>8d} {g:>13.6e} {s:>13.6e}")
        if np.isnan(self.slope):
            lines.append("log-log slope undefined (non-positive gap)")
        else:
            lines.append(
                f"log-log slope {self.slope:+.4f} +- {self.half_width:.4f}"
                f" (max |fit residual| {np.max(np.abs(self.residuals)):.4f})")
        return "\n".join(lines)

    def write_csv(self, f) -> None:
        f.write("N,replication,gap\n")
        for i, N in enumerate(self.Ns):
            for rep in range(self.samples.shape[1]):
                f.write(f"{N},{rep},{self.samples[i, rep]:.15g}\n")


@dataclass(frozen=True)
class Policy:
    """One alternative strategy for the deviating agent.

    kind "scale" rescales the tracking gain by kappa and keeps the
    offset part of the candidate; "offset" adds a constant vector to the
    candidate control; "zero" plays no control; "openloop" follows an
    explicit node-indexed control path (stress tests only, not
    filter-adapted).
    """

    kind: str
    kappa: float = 1.0
    offset: np.ndarray | None = None
    path: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("scale", "offset", "zero", "openloop"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "offset" and self.offset is None:
            raise ValueError("offset policy needs an offset vector")
        if self.kind == "openloop" and self.path is None:
            raise ValueError("openloop policy needs a control path")

    @property
    def label(self) -> str:
        if self.kind == "scale":
            return f"gain x {self.kappa:g}"
        if self.kind == "offset":
            return f"offset {np.asarray(self.offset).ravel()}"
        return self.kind

    def deviator(self, sol: RiccatiSolution):
        """Bind the policy to a solved gain path; returns the node rule."""
        if self.kind == "scale":
            def rule(k, xhat, x0k, ucand):
                return (-self.kappa * (sol.K1[k] @ (xhat - x0k))
                        - (sol.K2[k] @ x0k + sol.k3[k]))
        elif self.kind == "offset":
            off = np.asarray(self.offset, dtype=float)

            def rule(k, xhat, x0k, ucand):
                return ucand + off
        elif self.kind == "zero":
            def rule(k, xhat, x0k, ucand):
                return np.zeros_like(ucand)
        else:
            path = np.asarray(self.path, dtype=float)

            def rule(k, xhat, x0k, ucand):
                return path[k]
        return rule


@dataclass(frozen=True)
class PerturbationFamily:
    policies: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.policies) == 0:
            raise ValueError("perturbation family must be nonempty")

    @classmethod
    def standard(cls, m: int, kappas=(0.0, 0.5, 0.9, 1.1, 1.5),
                 offsets=(0.5,)) -> "PerturbationFamily":
        """Gain rescalings, constant offsets along e_1, and zero control."""
        members = [Policy("scale", kappa=k) for k in kappas]
        for delta in offsets:
            vec = np.zeros(m)
            vec[0] = delta
            members.append(Policy("offset", offset=vec))
            members.append(Policy("offset", offset=-vec))
        members.append(Policy("zero"))
        return cls(policies=tuple(members))


@dataclass(frozen=True)
class EpsilonNashReport:
    """Best observed gain from a unilateral deviation, floored at zero."""

    N: int
    eps_hat: float
    improvements: np.ndarray
    ses: np.ndarray
    labels: tuple

    def to_text(self) -> str:
        lines = [f"epsilon-Nash probe, N = {self.N}"]
        for lab, imp, se in zip(self.labels, self.improvements, self.ses):
            lines.append(f"  {lab:<24} improvement {imp:+.6e} +- {se:.2e}")
        lines.append(f"  eps_hat = {self.eps_hat:.6e}")
        return "\n".join(lines)


@dataclass(frozen=True)
class ConvexityReport:
    """Smallest cost-to-energy ratio over sampled open-loop controls.

    C0 is the smallest constant making the shifted quadratic lower
    envelope hold on every perturbed-population sample in the run; it is
    an exhibit for the tested family, not a proof.
    """

    lambda_hat: float
    ratios: np.ndarray
    energies: np.ndarray
    perturbed_costs: np.ndarray
    C0: float
    N: int

    def envelope_margin(self) -> float:
        e = self.energies[:len(self.perturbed_costs)]
        lhs = (self.lambda_hat - self.C0 / self.N) * e - self.C0
        return float(np.min(self.perturbed_costs - lhs))


def _check_sweep(Ns) -> tuple:
    Ns = tuple(int(N) for N in Ns)
    if len(Ns) < 3:
        raise ValueError("need at least 3 population sizes for a slope fit")
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("population sizes must be strictly ascending")
    return Ns


def _fit_slope(Ns, gaps):
    if np.any(gaps <= 0.0) or not np.all(np.isfinite(gaps)):
        return float("nan"), float("nan"), np.zeros(len(Ns))
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log(gaps)
    design = np.column_stack([np.ones_like(x), x])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    dof = len(x) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    sxx = float(np.sum((x - x.mean()) ** 2))
    half = 2.0 * float(np.sqrt(s2 / sxx))
    return float(beta[1]), half, resid


def meanfield_gap_sweep(problem: ProblemSpec, sol: RiccatiSolution, Ns,
                        M: int, seed: int, *,
                        per_agent: bool = False) -> ConvergenceReport:
    """Decay of E[sup_t |average - limit|^2] as the population grows.

    per_agent instead tracks each agent against its own limit path built
    from the same noise, averaged over agents.
    """
    Ns = _check_sweep(Ns)
    samples = np.empty((len(Ns), M))
    for i, N in enumerate(Ns):
        cfg = PopulationConfig(N=N, M=M, seed=seed, store_observations=False)
        res = simulate_population(problem, sol, cfg)
        if per_agent:
            ref = simulate_limit(problem, sol, cfg)
            err = res.x - ref.x
            sup = np.max(np.einsum("rakn,rakn->rak", err, err), axis=2)
            samples[i] = sup.mean(axis=1)
        else:
            err = res.xN - res.x0
            samples[i] = np.max(np.einsum("rkn,rkn->rk", err, err), axis=1)
    gaps = samples.mean(axis=1)
    ses = samples.std(axis=1, ddof=1) / np.sqrt(M) if M > 1 else np.zeros(len(Ns))
    slope, half, resid = _fit_slope(Ns, gaps)
    label = "per-agent state gap" if per_agent else "state-average gap"
    return ConvergenceReport(Ns=Ns, gaps=gaps, ses=ses, samples=samples,
                             slope=slope, half_width=half, residuals=resid,
                             label=label)


def cost_gap_sweep(problem: ProblemSpec, sol: RiccatiSolution, Ns,
                   M: int, seed: int, *,
                   policy: Policy | None = None) -> ConvergenceReport:
    """Decay of |E[population cost - limit cost]| for agent 0.

    The two costs are evaluated on the same driving noise.  With a
    policy, agent 0 deviates in both systems, so the gap measures how
    well the limit evaluation of the deviation predicts its
    finite-population cost.
    """
    Ns = _check_sweep(Ns)
    deviator = policy.deviator(sol) if policy is not None else None
    samples = np.empty((len(Ns), M))
    for i, N in enumerate(Ns):
        cfg = PopulationConfig(N=N, M=M, seed=seed, store_observations=False)
        res_pop = simulate_population(problem, sol, cfg, deviator=deviator)
        res_lim = simulate_limit(problem, sol, cfg) if deviator is None else \
            simulate_population(problem, sol,
                                PopulationConfig(N=N, M=M, seed=seed,
                                                 limit_mode=True,
                                                 store_observations=False),
                                deviator=deviator)
        samples[i] = res_pop.cost_samples - res_lim.cost_samples
    means = samples.mean(axis=1)
    gaps = np.abs(means)
    ses = samples.std(axis=1, ddof=1) / np.sqrt(M) if M > 1 else np.zeros(len(Ns))
    slope, half, resid = _fit_slope(Ns, gaps)
    label = "cost gap" if policy is None else f"cost gap ({policy.label})"
    return ConvergenceReport(Ns=Ns, gaps=gaps, ses=ses, samples=samples,
                             slope=slope, half_width=half, residuals=resid,
                             label=label)


def epsilon_nash_probe(problem: ProblemSpec, sol: RiccatiSolution, N: int,
                       family: PerturbationFamily, M: int,
                       seed: int) -> EpsilonNashReport:
    """Best cost reduction agent 0 extracts by deviating among N agents.

    Baseline and deviation runs share the driving noise, so each
    improvement is a paired-sample mean.
    """
    cfg = PopulationConfig(N=N, M=M, seed=seed, store_observations=False)
    base = simulate_population(problem, sol, cfg).cost_samples
    improvements = np.empty(len(family.policies))
    ses = np.empty(len(family.policies))
    for j, pol in enumerate(family.policies):
        dev = simulate_population(problem, sol, cfg,
                                  deviator=pol.deviator(sol)).cost_samples
        diff = base - dev
        improvements[j] = diff.mean()
        ses[j] = diff.std(ddof=1) / np.sqrt(M) if M > 1 else 0.0
    eps_hat = max(0.0, float(improvements.max()))
    labels = tuple(pol.label for pol in family.policies)
    return EpsilonNashReport(N=N, eps_hat=eps_hat, improvements=improvements,
                             ses=ses, labels=labels)


def _homogeneous_cost(problem: ProblemSpec, u_path: np.ndarray, M: int,
                      seed: int, key: int) -> float:
    """Average cost of the zero-start single-agent system driven by the
    common noise alone, under a deterministic open-loop control."""
    grid = problem.grid
    K, dt = grid.K, grid.dt
    n = problem.n
    A, B = problem.A.values, problem.B.values
    D, F = problem.D.values, problem.F.values
    Q, R, S = problem.Q.values, problem.R.values, problem.S.values
    dW0 = _stream(seed, (key, 3)).standard_normal((M, K)) * np.sqrt(dt)

    X = np.zeros((M, K + 1, n))
    for k in range(K):
        drift = X[:, k] @ A[k].T + B[k] @ u_path[k]
        diff = X[:, k] @ D[k].T + F[k] @ u_path[k]
        X[:, k + 1] = X[:, k] + drift * dt + diff * dW0[:, [k]]

    w = np.full(K + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    quad = np.einsum("mki,kij,mkj->mk", X, Q, X)
    uu = np.einsum("ki,kij,kj->k", u_path, R, u_path)
    cross = 2.0 * np.einsum("kij,kj,mki->mk", S, u_path, X)
    running = (quad + uu[None, :] + cross) @ w
    terminal = np.einsum("mi,ij,mj->m", X[:, K], problem.LT, X[:, K])
    return 0.5 * float((running + terminal).mean())


def convexity_probe(problem: ProblemSpec, sol: RiccatiSolution,
                    n_policies: int, M: int, seed: int, *,
                    comp: CompensatorPath | None = None,
                    N: int = 32, envelope_policies: int = 8) -> ConvexityReport:
    """Estimate the uniform-convexity constant of the homogeneous cost.

    Samples nonzero open-loop controls, estimates cost / control energy
    for each, and takes the minimum.  The first envelope_policies samples
    are then replayed as a deviation by one agent among N to exhibit the
    shifted quadratic lower envelope on the population cost (relative to
    the compensator value at time zero when a compensator is given).
    """
    grid = problem.grid
    K, m = grid.K, problem.m
    rng = _stream(seed, (0, 9))
    w = np.full(K + 1, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt

    n_env = min(envelope_policies, n_policies)
    ratios = np.empty(n_policies)
    energies = np.empty(n_policies)
    perturbed = np.empty(n_env)
    shift = 0.0
    if comp is not None:
        P0 = comp.at(0.0)[0]
        shift = 0.5 * float(problem.x @ P0 @ problem.x)
    cfg = PopulationConfig(N=N, M=M, seed=seed + 1, store_observations=False)
    for j in range(n_policies):
        u_path = rng.standard_normal((K + 1, m))
        while not np.any(u_path):
            u_path = rng.standard_normal((K + 1, m))
        energies[j] = float(np.einsum("ki,ki->k", u_path, u_path) @ w)
        cost0 = _homogeneous_cost(problem, u_path, M, seed, 10 + j)
        ratios[j] = cost0 / energies[j]
        if j < n_env:
            pol = Policy("openloop", path=u_path)
            res = simulate_population(problem, sol, cfg,
                                      deviator=pol.deviator(sol))
            perturbed[j] = res.cost_samples.mean() - shift

    lambda_hat = float(ratios.min())
    need = (lambda_hat * energies[:n_env] - perturbed) \
        / (1.0 + energies[:n_env] / N)
    C0 = max(0.0, float(need.max())) if n_env else 0.0
    return ConvexityReport(lambda_hat=lambda_hat, ratios=ratios,
                           energies=energies, perturbed_costs=perturbed,
                           C0=C0, N=N)
