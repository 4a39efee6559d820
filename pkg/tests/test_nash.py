import io

import numpy as np
import pytest

from mfglq.model import load_problem, serialize
from mfglq.nash import (
    PerturbationFamily,
    Policy,
    convexity_probe,
    cost_gap_sweep,
    epsilon_nash_probe,
    meanfield_gap_sweep,
)
from mfglq.population import PopulationConfig, simulate_population
from mfglq.riccati import build_solution

from instances import portfolio_solution, random_problem


def coupled_scalar_problem(K=60, **overrides):
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": K},
        "dynamics": {"A": 0.2, "Abar": 0.1, "B": 0.3, "Bbar": 0.05,
                     "D": 0.1, "F": 0.2, "b": 0.04, "bbar": 0.02},
        "observation": {"G": 1.0, "sigtilde": 1.0},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"Q": 1.0, "R": 1.0, "LT": 0.5, "r": 0.1},
        "meanfield": {"alpha1": 0.6, "alpha2": 0.4, "alpha3": 0.5,
                      "beta1": 0.2, "beta2": 0.1},
        "initial_state": 1.0,
    }
    cfg.update(overrides)
    return load_problem(cfg)


def test_policy_validation():
    with pytest.raises(ValueError, match="unknown policy kind"):
        Policy("bogus")
    with pytest.raises(ValueError, match="offset"):
        Policy("offset")
    with pytest.raises(ValueError, match="openloop"):
        Policy("openloop")
    with pytest.raises(ValueError, match="nonempty"):
        PerturbationFamily(policies=())


def test_standard_family_contents():
    fam = PerturbationFamily.standard(2)
    labels = [p.label for p in fam.policies]
    assert "gain x 0" in labels
    assert "gain x 1.5" in labels
    assert "zero" in labels
    assert sum(1 for p in fam.policies if p.kind == "offset") == 2
    assert len(fam.policies) == 8


def test_sweep_argument_validation():
    prob, sol = portfolio_solution(K=50)
    with pytest.raises(ValueError, match="at least 3"):
        meanfield_gap_sweep(prob, sol, (10, 20), M=2, seed=0)
    with pytest.raises(ValueError, match="ascending"):
        meanfield_gap_sweep(prob, sol, (10, 40, 20), M=2, seed=0)


def test_meanfield_gap_zero_idiosyncratic_noise():
    # with no private noise every agent equals the limit path, so the
    # average-vs-limit gap is float residue only and the fit degenerates
    prob = coupled_scalar_problem(
        K=60, dynamics={"A": 0.2, "Abar": 0.1, "B": 0.3, "D": 0.1,
                        "F": 0.2, "b": 0.04, "bbar": 0.02})
    sol = build_solution(prob)
    rep = meanfield_gap_sweep(prob, sol, (4, 8, 16), M=3, seed=0)
    assert rep.gaps.max() < 1e-20
    assert np.isnan(rep.slope)
    assert "undefined" in rep.to_text()


def test_meanfield_gap_portfolio_slope_window():
    prob, sol = portfolio_solution(K=200)
    rep = meanfield_gap_sweep(prob, sol, (50, 200, 800, 3200), M=20, seed=0)
    assert -1.3 <= rep.slope <= -0.7
    assert np.all(np.diff(rep.gaps) < 0)


def test_per_agent_gap_slope_window_on_coupled_instance():
    rng = np.random.default_rng(8)
    prob = random_problem(rng, n=1, m=1, d=1, K=100, pd_cost=True, scale=0.3)
    sol = build_solution(prob)
    rep = meanfield_gap_sweep(prob, sol, (50, 200, 800), M=20, seed=3,
                              per_agent=True)
    assert -1.3 <= rep.slope <= -0.7


def test_per_agent_gap_degenerate_without_dynamic_coupling():
    # portfolio dynamics ignore the averages, so each agent's population
    # path already equals its limit path
    prob, sol = portfolio_solution(K=100)
    rep = meanfield_gap_sweep(prob, sol, (4, 8, 16), M=2, seed=1,
                              per_agent=True)
    assert rep.gaps.max() == 0.0


def test_cost_gap_zero_cost_instance():
    prob, sol = portfolio_solution(K=60)
    cfg = serialize(prob)
    cfg["cost"] = {}
    zero_prob = load_problem(cfg)
    rep = cost_gap_sweep(zero_prob, sol, (4, 8, 16), M=3, seed=0)
    assert np.all(rep.gaps == 0.0)
    assert np.isnan(rep.slope)


def test_cost_gap_portfolio_slope_window():
    prob, sol = portfolio_solution(K=200)
    rep = cost_gap_sweep(prob, sol, (50, 200, 800, 3200), M=20, seed=0)
    assert -0.75 <= rep.slope <= -0.30


def test_cost_gap_deviating_policy_decays():
    prob, sol = portfolio_solution(K=200)
    rep = cost_gap_sweep(prob, sol, (25, 100, 400), M=40, seed=2,
                         policy=Policy("zero"))
    assert rep.gaps[-1] < rep.gaps[0] / 3.0
    assert "zero" in rep.label


def test_epsilon_nash_self_policy_improves_nothing():
    prob, sol = portfolio_solution(K=100)
    fam = PerturbationFamily(policies=(Policy("scale", kappa=1.0),))
    rep = epsilon_nash_probe(prob, sol, N=8, family=fam, M=4, seed=3)
    assert rep.eps_hat == 0.0
    assert rep.improvements[0] == 0.0


def test_epsilon_nash_portfolio_probe():
    prob, sol = portfolio_solution(K=200)
    fam = PerturbationFamily.standard(1)
    reports = [epsilon_nash_probe(prob, sol, N, fam, M=24, seed=12)
               for N in (50, 200)]
    for rep in reports:
        assert rep.eps_hat >= 0.0
        zero_idx = rep.labels.index("zero")
        assert rep.improvements[zero_idx] <= 3.0 * rep.ses[zero_idx]
        assert "eps_hat" in rep.to_text()
    slack = 3.0 * max(reports[0].ses.max(), reports[1].ses.max())
    assert reports[1].eps_hat <= reports[0].eps_hat + slack


def test_crn_pairing_reduces_variance():
    prob, sol = portfolio_solution(K=100)
    cfg = PopulationConfig(N=20, M=40, seed=5, store_observations=False)
    dev = Policy("zero").deviator(sol)
    base = simulate_population(prob, sol, cfg).cost_samples
    paired = simulate_population(prob, sol, cfg, deviator=dev).cost_samples
    other = simulate_population(
        prob, sol, PopulationConfig(N=20, M=40, seed=1005,
                                    store_observations=False),
        deviator=dev).cost_samples
    assert np.var(base - paired) < np.var(base - other)


def test_openloop_zero_path_matches_zero_policy():
    prob, sol = portfolio_solution(K=60)
    cfg = PopulationConfig(N=6, M=3, seed=9, store_observations=False)
    a = simulate_population(prob, sol, cfg,
                            deviator=Policy("zero").deviator(sol))
    path = np.zeros((prob.grid.K + 1, prob.m))
    b = simulate_population(prob, sol, cfg,
                            deviator=Policy("openloop", path=path).deviator(sol))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.cost_samples, b.cost_samples)


def test_convexity_pd_identity_lower_bound():
    # with S = 0 and PSD state weights every sample cost is at least half
    # the control energy, so the bound holds without MC slack
    prob = coupled_scalar_problem(
        K=80, cost={"Q": 1.0, "R": 1.0, "LT": 0.5},
        meanfield={"alpha1": 0.5, "alpha2": 0.0, "alpha3": 0.5,
                   "beta1": 0.0, "beta2": 0.0})
    sol = build_solution(prob)
    rep = convexity_probe(prob, sol, 30, M=16, seed=1, N=8,
                          envelope_policies=3)
    assert rep.lambda_hat >= 0.5 - 1e-12
    assert np.all(rep.energies > 0.0)


def test_convexity_portfolio_positive():
    prob, sol = portfolio_solution(K=200)
    rep = convexity_probe(prob, sol, 40, M=48, seed=0, N=32,
                          envelope_policies=4)
    assert rep.lambda_hat > 0.0
    assert rep.envelope_margin() >= -1e-12
    assert np.isfinite(rep.C0)


def test_report_text_and_csv():
    prob, sol = portfolio_solution(K=100)
    rep = meanfield_gap_sweep(prob, sol, (4, 8, 16), M=3, seed=2)
    text = rep.to_text()
    assert "log-log slope" in text or "undefined" in text
    buf = io.StringIO()
    rep.write_csv(buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "N,replication,gap"
    assert len(lines) == 1 + 3 * 3
