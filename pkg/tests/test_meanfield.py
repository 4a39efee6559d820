import io
import json

import numpy as np
import pytest

from mfglq.meanfield import (
    FeedbackLaw,
    control_u0,
    decentralized_control,
    feedback_gains,
    simulate_x0,
    stationarity_residual,
    write_limit_csv,
)
from mfglq.model import load_problem, serialize
from mfglq.riccati import DivergenceError, SolverOptions, build_solution

from instances import portfolio_solution, random_problem


def zero_cost_problem(r_vec, m=2, n=2, K=50):
    cfg = {
        "dims": {"n": n, "m": m, "d": 1},
        "grid": {"T": 1.0, "K": K},
        "dynamics": {"A": (0.2 * np.eye(n)).tolist(), "B": np.eye(n, m).tolist(),
                     "D": (0.1 * np.eye(n)).tolist()},
        "observation": {"sigtilde": np.eye(n, 1).tolist()},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"R": np.eye(m).tolist(), "r": list(r_vec)},
        "initial_state": [0.5] * n,
    }
    return load_problem(cfg)


def test_feedback_gains_portfolio():
    _, sol = portfolio_solution(K=1000)
    for t in (0.0, 0.37, 1.0):
        law = feedback_gains(sol, t)
        assert abs(law.K1[0, 0] - 1.44) < 1e-12
        assert abs(law.K2[0, 0]) < 1e-15


def test_feedback_gains_zero_cost():
    prob = zero_cost_problem([0.3, -0.2])
    sol = build_solution(prob)
    law = feedback_gains(sol, 0.5)
    np.testing.assert_allclose(law.K1, 0.0, atol=1e-12)
    np.testing.assert_allclose(law.K2, 0.0, atol=1e-12)
    np.testing.assert_allclose(law.k3, [0.3, -0.2], atol=1e-12)


def test_feedback_reduces_to_classical_lqg_without_coupling():
    rng = np.random.default_rng(31)
    prob = random_problem(rng, n=2, m=2, d=1, K=60, pd_cost=True,
                          meanfield=False, coupling=False)
    # classical reduction also needs no common-noise intercept
    cfg = serialize(prob)
    cfg["dynamics"]["bbar"] = [0.0, 0.0]
    prob = load_problem(cfg)
    sol = build_solution(prob)
    for k in (0, 30, 60):
        np.testing.assert_allclose(sol.K2[k], sol.K1[k], atol=1e-8)
        ref = np.linalg.solve(sol.Rpi[k],
                              prob.B.values[k].T @ sol.rho[k] + prob.r.values[k])
        np.testing.assert_allclose(sol.k3[k], ref, atol=1e-8)


def test_control_u0_portfolio():
    _, sol = portfolio_solution(K=1000)
    assert abs(control_u0(sol, 1.0, [5.0])[0] - 1.2) < 1e-9
    assert abs(control_u0(sol, 0.0, [2.0])[0] - 1.286495) < 1e-4


def test_control_u0_zero_offset():
    prob = zero_cost_problem([0.0, 0.0])
    sol = build_solution(prob)
    np.testing.assert_allclose(control_u0(sol, 0.3, [1.0, -2.0]), 0.0, atol=1e-12)


def test_decentralized_control_portfolio():
    _, sol = portfolio_solution(K=1000)
    u = decentralized_control(sol, 0.0, [2.0], [2.0])
    assert abs(u[0] - 1.286495) < 1e-4
    u = decentralized_control(sol, 1.0, [3.0], [2.0])
    assert abs(u[0] - (-0.24)) < 1e-9


def test_decentralized_control_zero_gains():
    prob = zero_cost_problem([0.0, 0.0])
    sol = build_solution(prob)
    u = decentralized_control(sol, 0.5, [1.0, 1.0], [0.0, 0.0])
    np.testing.assert_allclose(u, 0.0, atol=1e-12)


def test_feedback_law_shape_check():
    with pytest.raises(ValueError):
        FeedbackLaw(K1=np.zeros((2, 3)), K2=np.zeros((2, 2)), k3=np.zeros(2))


def scalar_drift_problem(K):
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": K},
        "dynamics": {"A": 0.1, "B": 0.2, "b": 0.05},
        "observation": {"sigtilde": 1.0},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"R": 1.0, "r": 0.3},
        "initial_state": 1.0,
    }
    return load_problem(cfg)


def test_simulate_x0_zero_diffusion_matches_ode():
    K = 10000
    prob = scalar_drift_problem(K)
    sol = build_solution(prob)
    rng = np.random.default_rng(4)
    paths = simulate_x0(prob, sol, rng.normal(size=K) * np.sqrt(1.0 / K))
    # k3 = r, so x' = 0.1 x - 0.01 with x(0) = 1
    t = np.linspace(0.0, 1.0, K + 1)
    a, c = 0.1, 0.2 * (-0.3) + 0.05
    ref = np.exp(a * t) * 1.0 + (c / a) * (np.exp(a * t) - 1.0)
    assert paths.x0[0, 0] == 1.0
    assert np.max(np.abs(paths.x0[:, 0] - ref)) < 1e-6


def test_simulate_x0_identically_zero():
    prob = zero_cost_problem([0.0, 0.0], K=40)
    cfg = serialize(prob)
    cfg["initial_state"] = [0.0, 0.0]
    prob = load_problem(cfg)
    sol = build_solution(prob)
    rng = np.random.default_rng(9)
    paths = simulate_x0(prob, sol, rng.normal(size=40))
    assert np.array_equal(paths.x0, np.zeros((41, 2)))
    assert np.array_equal(paths.u0, np.zeros((41, 2)))


def test_simulate_x0_portfolio_zero_common_noise():
    K = 1000
    prob, sol = portfolio_solution(K=K)
    paths = simulate_x0(prob, sol, np.zeros(K))
    # x' = 0.06 x + 0.09 u0(t) - 0.06 with u0(t) = 1.2 exp(0.0696 (1-t))
    t = np.linspace(0.0, 1.0, K + 1)
    a, lam = 0.06, 0.0696
    c1 = 0.09 * 1.2 * np.exp(lam)
    ref = (np.exp(a * t) * 2.0
           + c1 * (np.exp(a * t) - np.exp(-lam * t)) / (a + lam)
           - 0.06 * (np.exp(a * t) - 1.0) / a)
    assert np.max(np.abs(paths.x0[:, 0] - ref)) < 1e-5
    np.testing.assert_allclose(paths.u0[:, 0], 1.2 * np.exp(lam * (1.0 - t)),
                               atol=1e-9)


def test_simulate_x0_depends_on_increments_only():
    K = 200
    prob, sol = portfolio_solution(K=K)
    rng = np.random.default_rng(12)
    dW0 = rng.normal(size=K) * np.sqrt(1.0 / K)
    a = simulate_x0(prob, sol, dW0)
    b = simulate_x0(prob, sol, dW0.copy())
    assert np.array_equal(a.x0, b.x0)
    c = simulate_x0(prob, sol, -dW0)
    assert np.max(np.abs(a.x0 - c.x0)) > 0.0


@pytest.mark.filterwarnings("ignore:overflow")
def test_simulate_x0_divergence():
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 20},
        "dynamics": {"A": 80.0, "B": 0.0},
        "observation": {"sigtilde": 1.0},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"R": 1.0},
        "initial_state": 1e300,
    }
    prob = load_problem(cfg)
    sol = build_solution(prob)
    with pytest.raises(DivergenceError):
        simulate_x0(prob, sol, np.zeros(20))


def test_stationarity_identity_random_instances():
    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(6):
        n, m = rng.integers(1, 3), rng.integers(1, 3)
        prob = random_problem(rng, n=int(n), m=int(m), d=1, K=40, pd_cost=True)
        sol = build_solution(prob, SolverOptions(substeps=6))
        for k in (0, 20, 40):
            xhat = rng.normal(size=int(n))
            x0 = rng.normal(size=int(n))
            res = stationarity_residual(prob, sol, k, xhat, x0)
            assert np.max(np.abs(res)) < 1e-10
            checked += 1
    assert checked == 18


def test_tower_property():
    rng = np.random.default_rng(3)
    prob = random_problem(rng, n=2, m=2, d=1, K=30, pd_cost=True)
    sol = build_solution(prob)
    x0 = rng.normal(size=2)
    delta = rng.normal(size=2)
    samples = np.stack([x0 + delta, x0 - delta, x0 + 2 * delta, x0 - 2 * delta])
    controls = np.stack([decentralized_control(sol, 0.5, s, x0) for s in samples])
    # affine in xhat; residual is float rounding of the affine evaluation only
    np.testing.assert_allclose(np.mean(controls, axis=0),
                               control_u0(sol, 0.5, x0), rtol=0, atol=1e-14)


def test_write_limit_csv():
    prob, sol = portfolio_solution(K=4)
    paths = simulate_x0(prob, sol, np.zeros(4))
    buf = io.StringIO()
    write_limit_csv(paths, buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == "t,x0_0,u0_0"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == 2.0
