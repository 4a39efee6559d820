import json
import os

import numpy as np
import pytest

from mfglq.model import (
    CoefficientPath,
    Dimensions,
    GridSpec,
    ProblemFormatError,
    DimensionError,
    coeff_at,
    load_problem,
    save_problem,
    serialize,
    validate,
)

HERE = os.path.dirname(__file__)
PORTFOLIO_CONFIG = os.path.join(HERE, "..", "configs", "portfolio.json")


def test_portfolio_config_maps_to_general_coefficients():
    prob = load_problem(PORTFOLIO_CONFIG)
    assert prob.dims == Dimensions(1, 1, 1)
    assert prob.grid.T == 1.0 and prob.grid.K == 1000
    assert prob.A.values[0, 0, 0] == 0.06
    assert prob.B.values[0, 0, 0] == 0.09
    assert prob.F.values[0, 0, 0] == 0.25
    assert prob.b.values[0, 0] == -0.06
    assert prob.sigma.values[0, 0, 0] == 0.5
    assert np.all(prob.Q.values == 0.0)
    assert np.all(prob.R.values == 0.0)
    assert np.all(prob.S.values == 0.0)
    assert prob.LT[0, 0] == 0.6
    assert prob.lT[0] == -0.5
    assert (prob.alpha1, prob.alpha2, prob.alpha3) == (1.0, 1.0, 1.0)
    assert (prob.beta1, prob.beta2) == (0.0, 0.0)
    assert prob.x[0] == 2.0


def test_zero_config_is_valid():
    cfg = {
        "dims": {"n": 2, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 4},
        "common_observation": {"sigcheck": 0.0},
    }
    prob = load_problem(cfg)
    assert np.all(prob.A.values == 0.0)
    assert np.all(prob.LT == 0.0)
    assert np.all(prob.x == 0.0)
    # degenerate sigcheck loads fine but fails validation
    report = validate(prob)
    assert "sigcheck degenerate" in report.failures


def test_missing_sigcheck_is_a_parse_error():
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 4},
        "common_observation": {"I": 0.0},
    }
    with pytest.raises(ProblemFormatError, match="sigcheck"):
        load_problem(cfg)


def test_unknown_key_named_in_error():
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 4},
        "common_observation": {"sigcheck": 1.0},
        "dynamics": {"Azz": 1.0},
    }
    with pytest.raises(ProblemFormatError, match="Azz"):
        load_problem(cfg)


def test_shape_mismatch_is_a_dimension_error():
    cfg = {
        "dims": {"n": 2, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 4},
        "common_observation": {"sigcheck": 1.0},
        "dynamics": {"A": [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]},
    }
    with pytest.raises(DimensionError, match="A"):
        load_problem(cfg)


def test_coeff_at_right_continuous():
    grid = GridSpec(1.0, 2)
    path = CoefficientPath("c", np.array([1.0, 2.0, 2.0]), grid.T)
    assert coeff_at(path, 0.0) == 1.0
    assert coeff_at(path, 0.25) == 1.0
    # right-continuity: the node value belongs to the interval on its right
    assert coeff_at(path, 0.5) == 2.0
    assert coeff_at(path, 1.0) == 2.0


def test_coeff_at_constant_path():
    path = CoefficientPath("c", np.full((5, 2, 2), 3.0), 1.0)
    assert np.all(coeff_at(path, 0.37) == 3.0)


def test_coeff_at_domain_error():
    path = CoefficientPath("c", np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        coeff_at(path, -0.1)
    with pytest.raises(ValueError):
        coeff_at(path, 1.1)


def test_time_varying_coefficient_accepted():
    K = 4
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": K},
        "common_observation": {"sigcheck": 1.0},
        "dynamics": {"A": [[[float(k)]] for k in range(K + 1)]},
    }
    prob = load_problem(cfg)
    assert prob.A.values.shape == (K + 1, 1, 1)
    assert prob.A.values[3, 0, 0] == 3.0


def test_round_trip_bitwise():
    prob = load_problem(PORTFOLIO_CONFIG)
    text = json.dumps(serialize(prob))
    again = load_problem(text)
    for name in ("A", "B", "F", "b", "sigma", "Q", "R", "S", "sigcheck"):
        a = getattr(prob, name).values
        b = getattr(again, name).values
        assert np.array_equal(a, b)
    assert np.array_equal(prob.LT, again.LT)
    assert np.array_equal(prob.x, again.x)
    assert prob.alpha3 == again.alpha3


def test_round_trip_bitwise_awkward_reals(tmp_path):
    # 17 significant digits survive the JSON round trip
    val = 0.1234567890123456789
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 3},
        "common_observation": {"sigcheck": 1.0},
        "dynamics": {"A": val, "sigma": [[[1 / 3]], [[2 / 7]], [[np.pi]], [[1e-17]]]},
    }
    prob = load_problem(cfg)
    out = tmp_path / "roundtrip.json"
    save_problem(prob, str(out))
    again = load_problem(str(out))
    assert np.array_equal(prob.A.values, again.A.values)
    assert np.array_equal(prob.sigma.values, again.sigma.values)


def test_validate_portfolio_flags_indefinite_r():
    prob = load_problem(PORTFOLIO_CONFIG)
    report = validate(prob)
    assert report.ok
    assert "R = 0 (indefinite)" in report.flags
    assert "Q = 0 (indefinite)" in report.flags


def test_validate_fails_asymmetric_q():
    cfg = {
        "dims": {"n": 2, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 2},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"Q": [[1.0, 0.5], [0.0, 1.0]]},
    }
    report = validate(load_problem(cfg))
    assert not report.ok
    assert "Q not symmetric" in report.failures


def test_validate_is_pure():
    prob = load_problem(PORTFOLIO_CONFIG)
    r1 = validate(prob)
    r2 = validate(prob)
    assert r1.passes == r2.passes and r1.flags == r2.flags


def test_nonfinite_sample_rejected_at_load():
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 2},
        "common_observation": {"sigcheck": 1.0},
        "dynamics": {"A": float("nan")},
    }
    with pytest.raises(ProblemFormatError):
        load_problem(cfg)


def test_coeff_at_stable_under_refinement():
    # a piecewise-constant path sampled on a refined grid gives the same lookups
    coarse = CoefficientPath("c", np.array([1.0, 2.0, 4.0]), 1.0)
    fine_vals = np.array([coeff_at(coarse, k / 4) for k in range(5)])
    fine = CoefficientPath("c", fine_vals, 1.0)
    for t in (0.0, 0.2, 0.5, 0.55, 0.99, 1.0):
        assert coeff_at(fine, t) == coeff_at(coarse, t)
