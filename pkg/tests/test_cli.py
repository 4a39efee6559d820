"""End-to-end command tests through cli.main."""

import json
import os

import numpy as np
import pytest

from mfglq.cli import main

PORTFOLIO_CFG = os.path.join(os.path.dirname(__file__), "..", "configs",
                             "portfolio.json")


def write_cfg(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def pd_config(**overrides):
    cfg = {
        "dims": {"n": 1, "m": 1, "d": 1},
        "grid": {"T": 1.0, "K": 40},
        "dynamics": {"A": 0.2, "B": 0.5, "D": 0.1, "F": 0.2,
                     "sigma": 0.3, "b": 0.05},
        "observation": {"G": 1.0, "sigtilde": 1.0},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"Q": 1.0, "R": 1.0, "LT": 0.5, "lT": 0.1,
                 "q": 0.05, "r": 0.02},
        "meanfield": {"alpha1": 0.5, "alpha2": 0.4, "alpha3": 0.6,
                      "beta1": 0.2, "beta2": 0.1},
        "initial_state": 1.0,
    }
    cfg.update(overrides)
    return cfg


def test_validate_portfolio_passes(tmp_path, capsys):
    assert main(["validate", "--config", PORTFOLIO_CFG,
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "valid:" in out


def test_validate_asymmetric_q(tmp_path, capsys):
    cfg = {
        "dims": {"n": 2, "m": 2, "d": 2},
        "grid": {"T": 1.0, "K": 10},
        "dynamics": {"A": [[0.1, 0.0], [0.0, 0.2]],
                     "B": [[1.0, 0.0], [0.0, 1.0]],
                     "sigma": [[0.3, 0.0], [0.0, 0.3]]},
        "observation": {"G": [[1.0, 0.0], [0.0, 1.0]],
                        "sigtilde": [[1.0, 0.0], [0.0, 1.0]]},
        "common_observation": {"sigcheck": 1.0},
        "cost": {"Q": [[1.0, 0.5], [0.0, 1.0]],
                 "R": [[1.0, 0.0], [0.0, 1.0]],
                 "LT": [[1.0, 0.0], [0.0, 1.0]]},
        "meanfield": {"alpha1": 0.5, "alpha2": 0.5, "alpha3": 0.5,
                      "beta1": 0.0, "beta2": 0.0},
        "initial_state": [1.0, 0.0],
    }
    path = write_cfg(tmp_path, "badq.json", cfg)
    assert main(["validate", "--config", path, "--out", str(tmp_path)]) == 2
    assert "Q not symmetric" in capsys.readouterr().out


def test_validate_malformed_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    assert main(["validate", "--config", str(path),
                 "--out", str(tmp_path)]) == 1


def test_validate_missing_file(tmp_path):
    assert main(["validate", "--config", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path)]) == 1


def test_riccati_portfolio_pi_csv(tmp_path):
    out = tmp_path / "r"
    assert main(["riccati", "--config", PORTFOLIO_CFG,
                 "--out", str(out)]) == 0
    raw = (out / "pi.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "t,Pi_00"
    assert abs(float(lines[1].split(",")[1]) - 0.594268) < 1e-6
    assert len(lines) == 1002


def test_riccati_zero_instance_all_zero(tmp_path):
    path = write_cfg(tmp_path, "zero.json", pd_config(cost={"R": 1.0}))
    out = tmp_path / "r"
    assert main(["riccati", "--config", path, "--out", str(out)]) == 0
    body = np.loadtxt(out / "pi.csv", delimiter=",", skiprows=1)
    assert np.all(body[:, 1] == 0.0)


def test_riccati_portfolio_sigma_loses_positivity(tmp_path, capsys):
    assert main(["riccati", "--config", PORTFOLIO_CFG, "--out",
                 str(tmp_path), "--sigma"]) == 3
    err = capsys.readouterr().err
    assert "positivity" in err
    assert "t = 1" in err


def test_riccati_rho_writes_all_paths(tmp_path):
    path = write_cfg(tmp_path, "pd.json", pd_config())
    out = tmp_path / "r"
    assert main(["riccati", "--config", path, "--out", str(out),
                 "--rho"]) == 0
    names = sorted(os.listdir(out))
    assert names == ["pi.csv", "rho.csv", "run_manifest.json", "sigma.csv"]


def test_simulate_repeat_seed_identical(tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["simulate", "--config", PORTFOLIO_CFG, "--N", "50",
                     "--seed", "7", "--out", str(out)]) == 0
        outs.append((out / "paths.csv").read_bytes())
    assert outs[0] == outs[1]


def test_simulate_threads_flag_keeps_results(tmp_path):
    path = write_cfg(tmp_path, "pd.json", pd_config())
    outs = []
    for sub, threads in (("a", "1"), ("b", "4")):
        out = tmp_path / sub
        assert main(["simulate", "--config", path, "--N", "20", "--M", "2",
                     "--seed", "3", "--threads", threads,
                     "--out", str(out)]) == 0
        outs.append((out / "paths.csv").read_bytes())
    assert outs[0] == outs[1]


def test_simulate_check_gap_failure(tmp_path, capsys):
    assert main(["simulate", "--config", PORTFOLIO_CFG, "--N", "50",
                 "--seed", "7", "--out", str(tmp_path),
                 "--check-gap", "1e-9"]) == 4
    assert "check failed" in capsys.readouterr().err


def test_simulate_manifest_fields(tmp_path):
    assert main(["simulate", "--config", PORTFOLIO_CFG, "--N", "20",
                 "--seed", "5", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["config"] == PORTFOLIO_CFG
    assert manifest["seed"] == 5
    assert manifest["out"] == str(tmp_path)
    assert manifest["version"]
    assert manifest["wall_clock"] > 0.0
    assert manifest["args"]["N"] == 20


def test_noiseless_single_agent_matches_ode(tmp_path):
    cfg = pd_config(dynamics={"A": 0.2, "B": 0.5, "b": 0.05})
    path = write_cfg(tmp_path, "ode.json", cfg)
    out = tmp_path / "r"
    assert main(["simulate", "--config", path, "--N", "1",
                 "--out", str(out)]) == 0
    body = np.loadtxt(out / "paths.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(body[:, 1] - body[:, 2])) == 0.0
    assert np.max(np.abs(body[:, 3] - body[:, 4])) == 0.0


def test_nash_sweep_writes_report(tmp_path, capsys):
    path = write_cfg(tmp_path, "pd.json", pd_config())
    out = tmp_path / "r"
    assert main(["nash", "--config", path, "--Ns", "10,20,40", "--M", "3",
                 "--seed", "0", "--out", str(out)]) == 0
    assert "log-log slope" in capsys.readouterr().out
    lines = (out / "gap_sweep.csv").read_text().splitlines()
    assert lines[0] == "N,replication,gap"
    assert len(lines) == 1 + 3 * 3


def test_nash_single_population_size_refused(tmp_path, capsys):
    path = write_cfg(tmp_path, "pd.json", pd_config())
    assert main(["nash", "--config", path, "--Ns", "100",
                 "--out", str(tmp_path)]) == 1
    assert "at least 3" in capsys.readouterr().err


def test_portfolio_smoke_files(tmp_path):
    assert main(["portfolio", "--N", "2", "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "figure_state.csv").exists()
    assert (tmp_path / "figure_control.csv").exists()


def test_portfolio_bad_out_dir(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("x", encoding="utf-8")
    assert main(["portfolio", "--N", "2", "--out", str(blocker)]) == 1


def test_portfolio_check_rms_failure(tmp_path, capsys):
    assert main(["portfolio", "--N", "2", "--seed", "1",
                 "--out", str(tmp_path), "--check-rms", "1e-9"]) == 4
    assert "check failed" in capsys.readouterr().err


def test_usage_errors_exit_1():
    assert main(["riccati"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["simulate", "--config", "x.json", "--seed", "-3"]) == 1


def test_help_and_version_exit_0(capsys):
    assert main(["--version"]) == 0
    assert main(["--help"]) == 0
    capsys.readouterr()
