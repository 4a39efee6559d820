"""Command-line entry point wiring configs to solvers, simulations, and CSVs.

Exit codes: 0 success, 1 usage or IO failure, 2 invalid problem, 3 gain
positivity loss during a backward sweep, 4 a requested tolerance check
failed.  Every run that produces output also writes run_manifest.json
into the output directory; rerunning with the recorded flags reproduces
the outputs bit for bit, all randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .filtering import DegeneracyError
from .model import (DimensionError, ProblemFormatError, ProblemSpec,
                    load_problem, validate)
from .nash import meanfield_gap_sweep
from .population import PopulationConfig, PopulationResult, \
    simulate_population, summary_text
from .portfolio import PortfolioParams, reproduce_figures
from .portfolio import limit_solution as application_solution
from .riccati import (DivergenceError, PositivityLoss, RiccatiSolution,
                      SolverOptions, build_solution, solve_pi, solve_rho,
                      solve_sigma)

__all__ = ["RunManifest", "main"]


@dataclass(frozen=True)
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    out: str
    version: str
    wall_clock: float
    args: dict

    def write(self) -> str:
        path = os.path.join(self.out, "run_manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, default=list)
            fh.write("\n")
        return path


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _ns_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            "expected a comma-separated list of integers")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfglq",
        description="Indefinite LQ mean-field games with common noise: "
                    "solvers, population simulation, equilibrium checks.")
    parser.add_argument("--version", action="version",
                        version=f"mfglq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True,
                           help="problem definition, JSON")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=_positive, default=1,
                       help="worker cap; does not change results")

    p = sub.add_parser("validate", help="check a config against the "
                                        "standing assumptions")
    add_common(p)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("riccati", help="solve the backward systems, write "
                                       "node samples")
    add_common(p)
    p.add_argument("--substeps", type=_positive, default=10)
    p.add_argument("--sigma", action="store_true",
                   help="also solve the mean-field gain path")
    p.add_argument("--rho", action="store_true",
                   help="also solve the offset path (implies --sigma)")
    p.set_defaults(handler=cmd_riccati)

    p = sub.add_parser("simulate", help="population run against the limit "
                                        "trajectory")
    add_common(p)
    p.add_argument("--N", type=_positive, default=100, help="agents")
    p.add_argument("--M", type=_positive, default=1, help="replications")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--substeps", type=_positive, default=10)
    p.add_argument("--check-gap", type=float, default=None, metavar="TOL",
                   help="exit 4 when sup |state avg - limit| exceeds TOL")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("nash", help="population-size sweep of the "
                                    "mean-field approximation gap")
    add_common(p)
    p.add_argument("--Ns", type=_ns_list, required=True,
                   help="comma-separated population sizes, at least 3")
    p.add_argument("--M", type=_positive, default=20, help="replications")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--substeps", type=_positive, default=10)
    p.set_defaults(handler=cmd_nash)

    p = sub.add_parser("portfolio", help="worked cash-balance example, "
                                         "figure CSVs")
    add_common(p, config=False)
    p.add_argument("--N", type=_positive, default=5000, help="agents")
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--check-rms", type=float, default=None, metavar="TOL",
                   help="exit 4 when an rms average-vs-limit gap exceeds TOL")
    p.set_defaults(handler=cmd_portfolio)

    return parser


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _load_problem_file(path: str) -> ProblemSpec:
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    return load_problem(cfg)


def _application_params(problem: ProblemSpec) -> PortfolioParams | None:
    """Match the scalar zero-running-cost shape whose backward system is
    known in closed form; None when the generic solvers are the only route."""
    if not (problem.n == 1 and problem.m == 1 and problem.d == 1):
        return None
    vals = {}
    for name in ("A", "B", "b", "D", "F", "sigma", "sigbar", "Abar", "Bbar",
                 "Dbar", "Fbar", "bbar", "G", "Gbar", "H", "Hbar", "btilde",
                 "sigtilde", "I", "bcheck", "sigcheck", "Q", "R", "S",
                 "q", "r"):
        flat = getattr(problem, name).values.reshape(-1)
        if not np.all(flat == flat[0]):
            return None
        vals[name] = float(flat[0])
    for name in ("D", "Abar", "Bbar", "Dbar", "Fbar", "bbar", "Gbar", "H",
                 "Hbar", "Q", "R", "S", "q", "r"):
        if vals[name] != 0.0:
            return None
    gamma = float(problem.LT[0, 0])
    if not (gamma > 0.0 and float(problem.lT[0]) == -0.5 and vals["F"] > 0.0):
        return None
    if (problem.alpha1, problem.alpha2, problem.alpha3) != (1.0, 1.0, 1.0):
        return None
    if (problem.beta1, problem.beta2) != (0.0, 0.0):
        return None
    if vals["sigtilde"] == 0.0 or vals["sigcheck"] == 0.0:
        return None
    return PortfolioParams(
        r=vals["A"], mu=vals["A"] + vals["B"], b=-vals["b"], sigma=vals["F"],
        c=vals["sigma"], cbar=vals["sigbar"], G=vals["G"],
        btilde=vals["btilde"], sigtilde=vals["sigtilde"], I=vals["I"],
        bcheck=vals["bcheck"], sigcheck=vals["sigcheck"], gamma=gamma,
        x0=float(problem.x[0]), T=problem.grid.T)


def _limit_solution(problem: ProblemSpec, opts: SolverOptions
                    ) -> RiccatiSolution:
    try:
        return build_solution(problem, opts)
    except PositivityLoss:
        params = _application_params(problem)
        if params is None:
            raise
        return application_solution(params, problem.grid.K, problem)


def _write_grid_csv(path: str, times: np.ndarray, name: str,
                    arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        _, n, m = arr.shape
        labels = [f"{name}_{i}{j}" for i in range(n) for j in range(m)]
    else:
        labels = [f"{name}_{i}" for i in range(arr.shape[1])]
    flat = arr.reshape(arr.shape[0], -1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["t"] + labels) + "\n")
        for k in range(flat.shape[0]):
            row = [f"{times[k]:.15g}"] + [f"{v:.15g}" for v in flat[k]]
            fh.write(",".join(row) + "\n")


def _write_average_csv(path: str, problem: ProblemSpec,
                       result: PopulationResult) -> None:
    """Replication-0 population averages next to the limit trajectory."""
    n, m = problem.n, problem.m
    times = problem.grid.times()
    header = (["t"]
              + [f"state_avg_{i}" for i in range(n)]
              + [f"state_limit_{i}" for i in range(n)]
              + [f"control_avg_{j}" for j in range(m)]
              + [f"control_limit_{j}" for j in range(m)])
    blocks = (result.xN[0], result.x0[0], result.uN[0], result.u0[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(times.shape[0]):
            row = [f"{times[k]:.15g}"]
            for block in blocks:
                row += [f"{v:.15g}" for v in block[k]]
            fh.write(",".join(row) + "\n")


def cmd_validate(args) -> int:
    problem = _load_problem_file(args.config)
    _ensure_out(args.out)
    report = validate(problem)
    for line in report.passes:
        print(f"pass: {line}")
    for line in report.flags:
        print(f"flag: {line}")
    for line in report.failures:
        print(f"FAIL: {line}")
    if not report.ok:
        return 2
    grid = problem.grid
    print(f"valid: n={problem.n} m={problem.m} d={problem.d} "
          f"K={grid.K} T={grid.T:g}")
    return 0


def cmd_riccati(args) -> int:
    problem = _load_problem_file(args.config)
    _ensure_out(args.out)
    opts = SolverOptions(substeps=args.substeps)
    times = problem.grid.times()
    written = []

    Pi = solve_pi(problem, opts)
    _write_grid_csv(os.path.join(args.out, "pi.csv"), times, "Pi", Pi)
    written.append("pi.csv")
    if args.sigma or args.rho:
        Sigma = solve_sigma(problem, opts)
        _write_grid_csv(os.path.join(args.out, "sigma.csv"), times,
                        "Sigma", Sigma)
        written.append("sigma.csv")
        if args.rho:
            rho = solve_rho(problem, Sigma, opts)
            _write_grid_csv(os.path.join(args.out, "rho.csv"), times,
                            "rho", rho)
            written.append("rho.csv")
    print(f"wrote {', '.join(written)} to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    problem = _load_problem_file(args.config)
    _ensure_out(args.out)
    sol = _limit_solution(problem, SolverOptions(substeps=args.substeps))
    cfg = PopulationConfig(N=args.N, M=args.M, seed=args.seed,
                           store_observations=False)
    result = simulate_population(problem, sol, cfg)
    _write_average_csv(os.path.join(args.out, "paths.csv"), problem, result)
    text = summary_text(result)
    print(text)
    with open(os.path.join(args.out, "summary.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(text + "\n")
    if args.check_gap is not None:
        gap = float(np.max(np.abs(result.xN - result.x0)))
        if gap > args.check_gap:
            print(f"check failed: sup |state avg - limit| = {gap:.6g} "
                  f"> {args.check_gap:g}", file=sys.stderr)
            return 4
    return 0


def cmd_nash(args) -> int:
    problem = _load_problem_file(args.config)
    _ensure_out(args.out)
    sol = _limit_solution(problem, SolverOptions(substeps=args.substeps))
    report = meanfield_gap_sweep(problem, sol, args.Ns, args.M, args.seed)
    with open(os.path.join(args.out, "gap_sweep.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        report.write_csv(fh)
    print(report.to_text())
    return 0


def cmd_portfolio(args) -> int:
    _ensure_out(args.out)
    paths = reproduce_figures(PortfolioParams(), args.N, args.seed, args.out)
    if args.check_rms is not None:
        for path in paths:
            body = np.loadtxt(path, delimiter=",", skiprows=1)
            rms = float(np.sqrt(np.mean((body[:, 1] - body[:, 2]) ** 2)))
            if rms > args.check_rms:
                print(f"check failed: rms gap {rms:.6g} > "
                      f"{args.check_rms:g} in {os.path.basename(path)}",
                      file=sys.stderr)
                return 4
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    start = time.perf_counter()
    try:
        code = args.handler(args)
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ProblemFormatError, DimensionError, DegeneracyError,
            DivergenceError) as exc:
        print(f"invalid problem: {exc}", file=sys.stderr)
        return 2
    except PositivityLoss as exc:
        print(f"solver stopped: {exc} "
              f"(time of loss t = {exc.time:.6g})", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest = RunManifest(
        command=args.command,
        config=getattr(args, "config", None),
        seed=getattr(args, "seed", None),
        out=args.out,
        version=__version__,
        wall_clock=time.perf_counter() - start,
        args={k: v for k, v in vars(args).items()
              if k not in {"command", "handler", "config", "seed", "out"}})
    try:
        manifest.write()
    except OSError as exc:
        print(f"error: could not write run manifest: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
