"""Problem container for the partially observed LQ mean-field game.

A problem instance bundles the population dynamics, the individual and
common observation channels, the (possibly indefinite) quadratic cost,
and the mean-field coupling scalars on a uniform time grid.  All
time-varying coefficients are piecewise-constant, right-continuous
sample paths on the grid nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

__all__ = [
    "Dimensions",
    "GridSpec",
    "CoefficientPath",
    "ProblemSpec",
    "ValidationReport",
    "load_problem",
    "save_problem",
    "serialize",
    "validate",
    "coeff_at",
]

SIGCHECK_FLOOR = 1e-12


class ProblemFormatError(ValueError):
    """Config text violates the documented schema."""


class DimensionError(ValueError):
    """A coefficient sample has the wrong shape."""


@dataclass(frozen=True)
class Dimensions:
    """State (n), control (m) and idiosyncratic-noise (d) dimensions."""

    n: int
    m: int
    d: int

    def __post_init__(self):
        for name in ("n", "m", "d"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ProblemFormatError(f"dims.{name} must be a positive integer, got {v!r}")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [0, T] with K intervals; nodes t_k = k*T/K."""

    T: float
    K: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ProblemFormatError(f"grid.T must be a positive finite real, got {self.T!r}")
        if not isinstance(self.K, int) or self.K < 1:
            raise ProblemFormatError(f"grid.K must be a positive integer, got {self.K!r}")

    @property
    def dt(self) -> float:
        return self.T / self.K

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)


@dataclass(frozen=True)
class CoefficientPath:
    """Matrix-valued samples at the K+1 grid nodes.

    Piecewise-constant and right-continuous: on [t_k, t_{k+1}) the value
    is values[k]; at t = T the value is the last sample.
    """

    name: str
    values: np.ndarray  # shape (K+1, *shape)
    T: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ProblemFormatError(f"coefficient {self.name} has non-finite entries")

    @property
    def K(self) -> int:
        return self.values.shape[0] - 1

    def at(self, t: float) -> np.ndarray:
        return coeff_at(self, t)


def coeff_at(path: CoefficientPath, t: float) -> np.ndarray:
    """Piecewise-constant right-continuous lookup; coeff_at(path, T) is the last sample."""
    if not (0.0 <= t <= path.T):
        # tolerate rounding drift from accumulated step arithmetic
        tol = 1e-9 * max(1.0, path.T)
        if t < -tol or t > path.T + tol:
            raise ValueError(f"time {t} outside [0, {path.T}] for coefficient {path.name}")
        t = min(max(t, 0.0), path.T)
    k = min(int(math.floor(t * path.K / path.T)), path.K)
    return path.values[k]


# Coefficient table: key -> (config section, shape template).
# Shape templates use the letters n, m, d resolved against Dimensions;
# "()" denotes a scalar path.
_DYNAMICS = {
    "A": "nn", "Abar": "nn", "B": "nm", "Bbar": "nm", "b": "n",
    "D": "nn", "Dbar": "nn", "F": "nm", "Fbar": "nm", "bbar": "n",
    "sigma": "nd", "sigbar": "nd",
}
_OBSERVATION = {
    "G": "nn", "Gbar": "nn", "H": "nm", "Hbar": "nm", "btilde": "n", "sigtilde": "nd",
}
_COMMON = {"I": "", "bcheck": "", "sigcheck": ""}
_COST_PATHS = {"Q": "nn", "q": "n", "R": "mm", "r": "m", "S": "nm"}
_COST_TERMINAL = {"LT": "nn", "lT": "n"}
_MEANFIELD = ("alpha1", "alpha2", "alpha3", "beta1", "beta2")


def _resolve_shape(template: str, dims: Dimensions) -> tuple[int, ...]:
    table = {"n": dims.n, "m": dims.m, "d": dims.d}
    return tuple(table[c] for c in template)


@dataclass(frozen=True)
class ProblemSpec:
    """Full coefficient set of one game instance.

    Dynamics: dx_i = (A x_i + B u_i + Abar xN + Bbar uN + b) dt
                     + sigma dW_i + (D x_i + F u_i + Dbar xN + Fbar uN + bbar) dW0
                     + sigbar dWbar_i
    Observation: dy_i = (G x_i + H u_i + Gbar xN + Hbar uN + btilde) dt + sigtilde dWbar_i
    Common observation: dtheta = (I theta + bcheck) dt + sigcheck dW0
    Cost weights (Q, R, S, q, r, LT, lT) may be indefinite; the scalars
    alpha1..3 / beta1..2 weight the state/control averages in the cost.
    """

    dims: Dimensions
    grid: GridSpec
    A: CoefficientPath
    Abar: CoefficientPath
    B: CoefficientPath
    Bbar: CoefficientPath
    b: CoefficientPath
    D: CoefficientPath
    Dbar: CoefficientPath
    F: CoefficientPath
    Fbar: CoefficientPath
    bbar: CoefficientPath
    sigma: CoefficientPath
    sigbar: CoefficientPath
    G: CoefficientPath
    Gbar: CoefficientPath
    H: CoefficientPath
    Hbar: CoefficientPath
    btilde: CoefficientPath
    sigtilde: CoefficientPath
    I: CoefficientPath
    bcheck: CoefficientPath
    sigcheck: CoefficientPath
    Q: CoefficientPath
    q: CoefficientPath
    R: CoefficientPath
    r: CoefficientPath
    S: CoefficientPath
    LT: np.ndarray
    lT: np.ndarray
    alpha1: float
    alpha2: float
    alpha3: float
    beta1: float
    beta2: float
    x: np.ndarray
    sigcheck_floor: float = field(default=SIGCHECK_FLOOR)

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def m(self) -> int:
        return self.dims.m

    @property
    def d(self) -> int:
        return self.dims.d


def _coerce_path(name: str, raw, shape: tuple[int, ...], grid: GridSpec) -> CoefficientPath:
    """Accept a constant sample or K+1 samples; constant wins on ambiguity."""
    K = grid.K
    if np.isscalar(raw):
        if shape != () and any(s != 1 for s in shape):
            raise DimensionError(f"{name}: scalar given but shape {shape} expected")
        sample = np.full(shape, float(raw))
        values = np.broadcast_to(sample, (K + 1,) + shape).copy()
        return CoefficientPath(name, values, grid.T)
    arr = np.asarray(raw, dtype=float)
    if arr.shape == shape:
        values = np.broadcast_to(arr, (K + 1,) + shape).copy()
    elif arr.shape == (K + 1,) + shape:
        values = arr.copy()
    elif shape == (1,) and arr.shape == (K + 1,):
        values = arr.reshape(K + 1, 1).copy()
    elif shape != () and all(s == 1 for s in shape) and arr.shape == ():
        values = np.broadcast_to(arr.reshape(shape), (K + 1,) + shape).copy()
    else:
        raise DimensionError(
            f"{name}: got shape {arr.shape}, expected {shape} (constant) "
            f"or {(K + 1,) + shape} (one sample per node)"
        )
    return CoefficientPath(name, values, grid.T)


def _coerce_terminal(name: str, raw, shape: tuple[int, ...]) -> np.ndarray:
    if np.isscalar(raw):
        if any(s != 1 for s in shape):
            raise DimensionError(f"{name}: scalar given but shape {shape} expected")
        arr = np.full(shape, float(raw))
    else:
        arr = np.asarray(raw, dtype=float)
        if arr.shape != shape:
            raise DimensionError(f"{name}: got shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ProblemFormatError(f"{name} has non-finite entries")
    return arr


def _take_section(cfg: dict, key: str) -> dict:
    section = cfg.get(key, {})
    if not isinstance(section, dict):
        raise ProblemFormatError(f"section {key!r} must be a mapping")
    return dict(section)


def load_problem(source, sigcheck_floor: float = SIGCHECK_FLOOR) -> ProblemSpec:
    """Build a ProblemSpec from a config dict, JSON text, or file path.

    Absent optional coefficients default to zero.  `common_observation.sigcheck`
    is required.  Unknown keys raise a schema error naming the key.
    """
    if isinstance(source, (str, bytes)):
        text = str(source)
        if not text.lstrip().startswith("{"):
            with open(text, "r", encoding="utf-8") as fh:
                text = fh.read()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ProblemFormatError(f"config is not valid JSON: {exc}") from exc
    elif isinstance(source, dict):
        cfg = source
    else:
        raise ProblemFormatError(f"unsupported config source {type(source).__name__}")

    known_top = {"dims", "grid", "dynamics", "observation", "common_observation",
                 "cost", "meanfield", "initial_state"}
    for key in cfg:
        if key not in known_top:
            raise ProblemFormatError(f"unknown top-level key {key!r}")
    for req in ("dims", "grid"):
        if req not in cfg:
            raise ProblemFormatError(f"missing required section {req!r}")

    dims_cfg = _take_section(cfg, "dims")
    for req in ("n", "m", "d"):
        if req not in dims_cfg:
            raise ProblemFormatError(f"missing key dims.{req}")
    dims = Dimensions(int(dims_cfg.pop("n")), int(dims_cfg.pop("m")), int(dims_cfg.pop("d")))
    if dims_cfg:
        raise ProblemFormatError(f"unknown key dims.{next(iter(dims_cfg))}")

    grid_cfg = _take_section(cfg, "grid")
    for req in ("T", "K"):
        if req not in grid_cfg:
            raise ProblemFormatError(f"missing key grid.{req}")
    grid = GridSpec(float(grid_cfg.pop("T")), int(grid_cfg.pop("K")))
    if grid_cfg:
        raise ProblemFormatError(f"unknown key grid.{next(iter(grid_cfg))}")

    common_cfg = _take_section(cfg, "common_observation")
    if "sigcheck" not in common_cfg:
        raise ProblemFormatError("missing key common_observation.sigcheck (nondegenerate by assumption)")

    sections = [
        ("dynamics", _DYNAMICS, _take_section(cfg, "dynamics")),
        ("observation", _OBSERVATION, _take_section(cfg, "observation")),
        ("common_observation", _COMMON, common_cfg),
        ("cost", {**_COST_PATHS, **_COST_TERMINAL}, _take_section(cfg, "cost")),
    ]
    built: dict[str, object] = {}
    for section_name, table, section_cfg in sections:
        for key in section_cfg:
            if key not in table:
                raise ProblemFormatError(f"unknown key {section_name}.{key}")
        for key, template in table.items():
            shape = _resolve_shape(template, dims)
            if key in _COST_TERMINAL:
                if key in section_cfg:
                    built[key] = _coerce_terminal(key, section_cfg[key], shape)
                else:
                    built[key] = np.zeros(shape)
            else:
                if key in section_cfg:
                    built[key] = _coerce_path(key, section_cfg[key], shape, grid)
                else:
                    built[key] = CoefficientPath(key, np.zeros((grid.K + 1,) + shape), grid.T)

    mf_cfg = _take_section(cfg, "meanfield")
    for key in mf_cfg:
        if key not in _MEANFIELD:
            raise ProblemFormatError(f"unknown key meanfield.{key}")
    for key in _MEANFIELD:
        val = mf_cfg.get(key, 0.0)
        if not np.isscalar(val):
            raise ProblemFormatError(f"meanfield.{key} must be a scalar")
        built[key] = float(val)

    if "initial_state" in cfg:
        x = _coerce_terminal("initial_state", cfg["initial_state"], (dims.n,))
    else:
        x = np.zeros(dims.n)

    return ProblemSpec(dims=dims, grid=grid, x=x, sigcheck_floor=float(sigcheck_floor), **built)


def _collapse(path: CoefficientPath):
    """Single sample if the path is constant, else the full K+1 list."""
    values = path.values
    if np.all(values == values[0]):
        sample = values[0]
    else:
        sample = values
    if sample.shape == ():
        return float(sample)
    return sample.tolist()


def serialize(problem: ProblemSpec) -> dict:
    """Schema dict whose reals round-trip bitwise through JSON."""
    out: dict = {
        "dims": {"n": problem.n, "m": problem.m, "d": problem.d},
        "grid": {"T": problem.grid.T, "K": problem.grid.K},
    }
    for section_name, table in (
        ("dynamics", _DYNAMICS),
        ("observation", _OBSERVATION),
        ("common_observation", _COMMON),
        ("cost", _COST_PATHS),
    ):
        out[section_name] = {k: _collapse(getattr(problem, k)) for k in table}
    out["cost"]["LT"] = problem.LT.tolist()
    out["cost"]["lT"] = problem.lT.tolist()
    out["meanfield"] = {k: getattr(problem, k) for k in _MEANFIELD}
    out["initial_state"] = problem.x.tolist()
    return out


def save_problem(problem: ProblemSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(serialize(problem), fh, indent=1)
        fh.write("\n")


@dataclass
class ValidationReport:
    passes: list[str]
    failures: list[str]
    flags: list[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def _symmetric_everywhere(path: CoefficientPath) -> bool:
    v = path.values
    return bool(np.all(v == np.swapaxes(v, -1, -2)))


def validate(problem: ProblemSpec) -> ValidationReport:
    """Check the standing assumptions; indefiniteness is flagged, not failed."""
    passes, failures, flags = [], [], []

    for name in ("Q", "R"):
        path = getattr(problem, name)
        if _symmetric_everywhere(path):
            passes.append(f"{name} symmetric")
        else:
            failures.append(f"{name} not symmetric")
    if np.array_equal(problem.LT, problem.LT.T):
        passes.append("LT symmetric")
    else:
        failures.append("LT not symmetric")

    sig = problem.sigcheck.values
    if np.all(np.abs(sig) >= problem.sigcheck_floor):
        passes.append("sigcheck nondegenerate")
    else:
        failures.append("sigcheck degenerate")

    finite = True
    for f in fields(problem):
        val = getattr(problem, f.name)
        if isinstance(val, CoefficientPath):
            finite = finite and bool(np.all(np.isfinite(val.values)))
        elif isinstance(val, np.ndarray):
            finite = finite and bool(np.all(np.isfinite(val)))
    if finite:
        passes.append("all samples finite")
    else:
        failures.append("non-finite samples")

    for name in ("Q", "R", "LT"):
        val = getattr(problem, name)
        arr = val.values if isinstance(val, CoefficientPath) else val[None]
        if not np.any(arr):
            flags.append(f"{name} = 0 (indefinite)")
            continue
        mineig = min(float(np.linalg.eigvalsh(a).min()) for a in arr)
        if mineig < -1e-12:
            flags.append(f"{name} indefinite (min eig {mineig:.3g})")
    return ValidationReport(passes, failures, flags)
