"""Configuration-driven experiments with CSV/JSON outputs and a checksummed manifest.

A configuration is a TOML document::

    experiment = "residual-scaling"
    seed = 0
    output_dir = "runs/residual"
    plots = true

    [residual-scaling]
    eps_ladder = [0.05, 0.07, 0.1, 0.14, 0.2]
    n = 512

Keys in the experiment table override the registered defaults; unknown keys
are configuration errors.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .approximant import alpha_grid_for, assemble_frame, psi_u_spectral_check, split_initial_data
from .errors import ConfigError, SolverAbort
from .fieldio import sha256_of
from .modulation import ModulationState, evolve_hierarchy, kdv_evolve, soliton, spectral_tail, transport_evolve
from .residual import fit_slope, residuals
from .spectral import Field, apply, builtin_symbol, longwave_truncation, make_grid
from .wwref import WWState, cfl_limit, compare_error, ww_evolve

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

MANIFEST_NAME = "manifest.json"
TOP_LEVEL_KEYS = {"experiment", "seed", "output_dir", "plots"}


# registry -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Experiment:
    name: str
    summary: str
    defaults: dict
    func: Callable[["RunContext"], "ExperimentResult"]
    scaling: bool = False


REGISTRY: dict[str, Experiment] = {}


def experiment(name: str, summary: str, defaults: dict, scaling: bool = False):
    def register(func):
        REGISTRY[name] = Experiment(name, summary, defaults, func, scaling)
        return func

    return register


def list_experiments() -> list[Experiment]:
    return [REGISTRY[k] for k in sorted(REGISTRY)]


# configuration --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: dict
    seed: int = 0
    output_dir: str = "runs"
    plots: bool = False

    @property
    def eps_ladder(self) -> list[float]:
        return list(self.params.get("eps_ladder", []))

    def canonical(self) -> str:
        payload = {"experiment": self.experiment, "params": self.params, "seed": self.seed}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _normalize(default: Any, value: Any) -> Any:
    if isinstance(default, float) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and default and isinstance(default[0], float):
        return [float(v) for v in value]
    return value


def config_from_mapping(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed configuration; every problem is itemized in one :class:`ConfigError`."""
    problems: list[str] = []
    name = data.get("experiment")
    if not isinstance(name, str):
        raise ConfigError("configuration error:\n  - 'experiment' must be a string naming a registered experiment")
    if name not in REGISTRY:
        raise ConfigError(f"configuration error:\n  - unknown experiment {name!r}; choose from {sorted(REGISTRY)}")
    entry = REGISTRY[name]
    for key in sorted(set(data) - TOP_LEVEL_KEYS - {name}):
        problems.append(f"unknown top-level key {key!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("'seed' must be a non-negative integer")
    output_dir = data.get("output_dir", f"runs/{name}")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append("'output_dir' must be a non-empty string")
    elif base_dir is not None and not os.path.isabs(output_dir):
        output_dir = str(base_dir / output_dir)
    plots = data.get("plots", False)
    if not isinstance(plots, bool):
        problems.append("'plots' must be true or false")

    table = data.get(name, {})
    if not isinstance(table, dict):
        problems.append(f"[{name}] must be a table")
        table = {}
    params = dict(entry.defaults)
    for key, value in table.items():
        if key not in entry.defaults:
            problems.append(f"[{name}] unknown parameter {key!r}")
        elif not _type_ok(entry.defaults[key], value):
            problems.append(f"[{name}] {key} must be of type {type(entry.defaults[key]).__name__}, got {value!r}")
        else:
            params[key] = _normalize(entry.defaults[key], value)
    problems.extend(_validate_params(entry, params))
    if problems:
        raise ConfigError("configuration error:\n" + "\n".join(f"  - {p}" for p in problems))
    return ExperimentConfig(name, params, seed, output_dir, plots)


def _validate_params(entry: Experiment, params: dict) -> list[str]:
    out = []
    ladder = params.get("eps_ladder")
    if ladder is not None:
        if entry.scaling and len(ladder) < 4:
            out.append(f"eps_ladder needs at least 4 values for a scaling experiment, got {len(ladder)}")
        if any(not (isinstance(e, (int, float)) and 0 < e < 1) for e in ladder):
            out.append("eps_ladder values must lie in (0, 1)")
        elif len(set(ladder)) != len(ladder):
            out.append("eps_ladder values must be distinct")
    for key in ("eps",):
        if key in params and not 0 < params[key] < 1:
            out.append(f"{key} must lie in (0, 1)")
    n = params.get("n")
    if n is not None and (n < 8 or n & (n - 1)):
        out.append("n must be a power of two >= 8")
    for key in ("length", "dtau", "dt", "t_end", "T0", "ww_dt_max"):
        if key in params and not params[key] > 0:
            out.append(f"{key} must be positive")
    for key in ("families",):
        for fam in params.get(key, []):
            if fam not in FAMILIES:
                out.append(f"unknown initial-data family {fam!r}; choose from {sorted(FAMILIES)}")
    if "baseline_family" in params and params["baseline_family"] not in FAMILIES:
        out.append(f"unknown baseline family {params['baseline_family']!r}")
    for key in ("theta_y", "theta_u"):
        if key in params and params[key] not in PROFILES:
            out.append(f"unknown profile {params[key]!r} for {key}; choose from {sorted(PROFILES)}")
    if "amplitudes" in params:
        if len(params["amplitudes"]) != len(params.get("centers", [])):
            out.append("amplitudes and centers must have equal length")
        if any(a <= 0 for a in params["amplitudes"]):
            out.append("soliton amplitudes must be positive")
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration error:\n  - file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"configuration error:\n  - {path}: invalid TOML ({exc})") from exc
    return config_from_mapping(data, path.parent)


# outputs --------------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    op: str
    threshold: Any
    passed: bool

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "op": self.op, "threshold": self.threshold, "passed": self.passed}


def check(name: str, value: float, op: str, threshold) -> Check:
    value = float(value)
    if op == "<=":
        ok = value <= threshold
    elif op == ">=":
        ok = value >= threshold
    elif op == ">":
        ok = value > threshold
    elif op == "in":
        ok = threshold[0] <= value <= threshold[1]
    else:
        raise ValueError(f"unknown comparison {op!r}")
    return Check(name, value, op, list(threshold) if op == "in" else threshold, bool(ok and math.isfinite(value)))


@dataclass
class ExperimentResult:
    checks: list[Check]
    diagnostics: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


@dataclass(frozen=True)
class PlotSpec:
    csv_name: str
    x: str
    ys: tuple[str, ...]
    logx: bool = False
    logy: bool = False
    title: str = ""


class RunWriter:
    """Single writer for one run directory; records every file it creates."""

    def __init__(self, directory: Path):
        self.directory = directory
        self.files: list[str] = []

    def _path(self, name: str) -> Path:
        if name in self.files:
            raise ValueError(f"{name} written twice in one run")
        self.files.append(name)
        return self.directory / name

    def csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
        path = self._path(name)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\r\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
        return path

    def json(self, name: str, payload) -> Path:
        path = self._path(name)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path

    def svg(self, plot: PlotSpec) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        with (self.directory / plot.csv_name).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        x = np.array([float(r[plot.x]) for r in rows])
        plt.rcParams["svg.hashsalt"] = "kdvcorr"  # stable element ids
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for y in plot.ys:
            ax.plot(x, [abs(float(r[y])) if plot.logy else float(r[y]) for r in rows], "o-", label=y, ms=3)
        if plot.logx:
            ax.set_xscale("log")
        if plot.logy:
            ax.set_yscale("log")
        ax.set_xlabel(plot.x)
        ax.legend()
        if plot.title:
            ax.set_title(plot.title)
        fig.tight_layout()
        path = self._path(Path(plot.csv_name).stem + ".svg")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return v


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@dataclass
class RunContext:
    config: ExperimentConfig
    writer: RunWriter
    jobs: int = 1
    plots: list[PlotSpec] = dc_field(default_factory=list)

    @property
    def p(self) -> dict:
        return self.config.params

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.config.seed)

    def map(self, func: Callable, items: Sequence) -> list:
        """Ordered map; independent items run in worker processes when ``jobs > 1``."""
        if self.jobs <= 1 or len(items) <= 1:
            return [func(item) for item in items]
        with ProcessPoolExecutor(max_workers=min(self.jobs, len(items))) as pool:
            return list(pool.map(func, items))


@contextmanager
def stage(name: str):
    """Re-raise solver aborts with the stage that produced them."""
    try:
        yield
    except SolverAbort as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


# manifest -------------------------------------------------------------------------------

@dataclass
class RunManifest:
    experiment: str
    config_hash: str
    seed: int
    passed: bool
    checks: list[dict]
    files: list[dict]
    wall_clock_seconds: float
    diagnostics: dict
    numba: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def verify(self, directory: str | Path) -> list[str]:
        """Names of listed files that are missing or whose checksum changed."""
        directory = Path(directory)
        bad = []
        for entry in self.files:
            path = directory / entry["path"]
            if not path.exists() or sha256_of(path) != entry["sha256"]:
                bad.append(entry["path"])
        return bad

    @classmethod
    def load(cls, directory: str | Path) -> "RunManifest":
        return cls(**json.loads((Path(directory) / MANIFEST_NAME).read_text()))


def _prepare_output(directory: Path) -> None:
    """Create the run directory; files from an earlier manifest are replaced, anything else is refused."""
    directory.mkdir(parents=True, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise ConfigError(f"configuration error:\n  - output directory {directory} is not writable")
    existing = {p.name for p in directory.iterdir()}
    if not existing:
        return
    owned: set[str] = set()
    if MANIFEST_NAME in existing:
        try:
            owned = {e["path"] for e in json.loads((directory / MANIFEST_NAME).read_text())["files"]}
        except (ValueError, KeyError, TypeError):
            owned = set()
        owned.add(MANIFEST_NAME)
    foreign = sorted(existing - owned)
    if foreign:
        raise ConfigError(
            f"configuration error:\n  - output directory {directory} holds files not produced by a previous run: {foreign}"
        )
    for name in owned & existing:
        (directory / name).unlink()


def run(config: ExperimentConfig, out: str | Path | None = None, jobs: int = 1) -> RunManifest:
    """Run one experiment, write its outputs and manifest, and return the manifest."""
    entry = REGISTRY[config.experiment]
    directory = Path(out) if out is not None else Path(config.output_dir)
    _prepare_output(directory)
    writer = RunWriter(directory)
    ctx = RunContext(config, writer, max(1, int(jobs)))
    start = time.perf_counter()
    result = entry.func(ctx)
    if config.plots:
        for plot in ctx.plots:
            writer.svg(plot)
    writer.json(
        "checks.json",
        {"experiment": config.experiment, "passed": result.passed, "checks": [c.as_dict() for c in result.checks]},
    )
    files = [{"path": name, "sha256": sha256_of(directory / name), "bytes": (directory / name).stat().st_size} for name in writer.files]
    manifest = RunManifest(
        experiment=config.experiment,
        config_hash=config.digest(),
        seed=config.seed,
        passed=result.passed,
        checks=[c.as_dict() for c in result.checks],
        files=files,
        wall_clock_seconds=time.perf_counter() - start,
        diagnostics=json.loads(json.dumps(result.diagnostics, default=_jsonable)),
        numba=_kernels.USING_NUMBA,
    )
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest.as_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


# initial-data recipes ---------------------------------------------------------------------

def _headon(grid, params):
    c = params.get("separation", 1.0)
    return soliton(grid, 1.0, -c), soliton(grid, 1.0, c)


def _single(grid, params):
    return soliton(grid, 1.0, 0.0), Field.zeros(grid)


FAMILIES = {"headon": _headon, "single": _single}

PROFILES = {
    "gaussian-derivative": lambda b, w: -2.0 * b / w ** 2 * np.exp(-(b / w) ** 2),
    "mexican-hat": lambda b, w: (1.0 - 2.0 * (b / w) ** 2) * np.exp(-(b / w) ** 2),
    "gaussian": lambda b, w: np.exp(-(b / w) ** 2),
}


def _beta_grid(p: dict):
    return make_grid(p["n"], p["length"])


# identities -----------------------------------------------------------------------------

@experiment(
    "identities",
    "trig identity, multiplier compositions and the long-wave K0 truncation order",
    {
        "trig_points": 50,
        "trig_range": 3.0,
        "n": 256,
        "length": 40.0,
        "random_fields": 5,
        "tolerance": 1e-12,
        "eps_ladder": [0.05, 0.07, 0.1, 0.14, 0.2],
        "s": 4.0,
        "truncation_min_slope": 6.4,
    },
)
def _identities(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    axis = np.linspace(-p["trig_range"], p["trig_range"], p["trig_points"])
    l, k = np.meshgrid(axis, axis, indexing="ij")
    off = l != k
    lhs = (np.tanh(l[off]) - np.tanh(k[off])) / np.tanh(l[off] - k[off])
    trig_err = float(np.max(np.abs(lhs - (1.0 - np.tanh(k[off]) * np.tanh(l[off])))))

    grid = _beta_grid(p)
    rng = ctx.rng()
    dispersion, Linv, K0, derivative = (builtin_symbol(n) for n in ("L", "Linv", "K0", "D"))
    comp = {"L*Linv": 0.0, "K0*L-D": 0.0, "Linv*L": 0.0}
    kmax = int(p["n"] // 8)
    for _ in range(p["random_fields"]):
        coef = np.zeros(grid.n // 2 + 1, dtype=complex)
        coef[1:kmax] = (rng.standard_normal(kmax - 1) + 1j * rng.standard_normal(kmax - 1)) / np.arange(1, kmax) ** 2
        f = Field(grid, np.fft.irfft(coef, n=grid.n) * grid.n)
        scale = float(np.max(np.abs(f.values)))
        comp["L*Linv"] = max(comp["L*Linv"], float(np.max(np.abs((dispersion(Linv(f)) - f).values))) / scale)
        comp["Linv*L"] = max(comp["Linv*L"], float(np.max(np.abs((Linv(dispersion(f)) - f).values))) / scale)
        d = derivative(f)
        comp["K0*L-D"] = max(comp["K0*L-D"], float(np.max(np.abs((K0(dispersion(f)) - d).values))) / float(np.max(np.abs(d.values))))

    truncated = longwave_truncation("K0eps", 5)
    work = []
    for eps in p["eps_ladder"]:
        alpha = alpha_grid_for(grid, eps)
        f = Field.from_function(alpha, lambda a: np.exp(-((eps * a) ** 2) / 4.0))
        work.append((apply(K0, f) - apply(truncated, f)).norm(p["s"]))
    fit = fit_slope(p["eps_ladder"], work, "K0 order-5 truncation")

    tol = p["tolerance"]
    checks = [
        check("trig identity max error", trig_err, "<=", tol),
        check("L o Linv relative error", comp["L*Linv"], "<=", tol),
        check("Linv o L relative error", comp["Linv*L"], "<=", tol),
        check("K0 o L minus derivative relative error", comp["K0*L-D"], "<=", tol),
        check("K0 truncation slope", fit.slope, ">=", p["truncation_min_slope"]),
    ]
    ctx.writer.csv(
        "identities.csv",
        ["check", "value", "threshold", "passed"],
        [(c.name, c.value, c.threshold, c.passed) for c in checks],
    )
    ctx.writer.csv("truncation.csv", ["eps", "truncation_error"], zip(p["eps_ladder"], work))
    ctx.plots.append(PlotSpec("truncation.csv", "eps", ("truncation_error",), True, True, "K0 truncation error"))
    return ExperimentResult(checks, {"truncation_fit": fit.as_dict()})


# kdv soliton -----------------------------------------------------------------------------

def _peak_position(f: Field, near: float | None = None) -> tuple[float, float]:
    """Location and height of a spectrally interpolated maximum."""
    from scipy.optimize import minimize_scalar

    i = int(np.argmax(f.values)) if near is None else int(np.argmin(np.abs(f.grid.points - near)))
    x0, h = float(f.grid.points[i]), f.grid.spacing
    res = minimize_scalar(lambda x: -f.evaluate(np.array([x]))[0], bounds=(x0 - h, x0 + h), method="bounded",
                          options={"xatol": 1e-12})
    return float(res.x), float(-res.fun)


@experiment(
    "kdv-soliton",
    "soliton translation, conservation and the speed-amplitude law",
    {
        "n": 512,
        "length": 80.0,
        "amplitude": 1.0,
        "t_end": 2.0,
        "dt": 0.005,
        "shape_tolerance": 1e-6,
        "drift_tolerance": 1e-8,
        "speed_amplitudes": [0.5, 1.0, 2.0],
        "speed_tolerance": 0.01,
    },
)
def _kdv_soliton(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    grid = _beta_grid(p)
    a, t_end = p["amplitude"], p["t_end"]
    with stage("soliton translation"):
        traj = kdv_evolve(soliton(grid, a), "right", t_end, p["dt"], store_every=max(1, int(round(0.1 / p["dt"]))))
    rows, mass_drift, energy_drift, shape_err = [], 0.0, 0.0, 0.0
    m0, e0 = traj.states[0].integral(), (traj.states[0] * traj.states[0]).integral()
    for slow_time, w in zip(traj.times, traj.states):
        exact = soliton(grid, a, 0.5 * a * slow_time)
        err = (w - exact).norm(0)
        md = abs(w.integral() - m0) / abs(m0)
        ed = abs((w * w).integral() - e0) / abs(e0)
        shape_err, mass_drift, energy_drift = max(shape_err, err), max(mass_drift, md), max(energy_drift, ed)
        rows.append((slow_time, err, md, ed))
    ctx.writer.csv("soliton.csv", ["T", "shape_error", "mass_drift", "square_drift"], rows)

    speed_rows, worst = [], 0.0
    for amp in p["speed_amplitudes"]:
        with stage(f"speed A={amp}"):
            tr = kdv_evolve(soliton(grid, amp), "right", 2.0, p["dt"], store_every=int(round(0.5 / p["dt"])))
        pos = [_peak_position(w, 0.5 * amp * slow_time)[0] for slow_time, w in zip(tr.times, tr.states)]
        speed = float(np.polyfit(tr.times, pos, 1)[0])
        rel = abs(speed - 0.5 * amp) / (0.5 * amp)
        worst = max(worst, rel)
        speed_rows.append((amp, speed, 0.5 * amp, rel))
    ctx.writer.csv("speed_law.csv", ["amplitude", "fitted_speed", "predicted_speed", "relative_error"], speed_rows)
    ctx.plots.append(PlotSpec("soliton.csv", "T", ("shape_error",), False, True, "soliton shape error"))
    checks = [
        check("soliton shape error", shape_err, "<=", p["shape_tolerance"]),
        check("mass drift", mass_drift, "<=", p["drift_tolerance"]),
        check("square-integral drift", energy_drift, "<=", p["drift_tolerance"]),
        check("speed law relative error", worst, "<=", p["speed_tolerance"]),
    ]
    return ExperimentResult(checks, {"spectral_tail": spectral_tail(traj.final.values)})


# transport equivalence ----------------------------------------------------------------------

def second_difference_residual(states: Sequence[ModulationState], h: float) -> list[tuple[float, float]]:
    """``||(d_tau^2 - d_beta^2) transport - 3 d_beta^2 (kdv_right kdv_left)||`` from fourth-order centred differences in tau."""
    weights = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
    out = []
    for j in range(2, len(states) - 2):
        s = states[j]
        ops = s.grid.ops()
        ptt = sum(w * states[j + i - 2].transport.values for i, w in enumerate(weights))
        uv = (s.kdv_right * s.kdv_left).values
        res = ptt - ops.diff(s.transport.values, 2) - 3.0 * ops.diff(uv, 2)
        out.append((s.tau, Field(s.grid, res).norm(0)))
    return out


@experiment(
    "transport-equivalence",
    "the transport pair solves the forced wave equation through a head-on collision",
    {
        "eps": 0.1,
        "n": 512,
        "length": 64.0,
        "separation": 2.0,
        "tau_end": 4.0,
        "dtau": 0.005,
        "tolerance": 1e-6,
        "comparison_tolerance": 1e-6,
    },
)
def _transport_equivalence(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    grid = _beta_grid(p)
    eps = p["eps"]
    u0, v0 = _headon(grid, p)
    with stage("coupled hierarchy"):
        traj = evolve_hierarchy(ModulationState.initial(eps, u0, v0), p["tau_end"], p["dtau"])
    rows = second_difference_residual(traj.states, float(traj.meta["dtau"]))
    worst = max(r for _, r in rows)

    # the standalone transport solver driven by KdV trajectories must agree with the coupled one
    T_end = eps ** 2 * p["tau_end"]
    with stage("standalone transport"):
        dT = eps ** 2 * p["dtau"]
        u_traj = kdv_evolve(u0, "right", T_end, dT)
        v_traj = kdv_evolve(v0, "left", T_end, dT)
        tr = transport_evolve(u_traj, v_traj, eps, p["tau_end"], p["dtau"])
    final = traj.final
    diff = max((tr.final.Pminus - final.Pminus).norm(0), (tr.final.Pplus - final.Pplus).norm(0))
    rel = diff / max(final.transport.norm(0), 1e-300)
    ctx.writer.csv("transport.csv", ["tau", "wave_residual"], rows)
    ctx.plots.append(PlotSpec("transport.csv", "tau", ("wave_residual",), False, True, "forced wave residual"))
    checks = [
        check("forced wave residual", worst, "<=", p["tolerance"]),
        check("coupled vs standalone transport", rel, "<=", p["comparison_tolerance"]),
    ]
    return ExperimentResult(checks, {"P_norm": final.transport.norm(0), "boundary": final.boundary_magnitude()})


# residual scaling ---------------------------------------------------------------------------

def _residual_point(args: tuple[dict, str, float]) -> dict:
    p, family, eps = args
    grid = _beta_grid(p)
    u0, v0 = FAMILIES[family](grid, p)
    start = ModulationState.initial(eps, u0, v0)
    alpha = alpha_grid_for(grid, eps)
    out = {"family": family, "eps": eps}
    for label, corrections, fidelity in (("full", True, "extended"), ("kdv_only", False, "kdv-only")):
        with stage(f"{family} eps={eps} {label}"):
            traj = evolve_hierarchy(start, p["tau_end"], p["dtau"], store_every=10 ** 9, corrections=corrections, keep_states=False)
        frame = assemble_frame(traj.final, p["tau_end"] / eps, alpha, fidelity, derivatives=True)
        r = residuals(frame, p["s"])
        out[label] = (r.res_z_norm, r.res_y_norm, r.res_u_norm)
        out[f"{label}_min_denominator"] = r.min_denominator
        if corrections:
            out["psi_u_check"] = psi_u_spectral_check(frame)
            out["boundary"] = traj.final.boundary_magnitude()
            out["spectral_tail"] = max(spectral_tail(getattr(traj.final, c).values) for c in ("kdv_right", "kdv_left", "lin_right", "lin_left"))
    return out


@experiment(
    "residual-scaling",
    "residual norms of the second-order and KdV-only approximants against eps",
    {
        "eps_ladder": [0.05, 0.07, 0.1, 0.14, 0.2],
        "n": 512,
        "length": 64.0,
        "separation": 1.0,
        "tau_end": 1.0,
        "dtau": 0.01,
        "s": 4.0,
        "families": ["headon", "single"],
        "baseline_family": "single",
        "min_slope_u": 8.0,
        "min_slope_y": 8.0,
        "max_res_z": 1e-10,
        "baseline_slope": [6.0, 7.0],
        "min_gap": 1.5,
    },
    scaling=True,
)
def _residual_scaling(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    ladder = p["eps_ladder"]
    points = ctx.map(_residual_point, [(p, fam, eps) for fam in p["families"] for eps in ladder])
    rows, fits, checks, diagnostics = [], [], [], {}
    for fam in p["families"]:
        pts = [q for q in points if q["family"] == fam]
        for q in pts:
            rows.append((fam, q["eps"], *q["full"], *q["kdv_only"]))
        diagnostics[fam] = {
            "psi_u_check": max(q["psi_u_check"] for q in pts),
            "boundary": max(q["boundary"] for q in pts),
            "spectral_tail": max(q["spectral_tail"] for q in pts),
            "min_denominator": min(q["full_min_denominator"] for q in pts),
        }
        fu = fit_slope(ladder, [q["full"][2] for q in pts], f"{fam} full res_u")
        fy = fit_slope(ladder, [q["full"][1] for q in pts], f"{fam} full res_y")
        bu = fit_slope(ladder, [q["kdv_only"][2] for q in pts], f"{fam} kdv-only res_u")
        fits += [fu, fy, bu]
        checks += [
            check(f"{fam} res_u slope", fu.slope, ">=", p["min_slope_u"]),
            check(f"{fam} res_y slope", fy.slope, ">=", p["min_slope_y"]),
            check(f"{fam} max res_z", max(q["full"][0] for q in pts), "<=", p["max_res_z"]),
        ]
        if fam == p["baseline_family"]:
            checks += [
                check(f"{fam} kdv-only res_u slope", bu.slope, "in", p["baseline_slope"]),
                check(f"{fam} slope gap", fu.slope - bu.slope, ">=", p["min_gap"]),
            ]
    header = ["family", "eps", "res_z", "res_y", "res_u", "kdv_only_res_z", "kdv_only_res_y", "kdv_only_res_u"]
    ctx.writer.csv("residual_scaling.csv", header, rows)
    ctx.writer.json("slopes.json", {"fits": [f.as_dict() for f in fits]})
    for fam in p["families"]:
        ctx.writer.csv(
            f"residual_scaling_{fam}.csv",
            ["eps", "res_y", "res_u", "kdv_only_res_u"],
            [(r[1], r[3], r[4], r[7]) for r in rows if r[0] == fam],
        )
        ctx.plots.append(PlotSpec(f"residual_scaling_{fam}.csv", "eps", ("res_y", "res_u", "kdv_only_res_u"), True, True, fam))
    return ExperimentResult(checks, diagnostics)


# error scaling ----------------------------------------------------------------------------

def ww_step_for(grid, fraction: float, cap: float) -> float:
    return min(cap, fraction * cfl_limit(grid))


def _error_point(args: tuple[dict, float]) -> dict:
    p, eps = args
    grid = _beta_grid(p)
    u0, v0 = _headon(grid, p)
    start = ModulationState.initial(eps, u0, v0)
    alpha = alpha_grid_for(grid, eps)
    t_end = p["T0"] / eps ** 3
    out_dt = t_end / p["snapshots"]
    dt = ww_step_for(alpha, p["ww_dt_fraction"], p["ww_dt_max"])
    per_out = int(math.ceil(out_dt / dt))
    sub = int(math.ceil(eps * out_dt / p["dtau"]))
    with stage(f"eps={eps} hierarchy"):
        mod = evolve_hierarchy(start, eps * t_end, eps * out_dt / sub, store_every=sub)
    with stage(f"eps={eps} water waves"):
        ref = ww_evolve(WWState.from_frame(assemble_frame(start, 0.0, alpha, "extended")), t_end, out_dt / per_out, per_out)
    curves = {fid: compare_error(ref, mod, eps, p["s"], fid) for fid in ("extended", "kdv-only")}
    return {
        "eps": eps,
        "times": curves["extended"].times,
        "extended": curves["extended"].combined,
        "kdv_only": curves["kdv-only"].combined,
        "energy_drift": ref.meta["energy_drift"],
        "max_iterations": int(max(ref.meta["iterations"])),
        "ww_dt": out_dt / per_out,
        "boundary": max(m.boundary for m in mod.meta["monitors"]),
    }


@experiment(
    "error-scaling",
    "sup-in-time error between the water-wave reference and the approximants against eps",
    {
        "eps_ladder": [0.2, 0.25, 0.3, 0.35],
        "n": 512,
        "length": 64.0,
        "separation": 2.0,
        "T0": 0.5,
        "snapshots": 50,
        "dtau": 0.01,
        "ww_dt_fraction": 0.9,
        "ww_dt_max": 0.25,
        "s": 4.0,
        "slope_window": [4.8, 6.2],
        "baseline_slope_window": [3.0, 4.5],
        "ratio_eps": 0.25,
        "min_ratio": 5.0,
    },
    scaling=True,
)
def _error_scaling(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    ladder = p["eps_ladder"]
    points = ctx.map(_error_point, [(p, eps) for eps in ladder])
    sup_ext = [float(q["extended"].max()) for q in points]
    sup_kdv = [float(q["kdv_only"].max()) for q in points]
    fit = fit_slope(ladder, sup_ext, "extended sup error", min_span=1.0)
    base = fit_slope(ladder, sup_kdv, "kdv-only sup error", min_span=1.0)
    ctx.writer.csv("error_scaling.csv", ["eps", "extended_sup", "kdv_only_sup"], zip(ladder, sup_ext, sup_kdv))
    for q in points:
        ctx.writer.csv(
            f"error_curve_eps{q['eps']:g}.csv",
            ["t", "extended", "kdv_only"],
            zip(q["times"], q["extended"], q["kdv_only"]),
        )
    ctx.writer.json("slopes.json", {"fits": [fit.as_dict(), base.as_dict()]})
    ctx.plots.append(PlotSpec("error_scaling.csv", "eps", ("extended_sup", "kdv_only_sup"), True, True, "sup error"))
    checks = [
        check("extended error slope", fit.slope, "in", p["slope_window"]),
        check("kdv-only error slope", base.slope, "in", p["baseline_slope_window"]),
        check("extended minus kdv-only slope", fit.slope - base.slope, ">", 0.0),
    ]
    if p["ratio_eps"] in ladder:
        i = ladder.index(p["ratio_eps"])
        checks.append(check(f"kdv-only / extended error at eps={p['ratio_eps']:g}", sup_kdv[i] / sup_ext[i], ">=", p["min_ratio"]))
    diagnostics = {
        f"eps={q['eps']:g}": {k: q[k] for k in ("energy_drift", "max_iterations", "ww_dt", "boundary")} for q in points
    }
    return ExperimentResult(checks, diagnostics)


# boundedness ----------------------------------------------------------------------------

@experiment(
    "boundedness",
    "correction norms stay comparable to their values during the first collision",
    {
        "eps": 0.2,
        "n": 512,
        "length": 64.0,
        "separation": 16.0,
        "T0": 1.0,
        "dtau": 0.01,
        "store_tau": 0.25,
        "norm_index": 4.0,
        "w3_norm_index": 3.0,
        "collision_halfwidth": 2.0,
        "factor": 10.0,
    },
)
def _boundedness(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    grid = _beta_grid(p)
    eps = p["eps"]
    u0, v0 = _headon(grid, p)
    tau_end = p["T0"] / eps ** 2
    every = max(1, int(round(p["store_tau"] / p["dtau"])))
    names = ("lin_right", "lin_left", "Pminus", "Pplus", "W3")
    rows = []

    def record(state: ModulationState) -> None:
        vals = [getattr(state, c).norm(p["norm_index"]) for c in names[:4]]
        vals.append(state.W3.norm(p["w3_norm_index"]))
        rows.append((state.tau, *vals, state.boundary_magnitude()))

    with stage("hierarchy"):
        evolve_hierarchy(ModulationState.initial(eps, u0, v0), tau_end, p["dtau"], every, on_snapshot=record, keep_states=False)
    data = np.array(rows)
    tau = data[:, 0]
    # counter-propagating unit solitons close the gap at unit relative speed 2
    gap = min(2.0 * p["separation"], p["length"] - 2.0 * p["separation"])
    collision = 0.5 * gap
    window = np.abs(tau - collision) <= p["collision_halfwidth"]
    checks, diag = [], {"collision_tau": collision}
    if not window.any() or collision > tau_end:
        raise ConfigError("configuration error:\n  - the first collision falls outside the simulated interval")
    for j, name in enumerate(names, start=1):
        ref = float(data[window, j].max())
        ratio = float(data[:, j].max()) / ref if ref > 0 else math.inf
        checks.append(check(f"{name} max / first-collision max", ratio, "<=", p["factor"]))
        diag[name] = {"first_collision": ref, "max": float(data[:, j].max())}
    diag["boundary"] = float(data[:, -1].max())
    ctx.writer.csv("boundedness.csv", ["tau", *names, "boundary"], rows)
    ctx.plots.append(PlotSpec("boundedness.csv", "tau", names, False, True, "correction norms"))
    return ExperimentResult(checks, diag)


# collisions -----------------------------------------------------------------------------

@experiment(
    "headon-collision",
    "peak run-up of the second-order surface against linear superposition",
    {
        "eps": 0.1,
        "n": 512,
        "length": 64.0,
        "separation": 4.0,
        "dtau": 0.01,
        "store_tau": 0.05,
    },
)
def _headon_collision(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    grid = _beta_grid(p)
    eps = p["eps"]
    u0, v0 = _headon(grid, p)
    tau_end = 2.0 * p["separation"]
    every = max(1, int(round(p["store_tau"] / p["dtau"])))
    alpha = alpha_grid_for(grid, eps)
    rows = []

    def record(state: ModulationState) -> None:
        t = state.tau / eps
        linear = eps ** 2 * float((state.kdv_right + state.kdv_left).values.max())
        simple = float(assemble_frame(state, t, alpha, "simple").psi_y.values.max())
        extended = float(assemble_frame(state, t, alpha, "extended").psi_y.values.max())
        rows.append((state.tau, t, linear, simple, extended))

    with stage("hierarchy"):
        evolve_hierarchy(ModulationState.initial(eps, u0, v0), tau_end, p["dtau"], every, on_snapshot=record, keep_states=False)
    data = np.array(rows)
    centre = int(np.argmax(data[:, 2]))
    ctx.writer.csv("peak_runup.csv", ["tau", "t", "linear_superposition", "simple", "extended"], rows)
    summary = {
        "collision_tau": data[centre, 0],
        "linear_superposition_max": data[:, 2].max(),
        "extended_max": data[:, 4].max(),
        "simple_max": data[:, 3].max(),
        "excess_at_centre": data[centre, 4] - data[centre, 2],
    }
    ctx.writer.json("runup_summary.json", summary)
    ctx.plots.append(PlotSpec("peak_runup.csv", "tau", ("linear_superposition", "simple", "extended"), title="peak height"))
    checks = [
        check("extended minus linear run-up at collision centre", data[centre, 4] - data[centre, 2], ">", 0.0),
        check("simple minus linear run-up at collision centre", data[centre, 3] - data[centre, 2], ">", 0.0),
    ]
    return ExperimentResult(checks, summary)


def exact_phase_shifts(big: float, small: float) -> tuple[float, float]:
    """Asymptotic position shifts of the two solitons after an overtaking collision."""
    kb, ks = math.sqrt(3.0 * big) / 2.0, math.sqrt(3.0 * small) / 2.0
    log = math.log((kb + ks) / (kb - ks))
    return log / kb, -log / ks


@experiment(
    "overtaking-collision",
    "two right-moving solitons: amplitude recurrence and phase shifts",
    {
        "n": 1024,
        "length": 160.0,
        "amplitudes": [2.0, 0.5],
        "centers": [-10.0, 0.0],
        "t_end": 40.0,
        "dt": 0.01,
        "amplitude_tolerance": 1e-3,
        "shift_tolerance": 0.05,
        "store_T": 1.0,
    },
)
def _overtaking(ctx: RunContext) -> ExperimentResult:
    from scipy.signal import find_peaks

    p = ctx.p
    if len(p["amplitudes"]) != 2:
        raise ConfigError("configuration error:\n  - overtaking-collision needs exactly two solitons")
    grid = _beta_grid(p)
    (a_big, a_small), (c_big, c_small) = p["amplitudes"], p["centers"]
    if a_big <= a_small or c_big >= c_small:
        raise ConfigError("configuration error:\n  - the larger soliton must start behind the smaller one")
    w0 = soliton(grid, a_big, c_big) + soliton(grid, a_small, c_small)
    with stage("kdv"):
        traj = kdv_evolve(w0, "right", p["t_end"], p["dt"], store_every=max(1, int(round(p["store_T"] / p["dt"]))))
    rows = []
    for slow_time, w in zip(traj.times, traj.states):
        rows.append((slow_time, float(w.values.max())))
    ctx.writer.csv("overtaking_peaks.csv", ["T", "max_height"], rows)

    final = traj.final
    idx, _ = find_peaks(final.values, height=0.1 * a_small)
    peaks = sorted((_peak_position(final, float(grid.points[i])) for i in idx), key=lambda q: -q[1])
    if len(peaks) < 2:
        raise SolverAbort("[overtaking] the solitons have not separated by the final time")
    (x_big, h_big), (x_small, h_small) = peaks[:2]
    slow_time = p["t_end"]
    shift_big = x_big - (c_big + 0.5 * a_big * slow_time)
    shift_small = x_small - (c_small + 0.5 * a_small * slow_time)
    exact_big, exact_small = exact_phase_shifts(a_big, a_small)
    ctx.writer.csv(
        "overtaking.csv",
        ["soliton", "amplitude_initial", "amplitude_final", "position_shift", "predicted_shift"],
        [("large", a_big, h_big, shift_big, exact_big), ("small", a_small, h_small, shift_small, exact_small)],
    )
    ctx.plots.append(PlotSpec("overtaking_peaks.csv", "T", ("max_height",), title="maximum height"))
    checks = [
        check("large amplitude recurrence", abs(h_big - a_big), "<=", p["amplitude_tolerance"]),
        check("small amplitude recurrence", abs(h_small - a_small), "<=", p["amplitude_tolerance"]),
        check("large soliton forward shift", shift_big, ">", 0.0),
        check("small soliton backward shift", -shift_small, ">", 0.0),
        check("large shift vs two-soliton formula", abs(shift_big - exact_big), "<=", p["shift_tolerance"]),
        check("small shift vs two-soliton formula", abs(shift_small - exact_small), "<=", p["shift_tolerance"]),
    ]
    return ExperimentResult(checks, {"spectral_tail": spectral_tail(final.values)})


# initial data ---------------------------------------------------------------------------

@experiment(
    "initial-data",
    "surface data round trip through the initial-data map and frame assembly",
    {
        "eps_ladder": [0.05, 0.07, 0.1, 0.14, 0.2],
        "n": 256,
        "length": 64.0,
        "theta_y": "gaussian-derivative",
        "theta_u": "mexican-hat",
        "width": 2.0,
        "seed_mode": "linkdv",
        "min_slope": 3.4,
    },
    scaling=True,
)
def _initial_data(ctx: RunContext) -> ExperimentResult:
    p = ctx.p
    if p["seed_mode"] not in ("linkdv", "transport"):
        raise ConfigError("configuration error:\n  - seed_mode must be 'linkdv' or 'transport'")
    grid = _beta_grid(p)
    ty = Field.from_function(grid, lambda b: PROFILES[p["theta_y"]](b, p["width"]))
    tu = Field.from_function(grid, lambda b: PROFILES[p["theta_u"]](b, p["width"]))
    rows = []
    for eps in p["eps_ladder"]:
        data = split_initial_data(ty, tu, eps)
        frame = assemble_frame(data.state(eps, p["seed_mode"]), 0.0, alpha_grid_for(grid, eps), "extended")
        ry = float(np.max(np.abs(frame.psi_y.values - eps ** 2 * ty.values)))
        ru = float(np.max(np.abs(frame.psi_u.values - eps ** 2 * tu.values)))
        rows.append((eps, ry, ru))
    fy = fit_slope(p["eps_ladder"], [r[1] for r in rows], "height remainder")
    fu = fit_slope(p["eps_ladder"], [r[2] for r in rows], "velocity remainder")
    ctx.writer.csv("initial_data.csv", ["eps", "height_remainder", "velocity_remainder"], rows)
    ctx.writer.json("slopes.json", {"fits": [fy.as_dict(), fu.as_dict()]})
    ctx.plots.append(PlotSpec("initial_data.csv", "eps", ("height_remainder", "velocity_remainder"), True, True))
    checks = [
        check("height remainder slope", fy.slope, ">=", p["min_slope"]),
        check("velocity remainder slope", fu.slope, ">=", p["min_slope"]),
    ]
    return ExperimentResult(checks)


def render_summary(manifest: RunManifest) -> str:
    buf = io.StringIO()
    for c in manifest.checks:
        buf.write(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']:.6g} {c['op']} {c['threshold']}\n")
    buf.write(f"{manifest.experiment}: {'PASS' if manifest.passed else 'FAIL'} ({manifest.wall_clock_seconds:.1f}s)\n")
    return buf.getvalue()
