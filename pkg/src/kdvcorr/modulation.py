"""Modulation hierarchy solvers.

Two layers live here:

* standalone solvers for each equation of the hierarchy (KdV, driven
  linearized KdV, transport, inhomogeneous wave equation), each usable and
  testable on its own, working on comoving grids where that is natural;
* :func:`evolve_hierarchy`, which advances the whole coupled hierarchy on the
  laboratory beta-grid in the fast time ``tau`` with one integrating-factor RK4
  stepper. The approximant and residual modules consume its states.

Laboratory state layout (all on one beta-grid, spectra stacked in this order)::

    kdv_right, kdv_left, lin_right, lin_left, Pminus, Pplus, Wplus, Wminus

with ``W3 = Wplus + Wminus`` and ``d/dtau W3 = d/dbeta (Wplus - Wminus)``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from . import _kernels
from .errors import SolverAbort
from .fieldio import read_binary, write_binary
from .spectral import Field, Grid, SpectralOps, builtin_symbol, apply

RIGHT, LEFT = "right", "left"
COMPONENTS = ("kdv_right", "kdv_left", "lin_right", "lin_left", "Pminus", "Pplus", "Wplus", "Wminus")
BLOWUP_FACTOR = 100.0
TAIL_TOL = 1e-10


def _direction(chirality: str) -> int:
    if chirality == RIGHT:
        return 1
    if chirality == LEFT:
        return -1
    raise ValueError(f"chirality must be 'right' or 'left', got {chirality!r}")


def spectral_tail(values: np.ndarray) -> float:
    """Relative magnitude of the top tenth of the spectrum."""
    coef = np.abs(np.fft.rfft(values))
    peak = coef.max()
    if peak == 0.0:
        return 0.0
    cut = max(1, int(0.9 * coef.size))
    return float(coef[cut:].max() / peak)


def _warn_if_unresolved(f: Field, what: str) -> None:
    tail = spectral_tail(f.values)
    if tail > TAIL_TOL:
        warnings.warn(f"{what}: spectral tail {tail:.2e} exceeds {TAIL_TOL:g}; field may be under-resolved", stacklevel=3)


def _mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated Taylor-series product along axis -2 of padded samples."""
    if a.shape[-2] == 1:
        return a * b
    lead = a.shape[:-2]
    if lead:
        out = np.empty(np.broadcast_shapes(a.shape, b.shape))
        a, b = np.broadcast_arrays(a, b)
        for idx in np.ndindex(*lead):
            out[idx] = _kernels.cauchy_product(np.ascontiguousarray(a[idx]), np.ascontiguousarray(b[idx]))
        return out
    return _kernels.cauchy_product(np.ascontiguousarray(a), np.ascontiguousarray(b))


# KdV -------------------------------------------------------------------------------

def soliton(grid: Grid, amplitude: float, center: float = 0.0, chirality: str = RIGHT) -> Field:
    """``A sech^2(sqrt(3A)/2 (beta - center))``, wrapped periodically around ``center``.

    Both chiralities share the profile; a right-mover travels at ``+A/2`` in its
    comoving coordinate and a left-mover at ``-A/2``.
    """
    _direction(chirality)
    if not amplitude > 0:
        raise ValueError(f"soliton amplitude must be positive, got {amplitude!r}")
    width = math.sqrt(3.0 * amplitude) / 2.0
    offset = (grid.points - center + 0.5 * grid.length) % grid.length - 0.5 * grid.length
    return Field(grid, amplitude / np.cosh(width * offset) ** 2)


def kdv_rhs(w: Field, chirality: str) -> Field:
    """Slow-time derivative of a KdV profile of the given chirality."""
    sign = _direction(chirality)
    _warn_if_unresolved(w, "kdv_rhs")
    ops = w.grid.ops()
    wh = ops.rfft(w.values)
    sq = ops.unpad_spectrum(ops.pad_spectrum(wh) ** 2)
    rhs = -0.5 * sign * (wh * ops.dk(3) / 3.0 + 1.5 * sq * ops.dk(1))
    return Field(w.grid, ops.irfft(rhs))


def _kdv_linear(ops: SpectralOps, sign: int) -> np.ndarray:
    # d/dT W = -(sign/6) W''' + ...  ->  symbol sign * i k^3 / 6
    return sign * 1j * ops.k ** 3 / 6.0


def _lawson_rk4(v: np.ndarray, lin: np.ndarray, h: float, nonlinear: Callable[[np.ndarray, float], np.ndarray], t: float):
    """One integrating-factor RK4 step for ``v' = lin*v + nonlinear(v, t)``."""
    shape = v.shape
    e_half = np.exp(0.5 * h * lin)
    e_full = e_half * e_half
    eh, ef = e_half.ravel(), e_full.ravel()
    flat = v.ravel()
    k1 = nonlinear(v, t).ravel()
    k2 = nonlinear(_kernels.lawson_half(eh, flat, k1, h).reshape(shape), t + 0.5 * h).ravel()
    k3 = nonlinear((eh * flat + 0.5 * h * k2).reshape(shape), t + 0.5 * h).ravel()
    k4 = nonlinear((ef * flat + h * eh * k3).reshape(shape), t + h).ravel()
    return _kernels.lawson_final(ef, eh, flat, k1, k2, k3, k4, h).reshape(shape)


def _step_plan(t_end: float, dt: float) -> tuple[int, float]:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt!r}")
    if t_end < 0:
        raise ValueError("end time must be non-negative")
    steps = max(1, int(math.ceil(t_end / dt - 1e-9))) if t_end > 0 else 0
    return steps, (t_end / steps if steps else 0.0)


class _BlowupGuard:
    def __init__(self, initial: np.ndarray, what: str):
        self.limit = BLOWUP_FACTOR * max(float(np.max(np.abs(initial))), 1e-300)
        self.what = what

    def check(self, values: np.ndarray, time: float) -> None:
        peak = float(np.max(np.abs(values)))
        if not np.isfinite(peak) or (peak > self.limit and peak > 1e-12):
            raise SolverAbort(f"{self.what}: blow-up at time {time:.6g} (max {peak:.3e}, limit {self.limit:.3e})")


def kdv_evolve(w0: Field, chirality: str, t_end: float, dt: float, store_every: int = 1) -> "Trajectory":
    """Integrate the KdV equation in slow time with integrating-factor RK4.

    Returns snapshots every ``store_every`` steps, always including the end.
    """
    sign = _direction(chirality)
    ops = w0.grid.ops()
    lin = _kdv_linear(ops, sign)
    dk1 = ops.dk(1)

    def nonlinear(vh, _t):
        return -0.75 * sign * dk1 * ops.unpad_spectrum(ops.pad_spectrum(vh) ** 2)

    steps, h = _step_plan(t_end, dt)
    vh = ops.rfft(w0.values)
    guard = _BlowupGuard(w0.values, "kdv_evolve")
    times, states = [0.0], [w0]
    for i in range(1, steps + 1):
        vh = _lawson_rk4(vh, lin, h, nonlinear, (i - 1) * h)
        if i % store_every == 0 or i == steps:
            vals = ops.irfft(vh)
            guard.check(vals, i * h)
            times.append(i * h)
            states.append(Field(w0.grid, vals))
    return Trajectory(np.array(times), states, "T", {"scheme": "IF-RK4", "dt": h, "chirality": chirality})


def dtt_flux(w: Field) -> Field:
    """Antiderivative of the second slow-time derivative of a KdV profile.

    ``W''''/36 + 3 W^3/4 + W W''/2 + W'^2/8``; the same for both chiralities.
    """
    ops = w.grid.ops()
    d = ops.diffs(w.values, (1, 2, 4))
    wp, w1p, w2p = ops.pad(w.values), ops.pad(d[1]), ops.pad(d[2])
    nonlin = ops.unpad(0.75 * wp ** 3 + 0.5 * wp * w2p + 0.125 * w1p ** 2)
    return Field(w.grid, d[4] / 36.0 + nonlin)


def dTT_closed_form(w: Field, chirality: str) -> Field:
    """Second slow-time derivative of a KdV solution, as a perfect beta-derivative.

    Equals the second beta-derivative of :func:`dtt_flux`; its first derivative
    is the antiderivative term entering ``J``.
    """
    _direction(chirality)
    _warn_if_unresolved(w, "dTT_closed_form")
    ops = w.grid.ops()
    return Field(w.grid, ops.diff(dtt_flux(w).values, 2))


# driving terms --------------------------------------------------------------------

def j_flux(profile: Field, phi: Field) -> Field:
    """Flux ``j`` with ``J = d/dbeta j`` for the linearized-KdV driving term."""
    if phi.grid != profile.grid:
        raise ValueError("profile and phi must share a grid")
    ops = profile.grid.ops()
    d = ops.diffs(profile.values, (1, 2, 4))
    w, w1, w2, ph = (ops.pad(x) for x in (profile.values, d[1], d[2], phi.values))
    nonlin = ops.unpad(3.0 * w * ph + 7.0 / 12.0 * w ** 3 + 11.0 / 6.0 * w * w2 + 13.0 / 24.0 * w1 ** 2)
    return Field(profile.grid, nonlin + 19.0 / 180.0 * d[4] + ops.diff(phi.values, 2) / 3.0)


def j_driving(chirality: str, profile: Field, phi: Field) -> Field:
    """``J`` for the driven linearized KdV equation of the given chirality.

    Both chiralities share one form: ``3(W phi)' + 4 W^2 W' + 7/3 W W''' +
    11/3 W' W'' + 2/15 W^(5) + phi'''/3`` minus the beta-antiderivative of the
    second slow-time derivative of ``W``.
    """
    _direction(chirality)
    ops = profile.grid.ops()
    return Field(profile.grid, ops.diff(j_flux(profile, phi).values, 1))


def j_driving_termwise(chirality: str, profile: Field, phi: Field) -> Field:
    """Term-by-term evaluation of :func:`j_driving`, kept as an independent check."""
    _direction(chirality)
    ops = profile.grid.ops()
    d = ops.diffs(profile.values, range(6))
    w = profile.values

    def prod(*xs):
        out = ops.pad(xs[0])
        for x in xs[1:]:
            out = out * ops.pad(x)
        return ops.unpad(out)

    total = 3.0 * ops.diff(prod(w, phi.values), 1)
    total += 4.0 * prod(w, w, d[1])
    total += 7.0 / 3.0 * prod(w, d[3])
    total += 11.0 / 3.0 * prod(d[1], d[2])
    total += 2.0 / 15.0 * d[5]
    total += ops.diff(phi.values, 3) / 3.0
    dtt = d[5] / 36.0 + 9.0 / 4.0 * prod(w, w, d[1]) + 0.5 * prod(w, d[3]) + 0.75 * prod(d[1], d[2])
    return Field(profile.grid, total - dtt)


# trajectories -----------------------------------------------------------------------

@dataclass
class Trajectory:
    """Snapshots at strictly increasing times.

    ``states`` holds :class:`Field`, :class:`ModulationState` or tuples of
    fields. ``time_name`` records which clock the times refer to.
    """

    times: np.ndarray
    states: list
    time_name: str = "T"
    meta: dict = dc_field(default_factory=dict)
    _splines: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or self.times.size != len(self.states):
            raise ValueError("times and states must have equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self):
        return self.states[-1]

    def _stack(self, key) -> np.ndarray:
        def pick(state):
            if key is None:
                return state.values
            if isinstance(key, int):
                return state[key].values
            return getattr(state, key).values

        return np.stack([pick(s) for s in self.states])

    def sample(self, time: float, key=None) -> np.ndarray:
        """Cubic-spline interpolation of the snapshots in time."""
        lo, hi = self.times[0], self.times[-1]
        slack = 1e-9 * max(1.0, abs(hi))
        if time < lo - slack or time > hi + slack:
            raise SolverAbort(f"trajectory covers [{lo:g}, {hi:g}] in {self.time_name}, asked for {time:g}")
        if len(self.states) == 1:
            return self._stack(key)[0]
        if key not in self._splines:
            self._splines[key] = CubicSpline(self.times, self._stack(key), axis=0)
        return self._splines[key](min(max(time, lo), hi))

    def field_at(self, time: float, key=None) -> Field:
        first = self.states[0]
        grid = first.grid if key is None else (first[key].grid if isinstance(key, int) else getattr(first, key).grid)
        return Field(grid, self.sample(time, key))

    def save(self, directory: str | Path) -> Path:
        """Write binary field files plus ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        kind = "field"
        for i, state in enumerate(self.states):
            if isinstance(state, Field):
                name = f"state_{i:05d}.bin"
                write_binary(state, directory / name)
                files.append(name)
            elif isinstance(state, ModulationState):
                kind = "modulation"
                entry = {}
                for comp in COMPONENTS:
                    name = f"state_{i:05d}_{comp}.bin"
                    write_binary(getattr(state, comp), directory / name)
                    entry[comp] = name
                entry["tau"] = state.tau
                entry["eps"] = state.eps
                files.append(entry)
            else:
                kind = "tuple"
                names = []
                for j, f in enumerate(state):
                    name = f"state_{i:05d}_{j}.bin"
                    write_binary(f, directory / name)
                    names.append(name)
                files.append(names)
        grid = self._grid()
        manifest = {
            "kind": kind,
            "time_name": self.time_name,
            "times": self.times.tolist(),
            "grid": {"n": grid.n, "length": grid.length, "origin": grid.origin},
            "files": files,
            "meta": self.meta,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    def _grid(self) -> Grid:
        s = self.states[0]
        if isinstance(s, Field):
            return s.grid
        if isinstance(s, ModulationState):
            return s.grid
        return s[0].grid

    @classmethod
    def load(cls, directory: str | Path) -> "Trajectory":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        states = []
        for entry in manifest["files"]:
            if manifest["kind"] == "field":
                states.append(read_binary(directory / entry))
            elif manifest["kind"] == "modulation":
                fields = {c: read_binary(directory / entry[c]) for c in COMPONENTS}
                states.append(ModulationState(eps=entry["eps"], tau=entry["tau"], **fields))
            else:
                states.append(tuple(read_binary(directory / name) for name in entry))
        return cls(np.array(manifest["times"]), states, manifest["time_name"], manifest.get("meta", {}))


# laboratory-frame state ---------------------------------------------------------------

@dataclass(frozen=True)
class ModulationState:
    """All modulation functions sampled on the laboratory beta-grid at fast time ``tau``.

    ``kdv_right`` is sampled at ``beta - tau`` and ``kdv_left`` at ``beta + tau``
    (slow time ``eps^2 tau``); the same convention applies to ``lin_right`` and
    ``lin_left``. ``Pminus``/``Pplus`` are the
    transport components; the wave-equation solution is carried as its two
    characteristic halves ``Wplus``/``Wminus``.
    """

    eps: float
    tau: float
    kdv_right: Field
    kdv_left: Field
    lin_right: Field
    lin_left: Field
    Pminus: Field
    Pplus: Field
    Wplus: Field
    Wminus: Field

    def __post_init__(self) -> None:
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps!r}")
        grid = self.kdv_right.grid
        for name in COMPONENTS:
            if getattr(self, name).grid != grid:
                raise ValueError(f"component {name} lives on a different grid")

    @property
    def grid(self) -> Grid:
        return self.kdv_right.grid

    @property
    def slow_time(self) -> float:
        return self.eps ** 2 * self.tau

    @property
    def transport(self) -> Field:
        return self.Pminus + self.Pplus

    @property
    def W3(self) -> Field:
        return self.Wplus + self.Wminus

    @property
    def W3dot(self) -> Field:
        return Field(self.grid, self.grid.ops().diff(self.Wplus.values - self.Wminus.values, 1))

    def comoving(self, name: str) -> Field:
        """Pull a laboratory component back to its comoving coordinate."""
        shifts = {"kdv_right": self.tau, "lin_right": self.tau, "Pminus": self.tau, "kdv_left": -self.tau, "lin_left": -self.tau, "Pplus": -self.tau}
        if name not in shifts:
            raise KeyError(f"{name} has no comoving representation")
        return apply(builtin_symbol("shift", shifts[name]), getattr(self, name))

    @property
    def phiMinus(self) -> Field:
        return self.comoving("Pminus")

    @property
    def phiPlus(self) -> Field:
        return self.comoving("Pplus")

    def spectra(self) -> np.ndarray:
        ops = self.grid.ops()
        return np.stack([ops.rfft(getattr(self, c).values) for c in COMPONENTS])

    @classmethod
    def from_spectra(cls, grid: Grid, eps: float, tau: float, spectra: np.ndarray) -> "ModulationState":
        ops = grid.ops()
        vals = ops.irfft(spectra)
        return cls(eps, tau, **{c: Field(grid, vals[i]) for i, c in enumerate(COMPONENTS)})

    @classmethod
    def initial(
        cls,
        eps: float,
        kdv_right: Field,
        kdv_left: Field,
        lin_right: Field | None = None,
        lin_left: Field | None = None,
        Pminus: Field | None = None,
        Pplus: Field | None = None,
    ) -> "ModulationState":
        """State at ``tau = 0`` with the wave-equation part at rest."""
        zero = Field.zeros(kdv_right.grid)
        return cls(
            eps, 0.0, kdv_right, kdv_left, lin_right or zero, lin_left or zero, Pminus or zero, Pplus or zero, zero, zero
        )

    def norms(self, s: float = 0.0) -> dict[str, float]:
        out = {c: getattr(self, c).norm(s) for c in ("kdv_right", "kdv_left", "lin_right", "lin_left", "Pminus", "Pplus")}
        out["W3"] = self.W3.norm(s)
        return out

    def boundary_magnitude(self) -> float:
        """Largest sample near the domain ends, over every component."""
        edge = max(2, self.grid.n // 64)
        return max(
            float(np.max(np.abs(np.concatenate([getattr(self, c).values[:edge], getattr(self, c).values[-edge:]]))))
            for c in COMPONENTS
        )


# coupled hierarchy -------------------------------------------------------------------

def hierarchy_linear(ops: SpectralOps, eps: float) -> np.ndarray:
    """Diagonal linear part of the laboratory-frame hierarchy, one row per component."""
    k = ops.k
    right = -1j * k + 1j * eps ** 2 * k ** 3 / 6.0
    left = -right
    rows = [right, left, right, left, -1j * k, 1j * k, 1j * k, -1j * k]
    lin = np.stack(rows).astype(complex)
    lin[:, -1] = lin[:, -1].real  # odd symbols vanish at the Nyquist mode
    return lin


def hierarchy_nonlinear(xh: np.ndarray, eps: float, ops: SpectralOps, corrections: bool = True) -> np.ndarray:
    """Non-diagonal part of the hierarchy for spectra of shape ``(8, jets, n//2+1)``.

    The middle axis carries normalized Taylor coefficients in ``tau``; products
    are truncated Cauchy products, so the same code serves plain time stepping
    (one coefficient) and the jet recursion.
    """
    e2 = eps ** 2
    d1, d2, d3, d4 = (ops.dk(m) for m in (1, 2, 3, 4))
    pad, unpad = ops.pad_spectrum, ops.unpad_spectrum
    Uh, Vh, Fh, Gh, Pmh, Pph = xh[:6]
    out = np.zeros_like(xh)

    u, u1, u2 = pad(Uh), pad(Uh * d1), pad(Uh * d2)
    v, v1, v2 = pad(Vh), pad(Vh * d1), pad(Vh * d2)
    uu, vv = _mul(u, u), _mul(v, v)
    out[0] = e2 * d1 * unpad(-0.75 * uu)
    out[1] = e2 * d1 * unpad(0.75 * vv)
    if not corrections:
        return out

    f, g, pm, pp = pad(Fh), pad(Gh), pad(Pmh), pad(Pph)
    uv = _mul(u, v)
    jm = unpad(3.0 * _mul(u, pm) + 7.0 / 12.0 * _mul(uu, u) + 11.0 / 6.0 * _mul(u, u2) + 13.0 / 24.0 * _mul(u1, u1))
    jm += 19.0 / 180.0 * Uh * d4 + Pmh * d2 / 3.0
    jp = unpad(3.0 * _mul(v, pp) + 7.0 / 12.0 * _mul(vv, v) + 11.0 / 6.0 * _mul(v, v2) + 13.0 / 24.0 * _mul(v1, v1))
    jp += 19.0 / 180.0 * Vh * d4 + Pph * d2 / 3.0
    out[2] = e2 * d1 * (unpad(-1.5 * _mul(u, f)) - 0.5 * jm)
    out[3] = e2 * d1 * (unpad(1.5 * _mul(v, g)) + 0.5 * jp)

    uvh = unpad(uv)
    out[4] = -1.5 * d1 * uvh
    out[5] = 1.5 * d1 * uvh

    js = _mul(u, 3.0 * g + 3.0 * pp + 4.0 * vv + 7.0 / 3.0 * v2)
    js += _mul(v, 3.0 * f + 3.0 * pm + 4.0 * uu + 7.0 / 3.0 * u2)
    js += 4.0 * _mul(u1, v1)
    duv = _mul(u1, v) + _mul(u, v1)
    source = unpad(2.25 * _mul(u + v, duv)) + 0.5 * d3 * uvh - d1 * unpad(js)
    out[6] = 0.5 * source
    out[7] = -0.5 * source
    return out


def hierarchy_rhs(state: ModulationState, corrections: bool = True) -> np.ndarray:
    """``d/dtau`` of every laboratory component, as spectra of shape ``(8, n//2+1)``."""
    ops = state.grid.ops()
    xh = state.spectra()
    lin = hierarchy_linear(ops, state.eps)
    return lin * xh + hierarchy_nonlinear(xh[:, None, :], state.eps, ops, corrections)[:, 0, :]


def hierarchy_jets(state: ModulationState, order: int, corrections: bool = True) -> np.ndarray:
    """Normalized ``tau``-Taylor coefficients of every component up to ``order``.

    Returns spectra of shape ``(8, order + 1, n//2+1)``; coefficient ``j`` is
    ``d^j/dtau^j X / j!`` at the state's time.
    """
    ops = state.grid.ops()
    lin = hierarchy_linear(ops, state.eps)
    jets = np.zeros((len(COMPONENTS), order + 1, ops.k.size), dtype=complex)
    jets[:, 0] = state.spectra()
    if not corrections:
        jets[2:, 0] = 0.0
    for j in range(order):
        nl = hierarchy_nonlinear(jets, state.eps, ops, corrections)[:, j]
        jets[:, j + 1] = (lin * jets[:, j] + nl) / (j + 1)
    return jets


@dataclass(frozen=True)
class HierarchyMonitor:
    """Per-snapshot diagnostics recorded by :func:`evolve_hierarchy`."""

    tau: float
    norms: dict
    boundary: float


def evolve_hierarchy(
    initial: ModulationState,
    tau_end: float,
    dtau: float,
    store_every: int = 1,
    corrections: bool = True,
    norm_index: float = 0.0,
    on_snapshot: Callable[[ModulationState], None] | None = None,
    keep_states: bool = True,
) -> Trajectory:
    """Advance the coupled laboratory-frame hierarchy in ``tau``.

    All components share one integrating-factor RK4 step: the linear
    transport/dispersion symbols are propagated exactly and the couplings are
    handled by RK4. With ``corrections=False`` only ``kdv_right`` and ``kdv_left`` evolve.
    """
    grid, eps = initial.grid, initial.eps
    ops = grid.ops()
    lin = hierarchy_linear(ops, eps)

    def nonlinear(xh, _t):
        return hierarchy_nonlinear(xh[:, None, :], eps, ops, corrections)[:, 0, :]

    steps, h = _step_plan(tau_end - initial.tau, dtau)
    xh = initial.spectra()
    if not corrections:
        xh[2:] = 0.0
    start = initial if corrections else ModulationState.from_spectra(grid, eps, initial.tau, xh)
    guard = _BlowupGuard(np.concatenate([start.kdv_right.values, start.kdv_left.values]), "evolve_hierarchy")
    corr_scale = max(1.0, *(float(np.max(np.abs(getattr(start, c).values))) for c in COMPONENTS[2:]))
    times, states, monitors = [start.tau], [start] if keep_states else [], []
    monitors.append(HierarchyMonitor(start.tau, start.norms(norm_index), start.boundary_magnitude()))
    if on_snapshot:
        on_snapshot(start)
    for i in range(1, steps + 1):
        xh = _lawson_rk4(xh, lin, h, nonlinear, initial.tau + (i - 1) * h)
        if i % store_every == 0 or i == steps:
            tau = initial.tau + i * h
            state = ModulationState.from_spectra(grid, eps, tau, xh)
            guard.check(np.concatenate([state.kdv_right.values, state.kdv_left.values]), tau)
            corr_peak = max(float(np.max(np.abs(getattr(state, c).values))) for c in COMPONENTS[2:])
            if not np.isfinite(corr_peak) or corr_peak > 1e6 * corr_scale:
                raise SolverAbort(f"evolve_hierarchy: correction fields blew up at tau={tau:.6g}")
            times.append(tau)
            if keep_states:
                states.append(state)
            monitors.append(HierarchyMonitor(tau, state.norms(norm_index), state.boundary_magnitude()))
            if on_snapshot:
                on_snapshot(state)
    if not keep_states:
        states = [state if steps else start]
        times = [times[-1]]
    meta = {"scheme": "IF-RK4", "dtau": h, "eps": eps, "corrections": corrections, "monitors": monitors}
    return Trajectory(np.array(times), states, "tau", meta)


def advance(state: ModulationState, dtau: float, corrections: bool = True) -> ModulationState:
    """Single IF-RK4 step of signed length ``dtau`` (negative steps run backwards)."""
    ops = state.grid.ops()
    lin = hierarchy_linear(ops, state.eps)

    def nonlinear(xh, _t):
        return hierarchy_nonlinear(xh[:, None, :], state.eps, ops, corrections)[:, 0, :]

    xh = state.spectra()
    if not corrections:
        xh[2:] = 0.0
    return ModulationState.from_spectra(state.grid, state.eps, state.tau + dtau, _lawson_rk4(xh, lin, dtau, nonlinear, state.tau))


# standalone solvers on comoving grids ---------------------------------------------------

@dataclass(frozen=True)
class TransportSnapshot:
    Pminus: Field
    Pplus: Field
    phiMinus: Field
    phiPlus: Field

    def __iter__(self):
        return iter((self.Pminus, self.Pplus, self.phiMinus, self.phiPlus))

    def __getitem__(self, i):
        return (self.Pminus, self.Pplus, self.phiMinus, self.phiPlus)[i]

    @property
    def grid(self) -> Grid:
        return self.Pminus.grid


def _shifted(ops: SpectralOps, values: np.ndarray, c: float) -> np.ndarray:
    return ops.irfft(ops.rfft(values) * np.exp(1j * ops.k * c))


def _lab_profiles(u_traj: Trajectory, v_traj: Trajectory, eps: float, tau: float, ops: SpectralOps):
    slow_time = eps ** 2 * tau
    u = _shifted(ops, u_traj.sample(slow_time), -tau)
    v = _shifted(ops, v_traj.sample(slow_time), tau)
    return u, v


def transport_evolve(
    u_traj: Trajectory, v_traj: Trajectory, eps: float, tau_end: float, dtau: float = 0.01, store_every: int = 1
) -> Trajectory:
    """Transport components driven by comoving KdV trajectories of the two directions.

    Duhamel form in spectral space: the shift semigroup is applied exactly and
    the shifted source is integrated with Simpson weights (integrating-factor
    RK4 with a state-independent source).
    """
    grid = u_traj.states[0].grid
    ops = grid.ops()
    d1 = ops.dk(1)
    lin = np.stack([-1j * ops.k, 1j * ops.k])
    lin[:, -1] = 0.0

    def source(_xh, tau):
        u, v = _lab_profiles(u_traj, v_traj, eps, tau, ops)
        uvh = ops.unpad_spectrum(ops.pad(u) * ops.pad(v))
        return np.stack([-1.5 * d1 * uvh, 1.5 * d1 * uvh])

    steps, h = _step_plan(tau_end, dtau)
    xh = np.zeros((2, ops.k.size), dtype=complex)

    def snapshot(tau):
        pm, pp = ops.irfft(xh)
        return TransportSnapshot(
            Field(grid, pm), Field(grid, pp), Field(grid, _shifted(ops, pm, tau)), Field(grid, _shifted(ops, pp, -tau))
        )

    times, states = [0.0], [snapshot(0.0)]
    for i in range(1, steps + 1):
        xh = _lawson_rk4(xh, lin, h, source, (i - 1) * h)
        if i % store_every == 0 or i == steps:
            times.append(i * h)
            states.append(snapshot(i * h))
    return Trajectory(np.array(times), states, "tau", {"scheme": "IF-RK4", "dtau": h, "eps": eps})


def linkdv_evolve(
    F0: Field,
    G0: Field,
    u_traj: Trajectory | None,
    v_traj: Trajectory | None,
    phim_traj: Trajectory | None,
    phip_traj: Trajectory | None,
    t_end: float,
    dt: float,
    store_every: int = 1,
    driving: Callable[[float], tuple[np.ndarray, np.ndarray]] | None = None,
) -> Trajectory:
    """Driven linearized KdV pair in slow time on comoving grids.

    ``-2 F_T = F'''/3 + 3 (U F)' + J-`` and ``2 G_T = G'''/3 + 3 (V G)' + J+``.
    Backgrounds are comoving trajectories in ``T`` (``None`` means zero).
    ``driving`` overrides the computed ``(J-, J+)`` with a function of ``T``.
    """
    grid = F0.grid
    ops = grid.ops()
    d1 = ops.dk(1)
    zero = np.zeros(grid.n)
    lin = np.stack([_kdv_linear(ops, 1), _kdv_linear(ops, -1)])

    def background(traj, slow_time):
        return zero if traj is None else traj.sample(slow_time)

    def nonlinear(xh, slow_time):
        u, v = background(u_traj, slow_time), background(v_traj, slow_time)
        f, g = ops.irfft(xh)
        if driving is not None:
            jm, jp = (ops.rfft(x) for x in driving(slow_time))
        else:
            phim, phip = background(phim_traj, slow_time), background(phip_traj, slow_time)
            jm = d1 * ops.rfft(j_flux(Field(grid, u), Field(grid, phim)).values)
            jp = d1 * ops.rfft(j_flux(Field(grid, v), Field(grid, phip)).values)
        uf = ops.unpad_spectrum(ops.pad(u) * ops.pad(f))
        vg = ops.unpad_spectrum(ops.pad(v) * ops.pad(g))
        return np.stack([-1.5 * d1 * uf - 0.5 * jm, 1.5 * d1 * vg + 0.5 * jp])

    steps, h = _step_plan(t_end, dt)
    xh = np.stack([ops.rfft(F0.values), ops.rfft(G0.values)])
    guard = _BlowupGuard(np.concatenate([F0.values, G0.values, [1.0]]), "linkdv_evolve")
    times, states = [0.0], [(F0, G0)]
    for i in range(1, steps + 1):
        xh = _lawson_rk4(xh, lin, h, nonlinear, (i - 1) * h)
        if i % store_every == 0 or i == steps:
            f, g = ops.irfft(xh)
            guard.check(np.concatenate([f, g]), i * h)
            times.append(i * h)
            states.append((Field(grid, f), Field(grid, g)))
    return Trajectory(np.array(times), states, "T", {"scheme": "IF-RK4", "dt": h})


def wave_source(state: ModulationState) -> Field:
    """Right-hand side ``S`` of ``W3_tautau - W3_betabeta = d/dbeta S`` for a laboratory state."""
    ops = state.grid.ops()
    xh = state.spectra()[:, None, :]
    nl = hierarchy_nonlinear(xh, state.eps, ops, True)
    return Field(state.grid, ops.irfft(2.0 * nl[6, 0]))


def w3_evolve(traj: Trajectory, eps: float, tau_end: float | None = None) -> Trajectory:
    """Wave-equation component from a stored hierarchy trajectory (uniform tau spacing).

    Per mode the d'Alembert-Duhamel integral is split into its two
    characteristic halves, each propagated exactly between snapshots with the
    source integrated by Simpson's rule over pairs of intervals. Starts from
    rest at the first snapshot.
    """
    times = traj.times
    if tau_end is not None:
        keep = times <= tau_end + 1e-12
        times = times[keep]
    steps = times.size - 1
    if steps < 2 or steps % 2:
        raise ValueError("w3_evolve needs an even number (>= 2) of uniformly spaced intervals")
    h = times[1] - times[0]
    if not np.allclose(np.diff(times), h, rtol=1e-9, atol=1e-12):
        raise ValueError("w3_evolve needs uniformly spaced snapshots")
    grid = traj.states[0].grid
    ops = grid.ops()
    k = ops.k
    sources = [ops.rfft(wave_source(traj.states[i]).values) for i in range(steps + 1)]
    wp = np.zeros(k.size, dtype=complex)
    wm = np.zeros(k.size, dtype=complex)
    ep_full, ep_half = np.exp(2j * k * h), np.exp(1j * k * h)
    em_full, em_half = np.conj(ep_full), np.conj(ep_half)

    def snapshot(wp, wm):
        w3 = ops.irfft(wp + wm)
        w3dot = ops.irfft(ops.dk(1) * (wp - wm))
        return Field(grid, w3), Field(grid, w3dot)

    out_t, out_s = [times[0]], [snapshot(wp, wm)]
    for i in range(0, steps, 2):
        s0, s1, s2 = sources[i], sources[i + 1], sources[i + 2]
        wp = ep_full * wp + (2 * h / 6.0) * 0.5 * (ep_full * s0 + 4.0 * ep_half * s1 + s2)
        wm = em_full * wm - (2 * h / 6.0) * 0.5 * (em_full * s0 + 4.0 * em_half * s1 + s2)
        out_t.append(times[i + 2])
        out_s.append(snapshot(wp, wm))
    return Trajectory(np.array(out_t), out_s, "tau", {"scheme": "sine-kernel Simpson", "dtau": 2 * h, "eps": eps})


def w3_direct_quadrature(sources: np.ndarray, times: np.ndarray, grid: Grid) -> Field:
    """Reference W3 at the last time via the sine kernel and trapezoid quadrature.

    ``sources`` holds physical samples of ``S`` (rows = times); the result is
    ``sum_j w_j sin(k (t - s_j))/k * (i k S_j)`` with the ``k -> 0`` limit. Slow
    but independent of :func:`w3_evolve`.
    """
    ops = grid.ops()
    k = ops.k
    t_end = times[-1]
    weights = np.full(times.size, times[1] - times[0])
    weights[[0, -1]] *= 0.5
    acc = np.zeros(k.size, dtype=complex)
    for w, s, tj in zip(weights, sources, times):
        lag = t_end - tj
        # sin(k lag)/k * i k = i sin(k lag)
        acc += w * 1j * np.sin(k * lag) * ops.rfft(s)
    return Field(grid, ops.irfft(acc))
