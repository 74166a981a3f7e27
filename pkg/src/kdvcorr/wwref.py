"""Reference time stepper for the truncated Lagrangian water-wave system.

The normal-velocity operator is truncated to ``K0 + K1(z, y)``. The implicit
equation for ``du/dt`` is solved by fixed-point iteration on

    (1 + L z) du + y' (K0 + K1(z, y)) du = -y' (1 + K1(dz, dy) u)

where ``K1(dz, dy) u`` is the time derivative of ``K1`` along the flow.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import SolverAbort, ValidityError
from .modulation import Trajectory
from .residual import k1_apply_array
from .spectral import Field, Grid, SpectralOps, dispersion_symbol, inverse_dispersion_symbol

FIXED_POINT_TOL = 1e-12
FIXED_POINT_MAX_ITER = 50
VALIDITY_FLOOR = 0.5


@dataclass(frozen=True)
class WWState:
    t: float
    z: Field
    y: Field
    u: Field

    def __post_init__(self) -> None:
        if not (self.z.grid == self.y.grid == self.u.grid):
            raise ValueError("z, y and u must share a grid")

    @property
    def grid(self) -> Grid:
        return self.z.grid

    def arrays(self) -> np.ndarray:
        return np.stack([self.z.values, self.y.values, self.u.values])

    @classmethod
    def from_arrays(cls, grid: Grid, t: float, arr: np.ndarray) -> "WWState":
        return cls(t, Field(grid, arr[0]), Field(grid, arr[1]), Field(grid, arr[2]))

    @classmethod
    def from_frame(cls, frame) -> "WWState":
        return cls(frame.t, frame.psi_z, frame.psi_y, frame.psi_u)

    def validity_margin(self) -> float:
        ops = self.grid.ops()
        return float((1.0 + ops.multiply(self.z.values, dispersion_symbol(ops.k))).min())


@dataclass
class SolveInfo:
    iterations: int = 0
    final_update: float = 0.0
    defect: float = float("nan")


def _normal_velocity(ops: SpectralOps, zy: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``(K0 + K1(z, y)) u`` with ``zy = z + y``."""
    return ops.multiply(u, ops.symbol("K0")) + k1_apply_array(ops, zy, u)


def ww_rhs_arrays(ops: SpectralOps, arr: np.ndarray, info: SolveInfo | None = None, check_defect: bool = False) -> np.ndarray:
    z, y, u = arr
    zy = z + y
    k0 = ops.symbol("K0")
    dz = ops.multiply(u, k0)
    dy = dz + k1_apply_array(ops, zy, u)
    denom = 1.0 + ops.multiply(z, dispersion_symbol(ops.k))
    margin = float(denom.min())
    if margin < VALIDITY_FLOOR:
        raise ValidityError(f"1 + L z dropped to {margin:.3f} < {VALIDITY_FLOOR}")
    b = k1_apply_array(ops, dz + dy, u)
    slope = ops.diff(y, 1)
    slope_p = np.ascontiguousarray(ops.pad(slope))
    denom_p = np.ascontiguousarray(ops.pad(denom))
    rhs_p = np.ascontiguousarray(-slope_p * (1.0 + ops.pad(b)))
    current_p = rhs_p / denom_p
    du = ops.unpad(current_p)
    scale = max(float(np.max(np.abs(du))), 1e-300)
    for it in range(1, FIXED_POINT_MAX_ITER + 1):
        coupled_p = np.ascontiguousarray(ops.pad(_normal_velocity(ops, zy, du)))
        new_p, change = _kernels.fixed_point_update(rhs_p, slope_p, coupled_p, denom_p, current_p)
        current_p = new_p
        du = ops.unpad(new_p)
        if change <= FIXED_POINT_TOL * scale:
            break
    else:
        raise SolverAbort(f"fixed-point solve for du/dt did not converge in {FIXED_POINT_MAX_ITER} iterations")
    if info is not None:
        info.iterations = it
        info.final_update = change / scale
        if check_defect:
            lhs = ops.unpad(denom_p * ops.pad(du) + slope_p * ops.pad(_normal_velocity(ops, zy, du)))
            info.defect = float(np.sqrt(np.mean((lhs - ops.unpad(rhs_p)) ** 2)))
    return np.stack([dz, dy, du])


def ww_rhs(state: WWState, info: SolveInfo | None = None) -> tuple[Field, Field, Field]:
    """Time derivatives ``(dz, dy, du)`` of a water-wave state."""
    ops = state.grid.ops()
    out = ww_rhs_arrays(ops, state.arrays(), info, check_defect=info is not None)
    g = state.grid
    return Field(g, out[0]), Field(g, out[1]), Field(g, out[2])


def energy(state: WWState) -> float:
    """Quadratic energy ``(1/2) int y^2 + (1/2) <u, -L^{-1} u>`` (exact for the linear flow)."""
    ops = state.grid.ops()
    weight = -inverse_dispersion_symbol(ops.k)
    uh = ops.rfft(state.u.values)
    w = np.full(uh.size, 2.0)
    w[0] = w[-1] = 1.0
    u_part = float(np.sum(w * weight * np.abs(uh) ** 2)) / ops.n ** 2 * state.grid.length
    return 0.5 * float(np.sum(state.y.values ** 2)) * state.grid.spacing + 0.5 * u_part


def rk4_step(ops: SpectralOps, arr: np.ndarray, dt: float, info: SolveInfo | None = None) -> np.ndarray:
    k1 = ww_rhs_arrays(ops, arr, info)
    k2 = ww_rhs_arrays(ops, arr + 0.5 * dt * k1)
    k3 = ww_rhs_arrays(ops, arr + 0.5 * dt * k2)
    k4 = ww_rhs_arrays(ops, arr + dt * k3)
    return arr + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def cfl_limit(grid: Grid) -> float:
    """Largest RK4 step allowed by ``dt * max omega <= 1.5``."""
    kmax = float(np.max(np.abs(grid.rwavenumbers)))
    return 1.5 / math.sqrt(kmax * math.tanh(kmax))


def ww_evolve(
    init: WWState,
    t_end: float,
    dt: float,
    store_every: int = 1,
    on_snapshot: Callable[[WWState], None] | None = None,
) -> Trajectory:
    """Classical RK4 integration with energy, validity and blow-up monitoring."""
    grid = init.grid
    ops = grid.ops()
    if dt > cfl_limit(grid) * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds the dispersion CFL limit {cfl_limit(grid):.4g}")
    steps = max(0, int(round((t_end - init.t) / dt)))
    if steps and not math.isclose(init.t + steps * dt, t_end, rel_tol=1e-9, abs_tol=1e-12):
        steps = int(math.ceil((t_end - init.t) / dt))
    h = (t_end - init.t) / steps if steps else 0.0
    arr = init.arrays()
    peak0 = max(float(np.max(np.abs(arr))), 1e-300)
    e0 = energy(init)
    info = SolveInfo()
    times, states = [init.t], [init]
    energies, iterations = [e0], [0]
    if on_snapshot:
        on_snapshot(init)
    for i in range(1, steps + 1):
        arr = rk4_step(ops, arr, h, info)
        if not np.all(np.isfinite(arr)) or np.max(np.abs(arr)) > 100.0 * peak0:
            raise SolverAbort(f"ww_evolve: blow-up at t={init.t + i * h:.6g}")
        if i % store_every == 0 or i == steps:
            state = WWState.from_arrays(grid, init.t + i * h, arr)
            times.append(state.t)
            states.append(state)
            energies.append(energy(state))
            iterations.append(info.iterations)
            if on_snapshot:
                on_snapshot(state)
    drift = (max(energies) - min(energies)) / max(abs(e0), 1e-300)
    meta = {"scheme": "RK4", "dt": h, "energy": energies, "energy_drift": drift, "iterations": iterations}
    return Trajectory(np.array(times), states, "t", meta)


# error curves ----------------------------------------------------------------------------

@dataclass
class ErrorCurve:
    times: np.ndarray
    err_z: np.ndarray
    err_y: np.ndarray
    err_u: np.ndarray
    s: float = 4.0
    label: str = ""
    meta: dict = dc_field(default_factory=dict)

    @property
    def combined(self) -> np.ndarray:
        return np.maximum(np.maximum(self.err_z, self.err_y), self.err_u)

    @property
    def sup_err(self) -> np.ndarray:
        return np.maximum.accumulate(self.combined)

    @property
    def sup(self) -> float:
        return float(self.combined.max())

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "err_z", "err_y", "err_u", "combined"])
            for row in zip(self.times, self.err_z, self.err_y, self.err_u, self.combined):
                writer.writerow([repr(float(x)) for x in row])
        return path


def frame_error(state: WWState, frame, s: float) -> tuple[float, float, float]:
    ez = (state.z - frame.psi_z.on(state.grid)).norm(s)
    ey = (state.y - frame.psi_y.on(state.grid)).norm(s)
    eu = (state.u - frame.psi_u.on(state.grid)).norm(s - 0.5)
    return ez, ey, eu


def compare_error(
    traj: Trajectory,
    modulation: Trajectory,
    eps: float,
    s: float = 4.0,
    fidelity: str = "extended",
    label: str = "",
) -> ErrorCurve:
    """Errors between water-wave snapshots and approximants at matching times.

    ``modulation`` is a hierarchy trajectory in ``tau``; every water-wave
    snapshot time ``t`` must have a modulation snapshot at ``tau = eps t``.
    """
    from .approximant import assemble_frame

    taus = modulation.times
    rows = []
    for t, state in zip(traj.times, traj.states):
        j = int(np.argmin(np.abs(taus - eps * t)))
        if abs(taus[j] - eps * t) > 1e-9 * max(1.0, abs(taus[j])):
            raise ValueError(f"no modulation snapshot at tau={eps * t:g} (nearest {taus[j]:g})")
        frame = assemble_frame(modulation.states[j], t, state.grid, fidelity)
        rows.append(frame_error(state, frame, s))
    arr = np.array(rows).reshape(-1, 3)
    return ErrorCurve(np.asarray(traj.times, dtype=float), arr[:, 0], arr[:, 1], arr[:, 2], s, label or fidelity)


def linear_mode_state(grid: Grid, amplitude: float, mode: int, t: float = 0.0) -> WWState:
    """Exact linear travelling wave ``y = z = a cos(k a - w t)`` with its velocity."""
    k = 2.0 * math.pi * mode / grid.length
    omega = math.sqrt(k * math.tanh(k))
    phase = k * (grid.points - grid.origin) - omega * t
    y = amplitude * np.cos(phase)
    u = amplitude * omega / math.tanh(k) * np.cos(phase)
    return WWState(t, Field(grid, y), Field(grid, y), Field(grid, u))


def sup_errors(curves: Sequence[ErrorCurve]) -> np.ndarray:
    return np.array([c.sup for c in curves])
