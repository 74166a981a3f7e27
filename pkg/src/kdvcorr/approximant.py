"""Approximants on the alpha-grid, their time derivatives, and the initial-data map.

Frames are assembled from a laboratory :class:`ModulationState`. Time
derivatives come from Taylor jets of the hierarchy in ``tau`` (see
:func:`kdvcorr.modulation.hierarchy_jets`), so no numerical time differencing
enters a residual.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from .fieldio import sha256_of, write_binary, write_csv
from .modulation import ModulationState, _mul, hierarchy_jets
from .spectral import Field, Grid, SpectralOps, has_vanishing_mean, inverse_dispersion_symbol

FIDELITIES = ("simple", "extended", "kdv-only")
FRAME_FIELDS = ("psi_d", "psi_z", "psi_y", "psi_u")


@dataclass(frozen=True)
class ApproximantFrame:
    """Approximant fields at physical time ``t`` on the alpha-grid.

    ``psi_z`` is ``L^{-1} psi_d``. Time-derivative fields are ``None`` unless
    the frame was built with derivatives.
    """

    t: float
    eps: float
    fidelity: str
    psi_d: Field
    psi_z: Field
    psi_y: Field
    psi_u: Field
    dt_psi_d: Field | None = None
    dt_psi_z: Field | None = None
    dt_psi_y: Field | None = None
    dt_psi_u: Field | None = None
    dtt_psi_y: Field | None = None
    dtt_psi_d: Field | None = None

    @property
    def grid(self) -> Grid:
        return self.psi_d.grid

    @property
    def has_derivatives(self) -> bool:
        return self.dt_psi_y is not None

    def export(self, directory: str | Path, fmt: str = "binary") -> Path:
        """Write every populated field plus ``frame.json`` (t, eps, fidelity, checksums)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for f in dc_fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Field):
                if fmt == "csv":
                    path = write_csv(value, directory / f"{f.name}.csv")
                else:
                    path = write_binary(value, directory / f"{f.name}.bin")
                files[path.name] = sha256_of(path)
        manifest = {"t": self.t, "eps": self.eps, "fidelity": self.fidelity, "files": files}
        (directory / "frame.json").write_text(json.dumps(manifest, indent=2))
        return directory


@dataclass(frozen=True)
class InitialDataMap:
    Theta_y: Field
    Theta_u: Field
    U0: Field
    V0: Field
    F0: Field
    G0: Field
    X1: Field
    X2: Field

    def state(self, eps: float, seed: str = "linkdv") -> ModulationState:
        """Modulation state at ``tau = 0``.

        ``seed="linkdv"`` puts the second-order data into ``lin_right, lin_left`` with
        zero transport; ``seed="transport"`` puts it into the transport components
        and leaves ``lin_right = lin_left = 0``.
        """
        if seed == "linkdv":
            return ModulationState.initial(eps, self.U0, self.V0, lin_right=self.F0, lin_left=self.G0)
        if seed == "transport":
            return ModulationState.initial(eps, self.U0, self.V0, Pminus=self.F0, Pplus=self.G0)
        raise ValueError(f"seed must be 'linkdv' or 'transport', got {seed!r}")


def _anchored_antiderivative(ops: SpectralOps, values: np.ndarray) -> np.ndarray:
    """Periodic antiderivative of a mean-zero function, vanishing at beta = 0."""
    anti = ops.antiderivative(values)
    return anti - ops.evaluate(anti, np.array([0.0]))[0]


def split_initial_data(Theta_y: Field, Theta_u: Field, eps: float) -> InitialDataMap:
    """Map laboratory surface data to modulation initial data and reparameterizations."""
    if Theta_y.grid != Theta_u.grid:
        raise ValueError("profiles must share a grid")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not has_vanishing_mean(Theta_y.values, 1e-10):
        raise ValueError("the height profile must have zero mean for a periodic reparameterization")
    grid = Theta_y.grid
    ops = grid.ops()
    ty, tu = Theta_y.values, Theta_u.values
    u0, v0 = 0.5 * (ty + tu), 0.5 * (ty - tu)
    x1 = -_anchored_antiderivative(ops, u0 + v0)
    d2u, d2v = ops.diff(u0, 2), ops.diff(v0, 2)
    x1p = ops.pad(x1)
    up, vp = ops.pad(u0), ops.pad(v0)
    h_y = ops.unpad(x1p * ops.pad(ops.diff(ty, 1)) - (up + vp) ** 2) - (d2u + d2v) / 3.0
    h_u = ops.unpad(x1p * ops.pad(ops.diff(tu, 1)) - 0.75 * up ** 2 + 0.75 * vp ** 2) - d2u / 6.0 + d2v / 6.0
    f0, g0 = 0.5 * (h_y + h_u), 0.5 * (h_y - h_u)
    x2 = -_anchored_antiderivative(ops, f0 + g0)
    as_field = lambda a: Field(grid, a)
    return InitialDataMap(Theta_y, Theta_u, as_field(u0), as_field(v0), as_field(f0), as_field(g0), as_field(x1), as_field(x2))


def deltas(Z1: Field, Z2: Field, dtauZ1: Field) -> tuple[Field, Field]:
    """Second-order height corrections ``(Delta1, Delta2)`` on the beta-grid."""
    grid = Z1.grid
    if Z2.grid != grid or dtauZ1.grid != grid:
        raise ValueError("inputs must share a grid")
    ops = grid.ops()
    z, z2, zt = ops.pad(Z1.values), ops.pad(Z2.values), ops.pad(dtauZ1.values)
    d = ops.diffs(Z1.values, (1, 2))
    z1p, z2p = ops.pad(d[1]), ops.pad(d[2])
    delta1 = ops.unpad(z * z)
    delta2 = ops.unpad(z1p ** 2 + 2.0 * z * z2 + z ** 3 / 3.0 + 4.0 / 3.0 * z * z2p - 2.0 / 3.0 * zt ** 2)
    return Field(grid, delta1), Field(grid, delta2)


# frame assembly ---------------------------------------------------------------------

def check_alpha_grid(beta: Grid, alpha: Grid, eps: float) -> None:
    scale = 1.0 / eps
    if not math.isclose(alpha.length, beta.length * scale, rel_tol=1e-9):
        raise ValueError(f"alpha period {alpha.length:g} does not equal beta period / eps = {beta.length * scale:g}")
    if not math.isclose(alpha.origin, beta.origin * scale, rel_tol=1e-9, abs_tol=1e-9 * alpha.length):
        raise ValueError("alpha origin does not equal beta origin / eps")


def _frame_jets(state: ModulationState, order: int, fidelity: str) -> dict[str, np.ndarray]:
    """Normalized tau-jets (spectra on the beta-grid) of every frame field."""
    eps = state.eps
    e2, e4, e6 = eps ** 2, eps ** 4, eps ** 6
    ops = state.grid.ops()
    corrections = fidelity != "kdv-only"
    extended = fidelity != "simple"
    depth = order + 1 if extended else order
    jets = hierarchy_jets(state, depth, corrections)
    kdv_right, kdv_left, lin_right, lin_left, Pm, Pp, Wp, Wm = jets
    d1, d2 = ops.dk(1), ops.dk(2)
    pad, unpad = ops.pad_spectrum, ops.unpad_spectrum
    u, v = pad(kdv_right), pad(kdv_left)
    uu, vv = _mul(u, u), _mul(v, v)
    linv = inverse_dispersion_symbol(eps * ops.k)

    W1 = -(kdv_right + kdv_left)
    W2 = -(lin_right + lin_left + Pm + Pp)
    if not extended:
        psi_d = e2 * W1 + e4 * W2
        psi_y = -psi_d + e4 * (d2 * (kdv_right + kdv_left) / 3.0 + unpad(_mul(u + v, u + v)))
        psi_u = e2 * (kdv_right - kdv_left) + e4 * (lin_right - lin_left + Pm - Pp) + e4 * (d2 * (kdv_right - kdv_left) / 6.0 + unpad(0.75 * (uu - vv)))
        return {"psi_d": psi_d, "psi_z": linv * psi_d, "psi_y": psi_y, "psi_u": psi_u}

    psi_d = e2 * W1 + e4 * W2 + e6 * (Wp + Wm)
    psi_z = linv * psi_d
    Z1, Z2 = linv * W1, linv * W2
    z1, z2 = pad(Z1), pad(Z2)
    dtau_z1 = np.zeros_like(z1)
    jet_index = np.arange(1, z1.shape[-2])[:, None]
    dtau_z1[..., :-1, :] = jet_index * z1[..., 1:, :]
    z1b, z1bb = pad(Z1 * d1), pad(Z1 * d2)
    delta1 = unpad(_mul(z1, z1))
    delta2 = unpad(
        _mul(z1b, z1b)
        + 2.0 * _mul(z1, z2)
        + _mul(_mul(z1, z1), z1) / 3.0
        + 4.0 / 3.0 * _mul(z1, z1bb)
        - 2.0 / 3.0 * _mul(dtau_z1, dtau_z1)
    )
    psi_y = psi_z + e4 * delta1 + e6 * delta2

    # fluxes whose beta-derivatives are the tau-derivatives of each component
    f, g, pm_, pp_ = pad(lin_right), pad(lin_left), pad(Pm), pad(Pp)
    u1, u2, v1, v2 = pad(kdv_right * d1), pad(kdv_right * d2), pad(kdv_left * d1), pad(kdv_left * d2)
    q_u = -d2 * kdv_right / 6.0 + unpad(-0.75 * uu)
    q_v = d2 * kdv_left / 6.0 + unpad(0.75 * vv)
    jm = unpad(3.0 * _mul(u, pm_) + 7.0 / 12.0 * _mul(uu, u) + 11.0 / 6.0 * _mul(u, u2) + 13.0 / 24.0 * _mul(u1, u1))
    jm += 19.0 / 180.0 * kdv_right * ops.dk(4) + Pm * d2 / 3.0
    jp = unpad(3.0 * _mul(v, pp_) + 7.0 / 12.0 * _mul(vv, v) + 11.0 / 6.0 * _mul(v, v2) + 13.0 / 24.0 * _mul(v1, v1))
    jp += 19.0 / 180.0 * kdv_left * ops.dk(4) + Pp * d2 / 3.0
    q_f = -d2 * lin_right / 6.0 + unpad(-1.5 * _mul(u, f)) - 0.5 * jm
    q_g = d2 * lin_left / 6.0 + unpad(1.5 * _mul(v, g)) + 0.5 * jp
    flux_u, flux_v = -kdv_right + e2 * q_u, kdv_left + e2 * q_v
    flux_f, flux_g = -lin_right + e2 * q_f, lin_left + e2 * q_g
    if not corrections:
        flux_f = flux_g = np.zeros_like(flux_u)
    psi_u = -e2 * (flux_u + flux_v) - e4 * (flux_f + flux_g + Pp - Pm) + e6 * (Wp - Wm)
    return {"psi_d": psi_d, "psi_z": psi_z, "psi_y": psi_y, "psi_u": psi_u}


def _to_alpha(ops: SpectralOps, spectrum: np.ndarray, alpha: Grid) -> Field:
    values = ops.irfft(spectrum)
    if alpha.n != ops.n:
        values = ops.resample(values, alpha.n)
    return Field(alpha, values)


def assemble_frame(
    state: ModulationState,
    t: float,
    alpha_grid: Grid,
    fidelity: str = "extended",
    derivatives: bool = False,
) -> ApproximantFrame:
    """Approximant at physical time ``t`` from the state at ``tau = eps t``.

    ``fidelity`` is ``simple`` (the explicit second-order sums), ``extended``
    (with the wave-equation term, ``L^{-1}`` and the Delta corrections) or
    ``kdv-only`` (extended assembly with every correction field switched off).
    With ``derivatives=True`` first and second time derivatives are attached.
    """
    if fidelity not in FIDELITIES:
        raise ValueError(f"fidelity must be one of {FIDELITIES}")
    eps = state.eps
    if not math.isclose(state.tau, eps * t, rel_tol=1e-9, abs_tol=1e-9):
        raise ValueError(f"state time tau={state.tau:g} does not match eps*t={eps * t:g}")
    check_alpha_grid(state.grid, alpha_grid, eps)
    ops = state.grid.ops()
    order = 2 if derivatives else 0
    jets = _frame_jets(state, order, fidelity)

    if fidelity != "simple":
        _check_flux_consistency(ops, jets, order)

    def at(name, m):
        return _to_alpha(ops, math.factorial(m) * eps ** m * jets[name][m], alpha_grid)

    kwargs = {name: at(name, 0) for name in FRAME_FIELDS}
    if derivatives:
        kwargs.update(
            dt_psi_d=at("psi_d", 1),
            dt_psi_z=at("psi_z", 1),
            dt_psi_y=at("psi_y", 1),
            dt_psi_u=at("psi_u", 1),
            dtt_psi_y=at("psi_y", 2),
            dtt_psi_d=at("psi_d", 2),
        )
    return ApproximantFrame(t, eps, fidelity, **kwargs)


def _check_flux_consistency(ops: SpectralOps, jets: dict, order: int) -> None:
    """The tau-derivative of psi_d must be a perfect beta-derivative (zero mean)."""
    if order == 0:
        return
    dpsi = ops.irfft(jets["psi_d"][1])
    if not has_vanishing_mean(dpsi / max(np.max(np.abs(dpsi)), 1e-300), 1e-12):
        raise ValueError("time derivative of psi_d has a nonzero mean; termwise antiderivative is invalid")


def time_derivative_closure(state: ModulationState, t: float, alpha_grid: Grid, order: int = 1, fidelity: str = "extended"):
    """Analytic time derivatives of the frame fields.

    ``order=1`` returns ``(dt_psi_d, dt_psi_z, dt_psi_y, dt_psi_u)``;
    ``order=2`` returns ``(dtt_psi_d, dtt_psi_y)``.
    """
    if order not in (1, 2):
        raise ValueError(f"closure order must be 1 or 2, got {order!r}")
    frame = assemble_frame(state, t, alpha_grid, fidelity, derivatives=True)
    if order == 1:
        return frame.dt_psi_d, frame.dt_psi_z, frame.dt_psi_y, frame.dt_psi_u
    return frame.dtt_psi_d, frame.dtt_psi_y


def psi_u_spectral_check(frame: ApproximantFrame) -> float:
    """Max difference between ``psi_u`` and the spectral antiderivative of ``d/dt psi_d`` on nonzero modes."""
    if frame.dt_psi_d is None:
        raise ValueError("frame has no time derivatives")
    ops = frame.grid.ops()
    anti = ops.antiderivative(frame.dt_psi_d.values)
    mean_free = frame.psi_u.values - frame.psi_u.values.mean()
    return float(np.max(np.abs(anti - mean_free)))


def alpha_grid_for(beta: Grid, eps: float) -> Grid:
    return beta.rescaled(1.0 / eps)
