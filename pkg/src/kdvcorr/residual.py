"""Residuals of approximants in the truncated water-wave system, and slope fits."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidityError
from .spectral import Field, SpectralOps, dispersion_symbol

DEFAULT_S = 4.0
DENOMINATOR_FLOOR = 0.5


def _k0(ops: SpectralOps) -> np.ndarray:
    return ops.symbol("K0")


def k1_apply_array(ops: SpectralOps, zy: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``-(z+y) u' - K0((z+y) K0 u')`` for raw samples; ``zy`` holds ``z + y``."""
    uh = ops.rfft(u) * ops.dk(1)
    k0 = _k0(ops)
    zp = ops.pad(zy)
    first = ops.unpad_spectrum(zp * ops.pad_spectrum(uh))
    second = ops.unpad_spectrum(zp * ops.pad_spectrum(k0 * uh))
    return ops.irfft(-first - k0 * second)


def k1_apply(z: Field, y: Field, u: Field) -> Field:
    """Quadratic part of the tangential-to-normal velocity operator, applied to ``u``."""
    if not (z.grid == y.grid == u.grid):
        raise ValueError("z, y and u must share a grid")
    ops = u.grid.ops()
    return Field(u.grid, k1_apply_array(ops, z.values + y.values, u.values))


def m1_apply_array(ops: SpectralOps, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Commutator form ``w v + K0 (w K0 v)``; ``K1(z,y)u = -M1(z+y) u'``."""
    k0 = _k0(ops)
    wp = ops.pad(w)
    first = ops.unpad_spectrum(wp * ops.pad(v))
    second = ops.unpad_spectrum(wp * ops.pad_spectrum(k0 * ops.rfft(v)))
    return ops.irfft(first + k0 * second)


@dataclass(frozen=True)
class ResidualSample:
    eps: float
    t: float
    res_z_norm: float
    res_y_norm: float
    res_u_norm: float
    s: float = DEFAULT_S
    min_denominator: float = 1.0
    fields: dict | None = None

    def __post_init__(self) -> None:
        for name in ("res_z_norm", "res_y_norm", "res_u_norm"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")


def residual_fields(frame) -> dict[str, Field]:
    """``Res_z``, ``Res_y``, ``Res_u`` and the denominator ``1 + L psi_z`` of a frame with derivatives."""
    if not frame.has_derivatives:
        raise ValueError("frame was assembled without time derivatives")
    grid = frame.grid
    ops = grid.ops()
    k0 = _k0(ops)
    z, y, u = frame.psi_z.values, frame.psi_y.values, frame.psi_u.values
    k0u = ops.multiply(u, k0)
    res_z = frame.dt_psi_z.values - k0u
    res_y = frame.dt_psi_y.values - k0u - k1_apply_array(ops, z + y, u)
    denom = 1.0 + ops.multiply(z, dispersion_symbol(ops.k))
    lowest = float(denom.min())
    if lowest < DENOMINATOR_FLOOR:
        raise ValidityError(f"1 + L psi_z dropped to {lowest:.3f} < {DENOMINATOR_FLOOR}")
    slope = ops.diff(y, 1)
    numer = ops.pad(slope) * (1.0 + ops.pad(frame.dtt_psi_y.values))
    res_u = frame.dt_psi_u.values + ops.unpad(numer / ops.pad(denom))
    return {
        "res_z": Field(grid, res_z),
        "res_y": Field(grid, res_y),
        "res_u": Field(grid, res_u),
        "denominator": Field(grid, denom),
    }


def residuals(frame, s: float = DEFAULT_S, keep_fields: bool = False) -> ResidualSample:
    """Sobolev norms of the residual triple (indices ``s``, ``s``, ``s - 1``)."""
    res = residual_fields(frame)
    return ResidualSample(
        eps=frame.eps,
        t=frame.t,
        res_z_norm=res["res_z"].norm(s),
        res_y_norm=res["res_y"].norm(s),
        res_u_norm=res["res_u"].norm(s - 1.0),
        s=s,
        min_denominator=float(res["denominator"].values.min()),
        fields=res if keep_fields else None,
    )


def kdv_only_residuals(state, t: float, alpha_grid, s: float = DEFAULT_S, keep_fields: bool = False) -> ResidualSample:
    """Residuals of the baseline built from the two KdV components alone."""
    from .approximant import assemble_frame

    frame = assemble_frame(state, t, alpha_grid, "kdv-only", derivatives=True)
    return residuals(frame, s, keep_fields)


# slope fitting --------------------------------------------------------------------

@dataclass
class ScalingReport:
    eps_values: np.ndarray
    norms: np.ndarray
    slope: float
    intercept: float
    residual_of_fit: float
    label: str = ""
    extra: dict = dc_field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "eps": [float(e) for e in self.eps_values],
            "norms": [float(x) for x in self.norms],
            "slope": self.slope,
            "intercept": self.intercept,
            "residual_of_fit": self.residual_of_fit,
            **self.extra,
        }


def fit_slope(eps_values: Sequence[float], norms: Sequence[float], label: str = "", min_span: float = 3.0) -> ScalingReport:
    """Least-squares fit of ``log(norm) = slope * log(eps) + intercept``.

    ``min_span`` is the smallest accepted ratio between the largest and smallest eps.
    """
    eps = np.asarray(eps_values, dtype=float)
    y = np.asarray(norms, dtype=float)
    if eps.shape != y.shape or eps.ndim != 1:
        raise ValueError("eps values and norms must be equal-length sequences")
    if eps.size < 4:
        raise ValueError(f"need at least 4 samples for a slope fit, got {eps.size}")
    if np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise ValueError("all norms must be positive and finite")
    if np.any(eps <= 0):
        raise ValueError("eps values must be positive")
    if eps.max() / eps.min() < min_span - 1e-9:
        raise ValueError(f"eps values must span at least a factor of {min_span:g}")
    slope, intercept = np.polyfit(np.log(eps), np.log(y), 1)
    fitted = slope * np.log(eps) + intercept
    resid = float(np.sqrt(np.mean((np.log(y) - fitted) ** 2)))
    return ScalingReport(eps, y, float(slope), float(intercept), resid, label)


def write_scaling_csv(path: str | Path, samples: Sequence[ResidualSample]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eps", "res_z", "res_y", "res_u"])
        for smp in samples:
            writer.writerow([repr(smp.eps), repr(smp.res_z_norm), repr(smp.res_y_norm), repr(smp.res_u_norm)])
    return path


def write_slopes_json(path: str | Path, reports: Sequence[ScalingReport], **extra) -> Path:
    path = Path(path)
    payload = {"fits": [r.as_dict() for r in reports], **extra}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
