"""Pointwise kernels with a numba path and a plain numpy fallback.

Set ``KDVCORR_DISABLE_NUMBA=1`` before import to force the numpy versions.
Both variants stay importable as ``numpy_impl`` and ``numba_impl`` so that
tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os
import types

import numpy as np

_DISABLED = os.environ.get("KDVCORR_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


# numpy versions ---------------------------------------------------------------

def _np_cauchy_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    order = a.shape[0]
    out = np.zeros_like(a)
    for m in range(order):
        for i in range(m + 1):
            out[m] += a[i] * b[m - i]
    return out


def _np_lawson_half(e_half, v, k, h):
    return e_half * (v + 0.5 * h * k)


def _np_lawson_final(e_full, e_half, v, k1, k2, k3, k4, h):
    return e_full * v + (h / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)


def _np_fourier_eval(coeffs, wavenumbers, origin, points):
    # coeffs follow numpy rfft ordering and scaling (sum over all n modes / n)
    n_half = coeffs.shape[0]
    phase = np.exp(1j * np.outer(points - origin, wavenumbers))
    weights = np.full(n_half, 2.0)
    weights[0] = 1.0
    return (phase * (weights * coeffs)).real.sum(axis=1)


def _np_weighted_square_sum(coeffs, weights):
    return float(np.sum(weights * (coeffs.real ** 2 + coeffs.imag ** 2)))


def _np_fixed_point_update(rhs, slope, coupled, denom, current):
    new = (rhs - slope * coupled) / denom
    return new, float(np.max(np.abs(new - current)))


numpy_impl = types.SimpleNamespace(
    cauchy_product=_np_cauchy_product,
    lawson_half=_np_lawson_half,
    lawson_final=_np_lawson_final,
    fourier_eval=_np_fourier_eval,
    weighted_square_sum=_np_weighted_square_sum,
    fixed_point_update=_np_fixed_point_update,
)


# numba versions ---------------------------------------------------------------

def _build_numba():
    njit = numba.njit(cache=False, fastmath=False)

    @njit
    def cauchy_product(a, b):
        order, width = a.shape
        out = np.zeros_like(a)
        for m in range(order):
            for i in range(m + 1):
                for x in range(width):
                    out[m, x] += a[i, x] * b[m - i, x]
        return out

    @njit
    def lawson_half(e_half, v, k, h):
        out = np.empty_like(v)
        for i in range(v.size):
            out[i] = e_half[i] * (v[i] + 0.5 * h * k[i])
        return out

    @njit
    def lawson_final(e_full, e_half, v, k1, k2, k3, k4, h):
        out = np.empty_like(v)
        c = h / 6.0
        for i in range(v.size):
            out[i] = e_full[i] * v[i] + c * (
                e_full[i] * k1[i] + 2.0 * e_half[i] * (k2[i] + k3[i]) + k4[i]
            )
        return out

    @njit
    def fourier_eval(coeffs, wavenumbers, origin, points):
        out = np.zeros(points.size)
        for p in range(points.size):
            x = points[p] - origin
            acc = coeffs[0].real
            for j in range(1, coeffs.size):
                ph = wavenumbers[j] * x
                acc += 2.0 * (coeffs[j].real * np.cos(ph) - coeffs[j].imag * np.sin(ph))
            out[p] = acc
        return out

    @njit
    def weighted_square_sum(coeffs, weights):
        acc = 0.0
        for j in range(coeffs.size):
            acc += weights[j] * (coeffs[j].real ** 2 + coeffs[j].imag ** 2)
        return acc

    @njit
    def fixed_point_update(rhs, slope, coupled, denom, current):
        new = np.empty_like(rhs)
        diff = 0.0
        for i in range(rhs.size):
            new[i] = (rhs[i] - slope[i] * coupled[i]) / denom[i]
            d = abs(new[i] - current[i])
            if d > diff:
                diff = d
        return new, diff

    return types.SimpleNamespace(
        cauchy_product=cauchy_product,
        lawson_half=lawson_half,
        lawson_final=lawson_final,
        fourier_eval=fourier_eval,
        weighted_square_sum=weighted_square_sum,
        fixed_point_update=fixed_point_update,
    )


numba_impl = _build_numba() if numba is not None else None

USING_NUMBA = numba_impl is not None and not _DISABLED
active = numba_impl if USING_NUMBA else numpy_impl

cauchy_product = active.cauchy_product
lawson_half = active.lawson_half
lawson_final = active.lawson_final
fourier_eval = active.fourier_eval
weighted_square_sum = active.weighted_square_sum
fixed_point_update = active.fixed_point_update
