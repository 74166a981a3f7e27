"""Periodic grids, sampled fields and Fourier multipliers.

Everything spectral in the package goes through this module. Public objects
(:class:`Grid`, :class:`Field`, :class:`Multiplier`) carry validation; the
:class:`SpectralOps` helper works on raw arrays and is what the solvers use in
their inner loops.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import _kernels

ZERO_MODE_TOL = 1e-12
PARITIES = ("even-real", "odd-imag", "general")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid of ``n`` points on ``[origin, origin + length)``."""

    n: int
    length: float
    origin: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.n, (int, np.integer)) or self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n!r}")
        if not np.isfinite(self.length) or self.length <= 0:
            raise ValueError(f"period must be positive and finite, got {self.length!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "origin", float(self.origin))

    @property
    def spacing(self) -> float:
        return self.length / self.n

    @functools.cached_property
    def points(self) -> np.ndarray:
        pts = self.origin + self.spacing * np.arange(self.n)
        pts.flags.writeable = False
        return pts

    @functools.cached_property
    def wavenumbers(self) -> np.ndarray:
        """All ``n`` wavenumbers in FFT order, ``2*pi*j/length`` for j in [-n/2, n/2)."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.spacing)
        k.flags.writeable = False
        return k

    @functools.cached_property
    def rwavenumbers(self) -> np.ndarray:
        """Non-negative wavenumbers matching ``numpy.fft.rfft`` output."""
        k = 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.spacing)
        k.flags.writeable = False
        return k

    def rescaled(self, factor: float) -> "Grid":
        """Same samples, coordinates multiplied by ``factor``."""
        return Grid(self.n, self.length * factor, self.origin * factor)

    def ops(self) -> "SpectralOps":
        return _ops_for(self.n, self.length, self.origin)


def _readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Field:
    """Real samples on a :class:`Grid`.

    ``mean_zero=True`` is a checked promise that the zero Fourier mode
    vanishes; only such fields may be fed to the inverse derivative.
    """

    grid: Grid
    values: np.ndarray
    mean_zero: bool = False

    def __post_init__(self) -> None:
        vals = np.asarray(self.values)
        if np.iscomplexobj(vals):
            raise TypeError("field values must be real")
        if vals.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} samples, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite samples")
        object.__setattr__(self, "values", _readonly(vals))
        if self.mean_zero and not has_vanishing_mean(self.values):
            raise ValueError("field tagged mean-zero has a nonzero mean")

    @classmethod
    def from_function(cls, grid: Grid, func: Callable[[np.ndarray], np.ndarray], mean_zero: bool = False) -> "Field":
        return cls(grid, func(grid.points), mean_zero)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.n), True)

    def coefficients(self) -> np.ndarray:
        return np.fft.rfft(self.values)

    def with_values(self, values: np.ndarray, mean_zero: bool = False) -> "Field":
        return Field(self.grid, values, mean_zero)

    def on(self, grid: Grid) -> "Field":
        """Reinterpret the samples on a grid with the same point count."""
        if grid.n != self.grid.n:
            raise ValueError("cannot relabel onto a grid with a different point count")
        return Field(grid, self.values, self.mean_zero)

    def mean(self) -> float:
        return float(np.mean(self.values))

    def integral(self) -> float:
        return float(np.sum(self.values) * self.grid.spacing)

    def norm(self, s: float = 0.0) -> float:
        return sobolev_norm(self, s)

    def evaluate(self, points) -> np.ndarray:
        """Evaluate the trigonometric interpolant at arbitrary points."""
        return self.grid.ops().evaluate(self.values, np.atleast_1d(np.asarray(points, dtype=float)))

    def _check_same(self, other: "Field") -> None:
        if other.grid != self.grid:
            raise ValueError("fields live on different grids")

    def _binary(self, other, op):
        if isinstance(other, Field):
            self._check_same(other)
            return Field(self.grid, op(self.values, other.values))
        return Field(self.grid, op(self.values, float(other)))

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __rsub__(self, other):
        return Field(self.grid, float(other) - self.values)

    def __mul__(self, other):
        if isinstance(other, Field):
            return product(self, other)
        return Field(self.grid, self.values * float(other), self.mean_zero)

    __rmul__ = __mul__

    def __neg__(self):
        return Field(self.grid, -self.values, self.mean_zero)

    def __repr__(self) -> str:
        return f"Field(n={self.grid.n}, length={self.grid.length:g}, max={np.max(np.abs(self.values)):.3g})"


def has_vanishing_mean(values: np.ndarray, tol: float = ZERO_MODE_TOL) -> bool:
    scale = max(float(np.max(np.abs(values))), 1.0)
    return abs(float(np.mean(values))) <= tol * scale


# multipliers ------------------------------------------------------------------

@dataclass(frozen=True)
class Multiplier:
    """Fourier multiplier given by a symbol evaluated at wavenumbers.

    ``parity`` documents how the symbol maps real fields: ``even-real`` and
    ``odd-imag`` symbols keep real data real; ``general`` symbols must satisfy
    ``m(-k) = conj(m(k))``. ``needs_mean_zero`` marks symbols that are
    undefined at ``k = 0`` and only act on mean-zero fields.
    """

    symbol: Callable[[np.ndarray], np.ndarray]
    parity: str = "general"
    name: str = "multiplier"
    needs_mean_zero: bool = False

    def __post_init__(self) -> None:
        if self.parity not in PARITIES:
            raise ValueError(f"unknown parity {self.parity!r}")

    def __call__(self, f: Field) -> Field:
        return apply(self, f)

    def __matmul__(self, other: "Multiplier") -> "Multiplier":
        a, b = self, other
        parity = "even-real" if a.parity == b.parity and a.parity != "general" else "general"
        if {a.parity, b.parity} == {"even-real", "odd-imag"}:
            parity = "odd-imag"
        return Multiplier(
            lambda k: a.symbol(k) * b.symbol(k), parity, f"{a.name}*{b.name}", a.needs_mean_zero or b.needs_mean_zero
        )

    def values(self, k: np.ndarray) -> np.ndarray:
        return np.asarray(self.symbol(np.asarray(k, dtype=float)), dtype=complex)


def apply(op: Multiplier, f: Field) -> Field:
    """Apply ``op`` to ``f``: multiply Fourier coefficients by the symbol."""
    k = f.grid.rwavenumbers
    sym = op.values(k)
    if not np.all(np.isfinite(sym)):
        raise ValueError(f"symbol {op.name!r} is non-finite at a grid wavenumber")
    if op.needs_mean_zero and not has_vanishing_mean(f.values):
        raise ValueError("zero mode present: operator requires a mean-zero field")
    coef = np.fft.rfft(f.values) * sym
    if op.parity == "odd-imag":
        coef[-1] = 0.0
    out = np.fft.irfft(coef, n=f.grid.n)
    return Field(f.grid, out)


def _safe_ratio(num: np.ndarray, den: np.ndarray, at_zero: float) -> np.ndarray:
    out = np.full(num.shape, at_zero, dtype=float)
    nz = den != 0
    out[nz] = num[nz] / den[nz]
    return out


def _dinv(k: np.ndarray) -> np.ndarray:
    out = np.zeros(k.shape, dtype=complex)
    nz = k != 0
    out[nz] = 1.0 / (1j * k[nz])
    return out


def dispersion_symbol(k: np.ndarray) -> np.ndarray:
    """``-k / tanh k`` with its limit ``-1`` at ``k = 0``."""
    k = np.asarray(k, dtype=float)
    return -_safe_ratio(k, np.tanh(k), 1.0)


def inverse_dispersion_symbol(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    return -_safe_ratio(np.tanh(k), k, 1.0)


_BUILTINS: dict[str, Callable[..., Multiplier]] = {
    "K0": lambda: Multiplier(lambda k: -1j * np.tanh(k), "odd-imag", "K0"),
    "L": lambda: Multiplier(dispersion_symbol, "even-real", "L"),
    "Linv": lambda: Multiplier(inverse_dispersion_symbol, "even-real", "Linv"),
    "D": lambda: Multiplier(lambda k: 1j * k, "odd-imag", "D"),
    "Dinv": lambda: Multiplier(_dinv, "odd-imag", "Dinv", needs_mean_zero=True),
    "one_plus_K0sq": lambda: Multiplier(lambda k: 1.0 - np.tanh(k) ** 2 + 0j, "even-real", "one_plus_K0sq"),
}

# Maclaurin coefficients in powers of k for the long-wave truncations.
_TAYLOR = {
    "K0eps": ({1: -1j, 3: 1j / 3.0, 5: -2j / 15.0}, "odd-imag"),
    "Leps": ({0: -1.0, 2: -1.0 / 3.0, 4: 1.0 / 45.0}, "even-real"),
    "Linveps": ({0: -1.0, 2: 1.0 / 3.0, 4: -2.0 / 15.0}, "even-real"),
}


def builtin_symbol(name: str, shift: float | None = None) -> Multiplier:
    """Named multipliers: K0, L, Linv, D, Dinv, one_plus_K0sq and shift."""
    if name == "shift":
        if shift is None:
            raise ValueError("shift multiplier needs a displacement")
        c = float(shift)
        return Multiplier(lambda k: np.exp(1j * k * c), "general", f"shift({c:g})")
    if name not in _BUILTINS:
        raise KeyError(f"unknown symbol {name!r}; choose from {sorted(_BUILTINS) + ['shift']}")
    return _BUILTINS[name]()


def longwave_truncation(name: str, order: int) -> Multiplier:
    """Maclaurin polynomial of K0, L or Linv truncated at ``order`` in ``k``."""
    if name not in _TAYLOR:
        raise KeyError(f"unknown truncation {name!r}")
    coeffs, parity = _TAYLOR[name]
    allowed = sorted(coeffs)
    if order not in allowed:
        raise ValueError(f"order {order} not available for {name}; choose from {allowed}")
    kept = {p: c for p, c in coeffs.items() if p <= order}

    def symbol(k):
        k = np.asarray(k, dtype=float)
        return sum(c * k ** p for p, c in kept.items()) + 0j

    return Multiplier(symbol, parity, f"{name}[{order}]")


# norms and products ----------------------------------------------------------

def sobolev_weights(grid: Grid, s: float) -> np.ndarray:
    k = grid.rwavenumbers
    w = (1.0 + k ** 2) ** s
    w = w * 2.0
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def sobolev_norm(f: Field, s: float) -> float:
    """``sqrt((length/n^2) * sum_j (1 + k_j^2)^s |f_j|^2)`` over all modes."""
    return sobolev_norm_array(f.values, f.grid, s)


def sobolev_norm_array(values: np.ndarray, grid: Grid, s: float) -> float:
    coef = np.fft.rfft(values)
    total = _kernels.weighted_square_sum(coef, sobolev_weights(grid, s))
    return float(np.sqrt(grid.length / grid.n ** 2 * total))


def product(*fields: Field) -> Field:
    """Dealiased pointwise product of fields on a common grid."""
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError("fields live on different grids")
    ops = grid.ops()
    padded = [ops.pad(f.values) for f in fields]
    out = padded[0]
    for p in padded[1:]:
        out = out * p
    return Field(grid, ops.unpad(out))


# fast array helpers ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralOps:
    """Array-level spectral toolkit bound to one grid.

    Products are formed on a grid with ``pad`` times as many points, which is
    alias free for quadratic terms and, at the default ``pad=2``, for cubic ones.
    """

    grid: Grid
    pad_factor: int = 2
    _cache: dict = dc_field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def k(self) -> np.ndarray:
        return self.grid.rwavenumbers

    @property
    def padded_n(self) -> int:
        return self.pad_factor * self.grid.n

    def rfft(self, x: np.ndarray) -> np.ndarray:
        return np.fft.rfft(x, axis=-1)

    def irfft(self, xh: np.ndarray) -> np.ndarray:
        return np.fft.irfft(xh, n=self.n, axis=-1)

    def symbol(self, name: str, order: int | None = None) -> np.ndarray:
        key = (name, order)
        if key not in self._cache:
            op = builtin_symbol(name) if order is None else longwave_truncation(name, order)
            sym = op.values(self.k)
            if op.parity == "odd-imag":
                sym = sym.copy()
                sym[-1] = 0.0
            self._cache[key] = sym
        return self._cache[key]

    def dk(self, m: int) -> np.ndarray:
        key = ("D", m)
        if key not in self._cache:
            sym = (1j * self.k) ** m
            if m % 2:
                sym[-1] = 0.0
            self._cache[key] = sym
        return self._cache[key]

    def diff(self, x: np.ndarray, m: int = 1) -> np.ndarray:
        if m == 0:
            return np.array(x, dtype=float, copy=True)
        return self.irfft(self.rfft(x) * self.dk(m))

    def diffs(self, x: np.ndarray, orders) -> dict[int, np.ndarray]:
        xh = self.rfft(x)
        return {m: (np.array(x, dtype=float, copy=True) if m == 0 else self.irfft(xh * self.dk(m))) for m in orders}

    def multiply(self, x: np.ndarray, sym: np.ndarray) -> np.ndarray:
        return self.irfft(self.rfft(x) * sym)

    def antiderivative(self, x: np.ndarray) -> np.ndarray:
        """Mean-zero periodic antiderivative; the mean of ``x`` is discarded."""
        return self.irfft(self.rfft(x) * _dinv(self.k))

    def pad(self, x: np.ndarray) -> np.ndarray:
        """Samples of the trigonometric interpolant on the refined grid."""
        xh = self.rfft(x)
        return self.pad_spectrum(xh)

    def pad_spectrum(self, xh: np.ndarray) -> np.ndarray:
        n, m = self.n, self.padded_n
        shape = xh.shape[:-1] + (m // 2 + 1,)
        big = np.zeros(shape, dtype=complex)
        big[..., : n // 2] = xh[..., : n // 2]
        return np.fft.irfft(big, n=m, axis=-1) * (m / n)

    def unpad_spectrum(self, xp: np.ndarray) -> np.ndarray:
        n, m = self.n, self.padded_n
        big = np.fft.rfft(xp, axis=-1) * (n / m)
        xh = np.array(big[..., : n // 2 + 1], copy=True)
        xh[..., -1] = 0.0
        return xh

    def unpad(self, xp: np.ndarray) -> np.ndarray:
        return self.irfft(self.unpad_spectrum(xp))

    def evaluate(self, x: np.ndarray, points: np.ndarray) -> np.ndarray:
        coef = self.rfft(x) / self.n
        coef = np.array(coef, copy=True)
        coef[-1] *= 0.5
        return _kernels.fourier_eval(coef, np.ascontiguousarray(self.k), self.grid.origin, np.ascontiguousarray(points))

    def norm(self, x: np.ndarray, s: float) -> float:
        return sobolev_norm_array(x, self.grid, s)

    def resample(self, x: np.ndarray, n_new: int) -> np.ndarray:
        """Fourier interpolation onto ``n_new`` equispaced points of the same period."""
        xh = self.rfft(x)
        big = np.zeros(n_new // 2 + 1, dtype=complex)
        m = min(n_new, self.n) // 2
        big[:m] = xh[:m]
        return np.fft.irfft(big, n=n_new) * (n_new / self.n)


@functools.lru_cache(maxsize=64)
def _ops_for(n: int, length: float, origin: float) -> SpectralOps:
    return SpectralOps(Grid(n, length, origin))


def make_grid(n: int, length: float, origin: float | None = None) -> Grid:
    """Grid on ``[origin, origin + length)``; centred on zero when no origin is given."""
    return Grid(n, length, -0.5 * length if origin is None else origin)
