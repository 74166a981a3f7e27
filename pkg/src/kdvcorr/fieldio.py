"""Field serialization: two-column CSV and a little-endian binary format.

Binary layout: int64 point count, float64 period, float64 origin, then the
samples as float64, all little-endian.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .spectral import Field, Grid

_HEADER = struct.Struct("<qdd")


def write_csv(field: Field, path: str | Path, header: tuple[str, str] = ("coordinate", "value")) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for x, v in zip(field.grid.points, field.values):
            writer.writerow([repr(float(x)), repr(float(v))])
    return path


def read_csv(path: str | Path) -> Field:
    """Read a two-column CSV written by :func:`write_csv`; the grid is inferred."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    x, v = data[:, 0], data[:, 1]
    n = x.size
    spacing = (x[-1] - x[0]) / (n - 1)
    return Field(Grid(n, spacing * n, x[0]), v)


def write_binary(field: Field, path: str | Path) -> Path:
    path = Path(path)
    g = field.grid
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(g.n, g.length, g.origin))
        fh.write(np.asarray(field.values, dtype="<f8").tobytes())
    return path


def read_binary(path: str | Path) -> Field:
    raw = Path(path).read_bytes()
    n, length, origin = _HEADER.unpack_from(raw)
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if values.size != n:
        raise ValueError(f"{path}: header says {n} samples, found {values.size}")
    return Field(Grid(int(n), length, origin), values.astype(float))


def sha256_of(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
