import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdvcorr.fieldio import read_binary, read_csv, sha256_of, write_binary, write_csv
from kdvcorr.spectral import Field, make_grid


@settings(max_examples=20, deadline=None)
@given(
    exponent=st.integers(3, 9),
    length=st.floats(0.5, 500.0),
    origin=st.floats(-100.0, 100.0),
    seed=st.integers(0, 1000),
)
def test_binary_round_trip_is_exact(tmp_path_factory, exponent, length, origin, seed):
    grid = make_grid(2 ** exponent, length, origin)
    f = Field(grid, np.random.default_rng(seed).standard_normal(grid.n))
    path = write_binary(f, tmp_path_factory.mktemp("bin") / "f.bin")
    back = read_binary(path)
    assert back.grid == grid
    assert np.array_equal(back.values, f.values)


def test_binary_header_layout(tmp_path):
    grid = make_grid(8, 2.0, -1.0)
    path = write_binary(Field(grid, np.arange(8.0)), tmp_path / "f.bin")
    raw = path.read_bytes()
    assert len(raw) == 8 + 8 + 8 + 8 * 8
    assert int.from_bytes(raw[:8], "little") == 8


def test_binary_truncated_file(tmp_path):
    grid = make_grid(8, 2.0, -1.0)
    path = write_binary(Field(grid, np.arange(8.0)), tmp_path / "f.bin")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_binary(path)


def test_csv_round_trip(tmp_path):
    grid = make_grid(64, 10.0)
    f = Field.from_function(grid, lambda x: np.exp(-x ** 2))
    path = write_csv(f, tmp_path / "f.csv")
    assert path.read_text().splitlines()[0] == "coordinate,value"
    back = read_csv(path)
    assert back.grid.n == 64
    assert back.grid.length == pytest.approx(10.0, rel=1e-12)
    assert np.array_equal(back.values, f.values)


def test_checksum_changes_with_content(tmp_path):
    grid = make_grid(8, 1.0)
    a = write_binary(Field(grid, np.zeros(8)), tmp_path / "a.bin")
    b = write_binary(Field(grid, np.ones(8)), tmp_path / "b.bin")
    assert sha256_of(a) != sha256_of(b)
    assert len(sha256_of(a)) == 64
