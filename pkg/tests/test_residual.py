import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdvcorr.approximant import alpha_grid_for, assemble_frame
from kdvcorr.errors import ValidityError
from kdvcorr.modulation import ModulationState, evolve_hierarchy, soliton
from kdvcorr.residual import (
    ResidualSample,
    fit_slope,
    k1_apply,
    kdv_only_residuals,
    m1_apply_array,
    residual_fields,
    residuals,
    write_scaling_csv,
    write_slopes_json,
)
from kdvcorr.spectral import Field, builtin_symbol, make_grid


@pytest.fixture(scope="module")
def grid():
    return make_grid(256, 64.0)


def bump(grid, rng):
    center, width, amp, freq = rng.uniform(-10, 10), rng.uniform(0.5, 3), rng.normal(), rng.uniform(0, 3)
    return Field.from_function(grid, lambda b: amp * np.exp(-(((b - center) / width) ** 2)) * np.cos(freq * b))


class TestK1:
    def test_zero_surface(self, grid):
        z = Field.zeros(grid)
        out = k1_apply(z, z, soliton(grid, 1.0))
        assert np.all(out.values == 0)

    def test_constant_surface_single_mode(self):
        g = make_grid(64, 2 * np.pi, 0.0)
        z = Field(g, np.full(g.n, 0.3))
        y = Field(g, np.full(g.n, 0.2))
        u = Field(g, np.cos(g.points))
        out = k1_apply(z, y, u)
        # -(0.5)(u' + K0 K0 u') with K0 K0 = -tanh^2 on mode one
        expected = 0.5 * (1 - np.tanh(1.0) ** 2) * np.sin(g.points)
        np.testing.assert_allclose(out.values, expected, atol=1e-14)

    def test_agrees_with_commutator_form(self, grid):
        rng = np.random.default_rng(5)
        z, y, u = bump(grid, rng), bump(grid, rng), bump(grid, rng)
        ops = grid.ops()
        via_m1 = -m1_apply_array(ops, (z + y).values, ops.diff(u.values, 1))
        assert np.max(np.abs(k1_apply(z, y, u).values - via_m1)) <= 1e-12

    def test_agrees_with_explicit_products(self, grid):
        rng = np.random.default_rng(6)
        z, y, u = bump(grid, rng), bump(grid, rng), bump(grid, rng)
        K0, D = builtin_symbol("K0"), builtin_symbol("D")
        w = z + y
        expected = -(w * D(u)) - K0(w * K0(D(u)))
        assert np.max(np.abs(k1_apply(z, y, u).values - expected.values)) <= 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_m1_triangle_bound(self, grid, seed):
        rng = np.random.default_rng(100 + seed)
        z, v = bump(grid, rng), bump(grid, rng)
        ops = grid.ops()
        m1 = Field(grid, m1_apply_array(ops, z.values, v.values))
        bound = (z * v).norm(4) + (z * builtin_symbol("K0")(v)).norm(4)
        assert m1.norm(4) <= bound * (1 + 1e-12)

    def test_grid_mismatch(self, grid):
        with pytest.raises(ValueError):
            k1_apply(Field.zeros(grid), Field.zeros(make_grid(128, 64.0)), Field.zeros(grid))


def frame_for(grid, eps, family="single", tau=1.0, fidelity="extended"):
    u0 = soliton(grid, 1.0, 0.0 if family == "single" else -1.0)
    v0 = Field.zeros(grid) if family == "single" else soliton(grid, 1.0, 1.0)
    state = ModulationState.initial(eps, u0, v0)
    corrections = fidelity != "kdv-only"
    final = evolve_hierarchy(state, tau, 0.01, store_every=10 ** 9, corrections=corrections, keep_states=False).final
    return final, assemble_frame(final, tau / eps, alpha_grid_for(grid, eps), fidelity, derivatives=True)


class TestResiduals:
    def test_zero_frame(self, grid):
        z = Field.zeros(grid)
        frame = assemble_frame(ModulationState.initial(0.1, z, z), 0.0, alpha_grid_for(grid, 0.1), "extended", True)
        r = residuals(frame)
        assert r.res_z_norm == r.res_y_norm == r.res_u_norm == 0.0

    def test_surface_equation_is_exact(self, grid):
        _, frame = frame_for(grid, 0.1, "headon")
        assert residuals(frame).res_z_norm <= 1e-10

    def test_requires_derivatives(self, grid):
        state = ModulationState.initial(0.1, soliton(grid, 1.0), Field.zeros(grid))
        frame = assemble_frame(state, 0.0, alpha_grid_for(grid, 0.1), "extended")
        with pytest.raises(ValueError, match="derivatives"):
            residual_fields(frame)

    def test_translation_invariance(self):
        g = make_grid(256, 64.0)
        eps, shift = 0.1, 3.0
        alpha = alpha_grid_for(g, eps)
        samples = []
        for c in (0.0, shift):
            state = ModulationState.initial(eps, soliton(g, 1.0, -1.0 + c), soliton(g, 1.0, 1.0 + c))
            samples.append(residuals(assemble_frame(state, 0.0, alpha, "extended", True)))
        a, b = samples
        for name in ("res_y_norm", "res_u_norm"):
            assert abs(getattr(a, name) - getattr(b, name)) <= 1e-12
            assert getattr(a, name) == pytest.approx(getattr(b, name), rel=1e-9)

    def test_full_beats_baseline(self, grid):
        eps = 0.1
        _, frame = frame_for(grid, eps)
        baseline_state, _ = frame_for(grid, eps, fidelity="kdv-only")
        full = residuals(frame)
        base = kdv_only_residuals(baseline_state, 1.0 / eps, alpha_grid_for(grid, eps))
        assert base.res_u_norm >= 10 * full.res_u_norm

    def test_denominator_floor(self, grid):
        eps = 0.1
        big = ModulationState.initial(eps, soliton(grid, 1.0) * 300.0, Field.zeros(grid))
        frame = assemble_frame(big, 0.0, alpha_grid_for(grid, eps), "simple", True)
        with pytest.raises(ValidityError):
            residuals(frame)

    def test_keep_fields(self, grid):
        _, frame = frame_for(grid, 0.1)
        r = residuals(frame, keep_fields=True)
        assert set(r.fields) == {"res_z", "res_y", "res_u", "denominator"}
        assert r.fields["res_u"].norm(3.0) == pytest.approx(r.res_u_norm, rel=1e-14)

    def test_sample_validation(self):
        with pytest.raises(ValueError):
            ResidualSample(0.1, 0.0, -1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            ResidualSample(0.1, 0.0, 0.0, float("nan"), 0.0)


LADDER = [0.05, 0.07, 0.1, 0.14, 0.2]


class TestFitSlope:
    def test_pure_power(self):
        report = fit_slope(LADDER, [e ** 4 for e in LADDER])
        assert report.slope == pytest.approx(4.0, abs=1e-10)

    def test_prefactor(self):
        report = fit_slope(LADDER, [3 * e ** 8.5 for e in LADDER])
        assert report.slope == pytest.approx(8.5, abs=1e-10)
        assert report.intercept == pytest.approx(np.log(3.0), abs=1e-10)
        assert report.residual_of_fit < 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_one_percent_noise(self, seed):
        rng = np.random.default_rng(seed)
        noisy = [e ** 6 * (1 + 0.01 * rng.uniform(-1, 1)) for e in LADDER]
        assert abs(fit_slope(LADDER, noisy).slope - 6.0) <= 0.1

    @pytest.mark.parametrize(
        "eps, norms, message",
        [
            ([0.05, 0.1, 0.2], [1, 2, 3], "at least 4"),
            (LADDER, [1, 2, 0, 4, 5], "positive"),
            (LADDER, [1, 2, float("inf"), 4, 5], "positive"),
            ([0.1, 0.12, 0.14, 0.16], [1, 2, 3, 4], "span"),
            (LADDER, [1, 2, 3], "equal-length"),
        ],
    )
    def test_rejections(self, eps, norms, message):
        with pytest.raises(ValueError, match=message):
            fit_slope(eps, norms)

    def test_relaxed_span(self):
        eps = [0.2, 0.25, 0.3, 0.35]
        assert fit_slope(eps, [e ** 5 for e in eps], min_span=1.0).slope == pytest.approx(5.0)


def test_writers(tmp_path):
    samples = [ResidualSample(e, 1.0 / e, 1e-16, e ** 8, e ** 9) for e in LADDER]
    path = write_scaling_csv(tmp_path / "r.csv", samples)
    rows = list(csv.DictReader(path.open()))
    assert [float(r["eps"]) for r in rows] == LADDER
    assert float(rows[2]["res_y"]) == 0.1 ** 8
    reports = [fit_slope(LADDER, [s.res_y_norm for s in samples], "res_y")]
    payload = json.loads(write_slopes_json(tmp_path / "s.json", reports, family="single").read_text())
    assert payload["family"] == "single"
    assert payload["fits"][0]["slope"] == pytest.approx(8.0)
