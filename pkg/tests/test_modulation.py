import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kdvcorr.errors import SolverAbort
from kdvcorr.modulation import (
    ModulationState,
    Trajectory,
    advance,
    dTT_closed_form,
    evolve_hierarchy,
    j_driving,
    j_driving_termwise,
    kdv_evolve,
    kdv_rhs,
    linkdv_evolve,
    soliton,
    transport_evolve,
    w3_direct_quadrature,
    w3_evolve,
    wave_source,
)
from kdvcorr.spectral import Field, make_grid


@pytest.fixture(scope="module")
def grid80():
    return make_grid(512, 80.0)


@pytest.fixture(scope="module")
def grid64():
    return make_grid(256, 64.0)


def peak_location(f: Field, guess: float) -> float:
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda x: -f.evaluate([x])[0], bounds=(guess - 1, guess + 1), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x)


class TestSoliton:
    def test_profile(self, grid80):
        s = soliton(grid80, 1.0)
        assert s.evaluate([0.0])[0] == pytest.approx(1.0, abs=1e-14)
        half = math.acosh(math.sqrt(2.0)) / (math.sqrt(3.0) / 2.0)
        assert s.evaluate([half])[0] == pytest.approx(0.5, abs=1e-13)

    @pytest.mark.parametrize("amp", [0.0, -1.0])
    def test_rejects_non_positive_amplitude(self, grid80, amp):
        with pytest.raises(ValueError):
            soliton(grid80, amp)

    def test_vanishing_amplitude(self, grid80):
        assert np.max(np.abs(soliton(grid80, 1e-14).values)) <= 1e-14

    def test_wraps_periodically(self, grid80):
        s = soliton(grid80, 1.0, center=39.0)
        assert s.evaluate([-40.0])[0] > 0.5

    def test_chirality_checked(self, grid80):
        with pytest.raises(ValueError):
            soliton(grid80, 1.0, chirality="up")


class TestKdvRhs:
    def test_zero(self, grid80):
        assert np.all(kdv_rhs(Field.zeros(grid80), "right").values == 0.0)

    @pytest.mark.parametrize("chirality, sign", [("right", 1.0), ("left", -1.0)])
    def test_soliton_is_travelling_wave(self, grid80, chirality, sign):
        s = soliton(grid80, 1.0)
        rate = kdv_rhs(s, chirality).values
        deriv = grid80.ops().diff(s.values, 1)
        assert np.max(np.abs(rate + sign * 0.5 * deriv)) <= 1e-9

    def test_perfect_derivative(self, grid80):
        assert abs(kdv_rhs(soliton(grid80, 1.3, 2.0) + soliton(grid80, 0.4, -7.0), "right").integral()) <= 1e-12


class TestKdvEvolve:
    def test_zero_stays_zero(self, grid64):
        traj = kdv_evolve(Field.zeros(grid64), "left", 1.0, 0.01)
        assert all(np.all(s.values == 0.0) for s in traj.states)

    def test_soliton_translation_and_conservation(self, grid80):
        traj = kdv_evolve(soliton(grid80, 1.0), "right", 2.0, 0.005, store_every=50)
        assert (traj.final - soliton(grid80, 1.0, 1.0)).norm(0) <= 1e-6
        m0, e0 = traj.states[0].integral(), (traj.states[0] * traj.states[0]).integral()
        for w in traj.states:
            assert abs(w.integral() - m0) <= 1e-8 * abs(m0)
            assert abs((w * w).integral() - e0) <= 1e-8 * abs(e0)

    def test_speed_two(self, grid80):
        traj = kdv_evolve(soliton(grid80, 2.0, -3.0), "right", 1.0, 0.005)
        assert abs(peak_location(traj.final, -2.0) - (-2.0)) <= grid80.spacing

    @pytest.mark.parametrize("amp", [0.5, 1.0, 2.0])
    def test_speed_law(self, grid80, amp):
        traj = kdv_evolve(soliton(grid80, amp), "left", 2.0, 0.005, store_every=100)
        pos = [peak_location(w, -0.5 * amp * slow_time) for slow_time, w in zip(traj.times, traj.states)]
        speed = np.polyfit(traj.times, pos, 1)[0]
        assert abs(speed + 0.5 * amp) <= 0.01 * 0.5 * amp

    def test_overtaking_recurrence_and_phase_shift(self):
        grid = make_grid(1024, 160.0)
        traj = kdv_evolve(soliton(grid, 2.0, -10.0) + soliton(grid, 0.5, 0.0), "right", 40.0, 0.01, store_every=4000)
        final = traj.final
        x_big = peak_location(final, 30.9)
        x_small = peak_location(final, 8.2)
        assert final.evaluate([x_big])[0] == pytest.approx(2.0, abs=1e-3)
        assert final.evaluate([x_small])[0] == pytest.approx(0.5, abs=1e-3)
        assert x_big - 30.0 > 0.5 and x_small - 10.0 < -1.0

    def test_blowup_detector(self, grid64):
        with pytest.raises(SolverAbort, match="blow-up"):
            kdv_evolve(soliton(grid64, 4.0), "right", 5.0, 0.5)

    def test_rejects_bad_step(self, grid64):
        with pytest.raises(ValueError):
            kdv_evolve(soliton(grid64, 1.0), "right", 1.0, 0.0)


class TestSecondTimeDerivative:
    def test_zero_and_mean(self, grid80):
        assert np.all(dTT_closed_form(Field.zeros(grid80), "right").values == 0.0)
        assert abs(dTT_closed_form(soliton(grid80, 1.0), "left").integral()) <= 1e-12

    @pytest.mark.parametrize("chirality", ["right", "left"])
    def test_against_time_differences(self, grid80, chirality):
        w0 = soliton(grid80, 1.0) + 0.3 * soliton(grid80, 0.6, 6.0)
        h = 1e-3
        traj = kdv_evolve(w0, chirality, 2 * h, h / 20, store_every=20)
        rates = [kdv_rhs(w, chirality).values for w in traj.states]
        fd = (rates[2] - rates[0]) / (2 * h)
        closed = dTT_closed_form(traj.states[1], chirality).values
        assert np.max(np.abs(fd - closed)) <= 1e-5


class TestDriving:
    def test_zero(self, grid80):
        z = Field.zeros(grid80)
        assert np.all(j_driving("right", z, z).values == 0.0)

    @pytest.mark.parametrize("chirality", ["right", "left"])
    def test_dual_path(self, grid80, chirality):
        u = soliton(grid80, 1.0)
        phi = 0.2 * soliton(grid80, 0.7, 3.0)
        for p in (Field.zeros(grid80), phi):
            a = j_driving(chirality, u, p).values
            b = j_driving_termwise(chirality, u, p).values
            assert np.max(np.abs(a - b)) <= 1e-10

    def test_perfect_derivative(self, grid80):
        j = j_driving("left", soliton(grid80, 1.2), 0.3 * soliton(grid80, 1.0, -2.0))
        assert abs(j.integral()) <= 1e-12


class TestLinearizedKdv:
    def test_zero(self, grid64):
        z = Field.zeros(grid64)
        traj = linkdv_evolve(z, z, None, None, None, None, 0.5, 0.01)
        assert all(np.all(f.values == 0) and np.all(g.values == 0) for f, g in traj.states)

    def test_airy_propagator(self, grid64):
        f0 = Field.from_function(grid64, lambda b: np.exp(-b ** 2))
        slow_time = 1.0
        traj = linkdv_evolve(f0, f0, None, None, None, None, slow_time, 0.01)
        ops = grid64.ops()
        exact_f = ops.irfft(ops.rfft(f0.values) * np.exp(1j * ops.k ** 3 * slow_time / 6.0))
        exact_g = ops.irfft(ops.rfft(f0.values) * np.exp(-1j * ops.k ** 3 * slow_time / 6.0))
        f, g = traj.final
        assert np.max(np.abs(f.values - exact_f)) <= 1e-9
        assert np.max(np.abs(g.values - exact_g)) <= 1e-9

    def test_duhamel_with_frozen_source(self, grid64):
        ops = grid64.ops()
        u = soliton(grid64, 1.0)
        jm = j_driving("right", u, Field.zeros(grid64)).values
        slow_time = 0.05
        z = Field.zeros(grid64)
        traj = linkdv_evolve(z, z, None, None, None, None, slow_time, 0.001, driving=lambda _T: (jm, jm))
        # F_T = i k^3/6 F - J/2 with J frozen: F(T) = -(1/2) (e^{lam T} - 1)/lam * J
        lam = 1j * ops.k ** 3 / 6.0
        factor = np.where(lam == 0, slow_time, (np.exp(lam * slow_time) - 1.0) / np.where(lam == 0, 1.0, lam))
        exact = ops.irfft(-0.5 * factor * ops.rfft(jm))
        assert np.max(np.abs(traj.final[0].values - exact)) <= 1e-6

    @settings(max_examples=8, deadline=None)
    @given(scale=st.floats(-4.0, 4.0, allow_nan=False).filter(lambda a: abs(a) > 1e-3))
    def test_linear_in_data_and_source(self, scale):
        grid = make_grid(128, 40.0)
        f0 = Field.from_function(grid, lambda b: np.exp(-b ** 2 / 2))
        j = j_driving("right", soliton(grid, 1.0), Field.zeros(grid)).values
        base = linkdv_evolve(f0, f0, None, None, None, None, 0.2, 0.01, driving=lambda _T: (j, j)).final
        scaled = linkdv_evolve(f0 * scale, f0 * scale, None, None, None, None, 0.2, 0.01,
                               driving=lambda _T: (scale * j, scale * j)).final
        for a, b in zip(base, scaled):
            assert np.max(np.abs(b.values - scale * a.values)) <= 1e-12 * max(1.0, abs(scale))

    def test_background_coverage_gap(self, grid64):
        z = Field.zeros(grid64)
        short = kdv_evolve(soliton(grid64, 1.0), "right", 0.1, 0.01)
        with pytest.raises(SolverAbort):
            linkdv_evolve(z, z, short, None, None, None, 0.5, 0.01)


class TestTransport:
    def test_one_sided_data_gives_nothing(self, grid64):
        eps = 0.1
        u = kdv_evolve(soliton(grid64, 1.0), "right", 0.02, 0.001)
        v = kdv_evolve(Field.zeros(grid64), "left", 0.02, 0.001)
        traj = transport_evolve(u, v, eps, 2.0, 0.01)
        assert max(np.max(np.abs(s.Pminus.values)) + np.max(np.abs(s.Pplus.values)) for s in traj.states) == 0.0

    def test_small_before_overlap(self, grid64):
        eps = 0.1
        period = grid64.length
        u = kdv_evolve(soliton(grid64, 1.0, -period / 4), "right", 0.03, 0.001)
        v = kdv_evolve(soliton(grid64, 1.0, period / 4), "left", 0.03, 0.001)
        traj = transport_evolve(u, v, eps, 3.0, 0.01, store_every=50)
        for s in traj.states:
            assert np.max(np.abs(s.Pminus.values)) <= 1e-8 and np.max(np.abs(s.Pplus.values)) <= 1e-8

    def test_matches_coupled_hierarchy(self, grid64):
        eps = 0.1
        u0, v0 = soliton(grid64, 1.0, -2.0), soliton(grid64, 1.0, 2.0)
        coupled = evolve_hierarchy(ModulationState.initial(eps, u0, v0), 4.0, 0.01, store_every=400)
        slow_time = eps ** 2 * 4.0
        u = kdv_evolve(u0, "right", slow_time, eps ** 2 * 0.01)
        v = kdv_evolve(v0, "left", slow_time, eps ** 2 * 0.01)
        standalone = transport_evolve(u, v, eps, 4.0, 0.01, store_every=400).final
        assert (standalone.Pminus - coupled.final.Pminus).norm(0) <= 1e-6 * coupled.final.transport.norm(0)
        # both encodings of the transport field agree
        s = coupled.final
        assert (s.Pminus - standalone.Pminus).norm(0) <= 1e-8 * max(1.0, s.transport.norm(0))
        assert (s.phiMinus - standalone.phiMinus).norm(0) <= 1e-8 * max(1.0, s.transport.norm(0))


@pytest.fixture(scope="module")
def collision():
    grid = make_grid(512, 64.0)
    eps = 0.1
    start = ModulationState.initial(eps, soliton(grid, 1.0, -3.0), soliton(grid, 1.0, 3.0))
    return evolve_hierarchy(start, 6.0, 0.01, store_every=5)


class TestHierarchy:
    def test_zero_state_is_stationary(self, grid64):
        z = Field.zeros(grid64)
        traj = evolve_hierarchy(ModulationState.initial(0.2, z, z), 1.0, 0.05)
        assert all(np.all(s.spectra() == 0) for s in traj.states)

    def test_one_sided_data_has_no_wave_part(self, grid64):
        traj = evolve_hierarchy(ModulationState.initial(0.1, soliton(grid64, 1.0), Field.zeros(grid64)), 2.0, 0.01)
        s = traj.final
        assert np.max(np.abs(s.W3.values)) == 0.0 and np.max(np.abs(s.transport.values)) == 0.0

    def test_wave_part_small_before_collision(self):
        grid = make_grid(512, 64.0)
        start = ModulationState.initial(0.1, soliton(grid, 1.0, -16.0), soliton(grid, 1.0, 16.0))
        traj = evolve_hierarchy(start, 4.0, 0.01, store_every=50)
        for s in traj.states:
            assert np.max(np.abs(s.W3.values)) <= 1e-7

    def test_step_reversibility(self, collision):
        s = collision.states[len(collision.states) // 2]
        back = advance(advance(s, 0.01), -0.01)
        assert np.max(np.abs(back.spectra() - s.spectra())) <= 1e-8 * np.max(np.abs(s.spectra()))

    def test_comoving_pullback_drifts_slowly(self, collision):
        eps = 0.1
        pulled = [(s.tau, s.phiMinus) for s in collision.states[-3:]]
        (t0, a), (t1, b) = pulled[0], pulled[1]
        assert (b - a).norm(0) <= 50.0 * eps ** 2 * (t1 - t0) * max(1.0, a.norm(0))

    def test_boundary_stays_quiet(self, collision):
        assert max(m.boundary for m in collision.meta["monitors"]) < 1e-8

    def test_w3_evolve_matches_coupled_solver(self, collision):
        w3 = w3_evolve(collision, 0.1)
        for tau, (field, _) in zip(w3.times, w3.states):
            j = int(np.argmin(np.abs(collision.times - tau)))
            ref = collision.states[j].W3
            assert (field - ref).norm(0) <= 1e-4 * max(1e-6, max(s.W3.norm(0) for s in collision.states))

    def test_w3_evolve_matches_direct_quadrature(self, collision):
        w3 = w3_evolve(collision, 0.1)
        sources = np.stack([wave_source(s).values for s in collision.states])
        direct = w3_direct_quadrature(sources, collision.times, collision.states[0].grid)
        scale = w3.final[0].norm(0)
        assert (w3.final[0] - direct).norm(0) <= 1e-3 * scale

    def test_w3_evolve_needs_even_intervals(self, collision):
        with pytest.raises(ValueError):
            w3_evolve(Trajectory(collision.times[:4], collision.states[:4], "tau"), 0.1)


class TestTrajectory:
    def test_time_ordering(self, grid64):
        z = Field.zeros(grid64)
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 0.0]), [z, z])

    def test_sample_interpolates_and_guards_coverage(self, grid64):
        traj = kdv_evolve(soliton(grid64, 1.0), "right", 0.2, 0.01, store_every=2)
        mid = traj.sample(0.05)
        exact = soliton(grid64, 1.0, 0.025).values
        assert np.max(np.abs(mid - exact)) <= 1e-6
        with pytest.raises(SolverAbort):
            traj.sample(0.3)

    @pytest.mark.parametrize("kind", ["field", "modulation", "tuple"])
    def test_save_load_round_trip(self, tmp_path, grid64, collision, kind):
        if kind == "field":
            traj = kdv_evolve(soliton(grid64, 1.0), "right", 0.1, 0.05)
        elif kind == "modulation":
            traj = Trajectory(collision.times[:3], collision.states[:3], "tau", {"eps": 0.1})
        else:
            z = Field.zeros(grid64)
            traj = linkdv_evolve(soliton(grid64, 1.0), z, None, None, None, None, 0.1, 0.05)
        back = Trajectory.load(traj.save(tmp_path / kind))
        np.testing.assert_array_equal(back.times, traj.times)
        assert back.time_name == traj.time_name
        for a, b in zip(traj.states, back.states):
            if kind == "modulation":
                np.testing.assert_array_equal(a.spectra(), b.spectra())
                assert a.tau == b.tau and a.eps == b.eps
            elif kind == "tuple":
                for x, y in zip(a, b):
                    np.testing.assert_array_equal(x.values, y.values)
            else:
                np.testing.assert_array_equal(a.values, b.values)


def test_state_validation(grid64):
    z = Field.zeros(grid64)
    with pytest.raises(ValueError):
        ModulationState.initial(1.5, z, z)
    other = Field.zeros(make_grid(128, 64.0))
    with pytest.raises(ValueError):
        ModulationState.initial(0.1, z, other)
