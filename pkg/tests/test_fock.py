"""Truncated states, boundary traces, decomposition, configuration sampling."""

import math

import numpy as np
import pytest
from scipy import stats

from singfock.fock import (BoundaryConditionError, Configuration,
                           NormalizationError, boundary_trace,
                           check_boundary_conditions, decompose_boundary,
                           decompose_raw_row, extraction_vector,
                           flatten_field, make_state, raw_row_residuals,
                           sample_configuration, unflatten_field, wedge,
                           weight_field, weight_flat)
from singfock.geometry import (GeometryParams, SpatialGrid, inv_lambda,
                               inv_lambda_antiderivative)

from conftest import state_with_trace as _state_with_trace

SQRT_8PI = math.sqrt(8.0 * math.pi)
FOUR_PI = 4.0 * math.pi


class TestWeights:
    def test_shape_and_positivity(self, desk_params, small_grid):
        w = weight_field(desk_params, small_grid)
        K, nt, npph = (small_grid.n_radial_cells, small_grid.n_theta,
                       small_grid.n_phi)
        assert w.shape == (K, nt, npph)
        assert np.all(w > 0)

    def test_flat_expansion(self, desk_params, small_grid):
        w = weight_field(desk_params, small_grid)
        wf = weight_flat(desk_params, small_grid)
        assert wf.size == w.size * 4
        np.testing.assert_allclose(wf.reshape(-1, 4)[:, 0], w.reshape(-1))


class TestNormalization:
    def test_sector_masses_sum(self, desk_params, small_grid, profile, rng):
        psi1 = rng.standard_normal((6, 2, 4, 4)) * (1 + 0j)
        st = make_state(desk_params, small_grid, profile, 0.3, psi1,
                        n_max=1, normalize=True)
        assert st.total_norm_sq() == pytest.approx(1.0, rel=1e-12)

    def test_zero_state_rejected(self, desk_params, small_grid, profile):
        with pytest.raises(NormalizationError):
            make_state(desk_params, small_grid, profile, 0.0, n_max=1,
                       normalize=True)

    def test_pair_sector_antisymmetrized(self, desk_params, small_grid,
                                         profile, rng):
        n1 = small_grid.n_interior * 4
        raw = rng.standard_normal((n1, n1)) * (1 + 0j)
        st = make_state(desk_params, small_grid, profile, 1.0, psi2=raw)
        np.testing.assert_allclose(st.psi2, -st.psi2.T, atol=1e-13)


class TestBoundaryTrace:
    def test_product_state_recovers_profile(self, desk_params, small_grid,
                                            profile):
        chi = 0.7 - 0.2j
        st = _state_with_trace(desk_params, small_grid, profile, chi, 0.0)
        row = boundary_trace(st, 1)
        np.testing.assert_allclose(row - chi * profile.plus, 0.0, atol=1e-12)

    def test_vanishing_state_traces_to_zero(self, desk_params, small_grid,
                                            profile):
        psi1 = np.zeros((6, 2, 4, 4), dtype=complex)
        psi1[3] = 1.0  # support away from the inner shell
        st = make_state(desk_params, small_grid, profile, 0.0, psi1, n_max=1)
        np.testing.assert_allclose(boundary_trace(st, 1), 0.0, atol=1e-15)

    def test_pair_trace_antisymmetric_in_spectator(self, desk_params,
                                                   small_grid, profile, rng):
        n1 = small_grid.n_interior * 4
        raw = rng.standard_normal((n1, n1)) + 1j * rng.standard_normal((n1, n1))
        st = make_state(desk_params, small_grid, profile, 0.1, psi2=raw)
        tr = boundary_trace(st, 2)
        assert tr.shape == (n1, small_grid.n_theta, small_grid.n_phi, 4)


class TestDecomposition:
    def test_matches_quadrature(self, desk_params, small_grid, profile):
        st = _state_with_trace(desk_params, small_grid, profile,
                               1.1 + 0.4j, -0.3j)
        got_p, got_m = decompose_boundary(st, 1)
        row = boundary_trace(st, 1)
        v = small_grid.angular_weights
        want_p = np.einsum("jk,s,jks->", v, np.conj(profile.plus), row)
        want_m = np.einsum("jk,s,jks->", v, np.conj(profile.minus), row)
        assert got_p == pytest.approx(want_p, abs=1e-12)
        assert got_m == pytest.approx(want_m, abs=1e-12)

    def test_pure_plus_component(self, desk_params, small_grid, profile):
        chi = 0.9 + 0.1j
        st = _state_with_trace(desk_params, small_grid, profile, chi, 0.0)
        psi_p, psi_m = decompose_boundary(st, 1)
        assert psi_p == pytest.approx(FOUR_PI * chi, abs=1e-12)
        assert abs(psi_m) < 1e-12

    def test_linearity_equal_mix(self, desk_params, small_grid, profile):
        st = _state_with_trace(desk_params, small_grid, profile, 1.0, 1.0)
        psi_p, psi_m = decompose_boundary(st, 1)
        assert psi_p == pytest.approx(FOUR_PI, abs=1e-12)
        assert psi_m == pytest.approx(FOUR_PI, abs=1e-12)

    def test_off_subspace_row_rejected(self, small_grid, profile):
        row = np.zeros((small_grid.n_theta, small_grid.n_phi, 4),
                       dtype=complex)
        row[..., 1] = 1.0  # orthogonal to span{phi_+, phi_-}
        with pytest.raises(BoundaryConditionError):
            decompose_raw_row(small_grid, profile, row)

    def test_residual_report(self, desk_params, small_grid, profile, rng):
        st = _state_with_trace(desk_params, small_grid, profile, 0.5, 0.25)
        rep = check_boundary_conditions(st)
        assert rep["sector1"][0] < 1e-10
        assert rep["sector1"][1] < 1e-10
        bad = rng.standard_normal((small_grid.n_theta, small_grid.n_phi, 4))
        r1, _ = raw_row_residuals(small_grid, profile, bad * (1 + 0j), 0.0)
        assert r1 > 1e-3


class TestWedge:
    def test_antisymmetry(self, rng):
        a = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        b = rng.standard_normal(5) + 1j * rng.standard_normal(5)
        w = wedge(a, b)
        np.testing.assert_allclose(w, -w.T, atol=1e-14)
        np.testing.assert_allclose(wedge(a, a), 0.0, atol=1e-14)


class TestSampling:
    def test_point_mass_lands_in_its_cell(self, desk_params, small_grid,
                                          profile, rng):
        psi1 = np.zeros((6, 2, 4, 4), dtype=complex)
        psi1[2, 1, 3, 0] = 1.0
        st = make_state(desk_params, small_grid, profile, 0.0, psi1,
                        n_max=1, normalize=True)
        r_lo = small_grid.r[3] - 0.5 * small_grid.h
        r_hi = small_grid.r[3] + 0.5 * small_grid.h
        for _ in range(100):
            q = sample_configuration(st, rng)
            assert q.sector == 1
            r, theta, phi = q.positions[0]
            assert r_lo <= r <= r_hi
            # theta cells are ordered by ascending cos(theta)
            assert math.cos(theta) > 0
            assert abs((phi - small_grid.phi[3] + math.pi) % (2 * math.pi)
                       - math.pi) <= small_grid.w_phi / 2 + 1e-12

    def test_sector_frequencies(self, desk_params, small_grid, profile, rng):
        psi1 = np.zeros((6, 2, 4, 4), dtype=complex)
        psi1[4, 0, 0, 2] = 1.0
        st = make_state(desk_params, small_grid, profile,
                        1.0, psi1, n_max=1, normalize=True)
        m0 = st.sector_masses()[0]
        n = 10_000
        hits = sum(sample_configuration(st, rng).sector == 0
                   for _ in range(n))
        sigma = math.sqrt(n * m0 * (1 - m0))
        assert abs(hits - n * m0) <= 3.0 * sigma

    def test_uniform_cell_law_gof(self, desk_params, small_grid, profile, rng):
        w = weight_field(desk_params, small_grid)
        psi1 = (1.0 / np.sqrt(w))[..., None] * np.array([1.0, 0, 0, 0])
        st = make_state(desk_params, small_grid, profile, 0.0,
                        psi1.astype(complex), n_max=1, normalize=True)
        ncells = small_grid.n_interior
        n = 12_000
        counts = np.zeros(ncells)
        nt, npph = small_grid.n_theta, small_grid.n_phi
        for _ in range(n):
            q = sample_configuration(st, rng)
            r, theta, phi = q.positions[0]
            i = int(np.clip(round(r / small_grid.h), 1, 6)) - 1
            j = 1 if math.cos(theta) > 0 else 0
            k = int(round(phi / small_grid.w_phi)) % npph
            counts[(i * nt + j) * npph + k] += 1
        gof = stats.chisquare(counts)
        assert gof.pvalue > 0.01

    def test_empirical_law_total_variation(self, desk_params, small_grid,
                                           profile, rng):
        shape = (6, 2, 4, 4)
        psi1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        st = make_state(desk_params, small_grid, profile, 0.8, psi1,
                        n_max=1, normalize=True)
        w = weight_field(desk_params, small_grid)
        cell_mass = (w * np.sum(np.abs(st.psi1) ** 2, axis=-1)).reshape(-1)
        law = np.concatenate([[abs(st.amplitude_empty) ** 2], cell_mass])
        n = 100_000
        counts = np.zeros(law.size)
        nt, npph = small_grid.n_theta, small_grid.n_phi
        for _ in range(n):
            q = sample_configuration(st, rng)
            if q.sector == 0:
                counts[0] += 1
                continue
            r, theta, phi = q.positions[0]
            i = int(np.clip(round(r / small_grid.h), 1, 6)) - 1
            j = 1 if math.cos(theta) > 0 else 0
            k = int(round(phi / small_grid.w_phi)) % npph
            counts[1 + (i * nt + j) * npph + k] += 1
        tv = 0.5 * np.abs(counts / n - law / law.sum()).sum()
        assert tv <= 0.02

    def test_in_cell_radial_law(self, profile, rng):
        # strong lambda variation across the sampled cell
        params = GeometryParams(mass_parameter=0.0, charge=0.5)
        grid = SpatialGrid.build(n_radial_cells=3, r_max=1.2, n_theta=2,
                                 n_phi=4)
        psi1 = np.zeros((3, 2, 4, 4), dtype=complex)
        psi1[0, 0, 0, 0] = 1.0
        st = make_state(params, grid, profile, 0.0, psi1, n_max=1,
                        normalize=True)
        rs = np.array([sample_configuration(st, rng).positions[0, 0]
                       for _ in range(8000)])
        hi = 1.5 * grid.h
        assert np.all(rs <= hi + 1e-12)
        z = inv_lambda_antiderivative(params, hi)

        def cdf(r):
            return inv_lambda_antiderivative(params, np.asarray(r)) / z

        ks = stats.ks_1samp(rs, cdf)
        assert ks.pvalue > 0.01

    def test_unnormalized_state_rejected(self, desk_params, small_grid,
                                         profile, rng):
        psi1 = np.full((6, 2, 4, 4), 0.5 + 0j)
        st = make_state(desk_params, small_grid, profile, 0.0, psi1, n_max=1)
        with pytest.raises(NormalizationError):
            sample_configuration(st, rng)


class TestConfiguration:
    def test_interior_only(self):
        with pytest.raises(ValueError):
            Configuration(1, np.array([[0.0, 1.0, 1.0]]))

    def test_distinct_points(self):
        p = np.array([[0.5, 1.0, 2.0], [0.5, 1.0, 2.0]])
        with pytest.raises(ValueError):
            Configuration(2, p)

    def test_empty(self):
        q = Configuration(0, np.zeros((0, 3)))
        assert q.positions.shape == (0, 3)
