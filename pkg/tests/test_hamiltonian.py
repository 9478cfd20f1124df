"""Coupled-operator assembly, Hermiticity, Crank-Nicolson stepping."""

import math

import numpy as np
import pytest

from singfock.fock import extraction_vector, flatten_field, make_state, unflatten_field
from singfock.geometry import GeometryParams, SpatialGrid
from singfock.hamiltonian import (KAPPA_FACTOR, AssemblyError, FockVector,
                                  assemble, make_stepper, step)
from singfock.spinor import make_boundary_profile


@pytest.fixture(scope="module")
def model():
    params = GeometryParams(mass_parameter=0.0, charge=0.5)
    grid = SpatialGrid.build(n_radial_cells=4, r_max=0.8, n_theta=2, n_phi=4)
    profile = make_boundary_profile()
    H = assemble(params, grid, profile, n_max=2)
    return params, grid, profile, H


def test_coupling_constant_value():
    # hbar * sqrt(32 pi^3) with hbar = 1
    assert KAPPA_FACTOR == pytest.approx(31.499219891444838, rel=1e-15)
    assert KAPPA_FACTOR == pytest.approx(math.sqrt(32.0 * math.pi ** 3))


class TestHermiticity:
    def test_decoupled_massless(self, rng):
        params = GeometryParams(mass_parameter=0.0, charge=0.5)
        grid = SpatialGrid.build(4, 0.8, 2, 4)
        H = assemble(params, grid, n_max=1, coupling_enabled=False)
        assert H.hermiticity_residual(rng) < 1e-12

    def test_full_coupled(self, model, rng):
        H = model[3]
        assert H.hermiticity_residual(rng, n_pairs=16) < 1e-10

    def test_broken_adjoint_detected(self, rng):
        params = GeometryParams(mass_parameter=0.0, charge=0.5)
        grid = SpatialGrid.build(4, 0.8, 2, 4)
        with pytest.raises(AssemblyError):
            assemble(params, grid, n_max=1, symmetrize=False)
        H = assemble(params, grid, n_max=1, symmetrize=False, check=False)
        assert H.hermiticity_residual(rng) > 1e-10


class TestCouplingAction:
    def test_balanced_trace_gives_zero(self, model, rng):
        # psi1 orthogonal to the extraction vector has equal +- trace parts,
        # so the annihilation channel vanishes; in the one-particle truncation
        # (no pair sector to create into) the whole coupling image is zero
        params, grid, profile, _ = model
        H1 = assemble(params, grid, profile, n_max=1)
        e = extraction_vector(grid, profile)
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        p1f = flatten_field(rng.standard_normal(shape)
                            + 1j * rng.standard_normal(shape))
        p1f -= e * (np.vdot(e, p1f) / np.vdot(e, e))
        z = FockVector(0.0, unflatten_field(p1f, grid), None)
        out = H1.apply_full(z, coupling_only=True)
        assert abs(out.amplitude_empty) < 1e-12
        np.testing.assert_allclose(out.psi1, 0.0, atol=1e-12)

    def test_unbalanced_trace_drains(self, model, rng):
        # same construction without the projection feeds the empty sector
        params, grid, profile, _ = model
        H1 = assemble(params, grid, profile, n_max=1)
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        out = H1.apply_full(FockVector(0.0, p1, None), coupling_only=True)
        assert abs(out.amplitude_empty) > 1e-6

    def test_zero_state_maps_to_zero(self, model):
        H = model[3]
        z = FockVector(0.0, np.zeros((4, 2, 4, 4), dtype=complex),
                       np.zeros((H.n1, H.n1), dtype=complex))
        out = H.apply_full(z)
        assert out.amplitude_empty == 0.0
        np.testing.assert_allclose(out.psi1, 0.0)
        np.testing.assert_allclose(out.psi2, 0.0)

    def test_coupling_disabled_drops_exchange(self, model, rng):
        params, grid, profile, _ = model
        H0 = assemble(params, grid, profile, n_max=2, coupling_enabled=False)
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        z = FockVector(0.7 + 0.1j, p1, np.zeros((H0.n1, H0.n1)))
        out = H0.apply_full(z, coupling_only=True)
        assert abs(out.amplitude_empty) == 0.0
        np.testing.assert_allclose(out.psi1, 0.0)


class TestDenseAgreement:
    def test_single_particle_block_two_paths(self, model, rng):
        # einsum tensor application vs the kron-assembled dense matrix
        params, grid, profile, H = model
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        psi1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        via_apply = flatten_field(H.apply_H1(psi1))
        via_dense = H.h1_dense() @ flatten_field(psi1)
        np.testing.assert_allclose(via_apply, via_dense, atol=1e-11)

    def test_apply_is_linear(self, model, rng):
        params, grid, profile, H = model
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)

        def rand_vec():
            p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            raw = (rng.standard_normal((H.n1, H.n1))
                   + 1j * rng.standard_normal((H.n1, H.n1)))
            return FockVector(complex(rng.standard_normal()), p1,
                              0.5 * (raw - raw.T))

        za, zb = rand_vec(), rand_vec()
        c = 0.3 - 1.7j
        combo = FockVector(za.amplitude_empty + c * zb.amplitude_empty,
                           za.psi1 + c * zb.psi1, za.psi2 + c * zb.psi2)
        ha, hb, hc = H.apply_full(za), H.apply_full(zb), H.apply_full(combo)
        assert hc.amplitude_empty == pytest.approx(
            ha.amplitude_empty + c * hb.amplitude_empty, abs=1e-10)
        np.testing.assert_allclose(hc.psi1, ha.psi1 + c * hb.psi1, atol=1e-10)
        np.testing.assert_allclose(hc.psi2, ha.psi2 + c * hb.psi2, atol=1e-10)


class TestStepping:
    def _random_state(self, model, rng, n_max=2):
        params, grid, profile, H = model
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        p2 = None
        if n_max == 2:
            p2 = rng.standard_normal((H.n1, H.n1)) * (1 + 0j)
        return make_state(params, grid, profile, 0.4 + 0.2j, p1, p2,
                          n_max=n_max, normalize=True)

    def test_vanishing_dt_approaches_identity(self, model, rng):
        st0 = self._random_state(model, rng)
        st1 = step(model[3], st0, 1e-9)
        assert st1.amplitude_empty == pytest.approx(st0.amplitude_empty,
                                                    abs=1e-6)
        np.testing.assert_allclose(st1.psi1, st0.psi1, atol=1e-6)
        with pytest.raises(ValueError):
            step(model[3], st0, 0.0)

    def test_norm_preserved_per_step(self, model, rng):
        st = self._random_state(model, rng)
        for _ in range(5):
            st2 = step(model[3], st, 0.01)
            assert abs(st2.total_norm_sq() - st.total_norm_sq()) < 1e-10
            st = st2

    def test_richardson_order(self, model, rng):
        H = model[3]
        st0 = self._random_state(model, rng)

        def local_error(dt):
            full = step(H, st0, dt)
            half = step(H, step(H, st0, dt / 2), dt / 2)
            d = abs(full.amplitude_empty - half.amplitude_empty) ** 2
            d += np.sum(np.abs(full.psi1 - half.psi1) ** 2)
            d += 0.5 * np.sum(np.abs(full.psi2 - half.psi2) ** 2)
            return math.sqrt(d)

        e1, e2 = local_error(0.0025), local_error(0.00125)
        assert e1 / e2 == pytest.approx(8.0, rel=0.1)

    def test_drift_over_many_steps(self, model, rng):
        H = model[3]
        st = self._random_state(model, rng)
        stepper = make_stepper(H, 0.01)
        stepper.load(st)
        n0 = stepper.state.total_norm_sq()
        for _ in range(100):
            stepper.advance()
        assert abs(stepper.state.total_norm_sq() - n0) < 1e-9

    def test_spectral_and_gmres_agree(self, rng):
        params = GeometryParams(mass_parameter=0.0, charge=0.5)
        grid = SpatialGrid.build(4, 0.8, 2, 4)
        profile = make_boundary_profile()
        H = assemble(params, grid, profile, n_max=1)
        shape = (grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)
        p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        st = make_state(params, grid, profile, 0.2, p1, n_max=1,
                        normalize=True)
        a = step(H, st, 0.005, method="spectral")
        b = step(H, st, 0.005, method="gmres")
        np.testing.assert_allclose(a.psi1, b.psi1, atol=1e-8)
        assert a.amplitude_empty == pytest.approx(b.amplitude_empty, abs=1e-8)

    def test_time_advances(self, model, rng):
        st = self._random_state(model, rng)
        out = step(model[3], st.with_time(2.0), 0.25)
        assert out.time == pytest.approx(2.25)
