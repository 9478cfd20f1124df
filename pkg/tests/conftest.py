import math

import numpy as np
import pytest

from singfock.fock import extraction_vector, make_state, unflatten_field
from singfock.geometry import GeometryParams, SpatialGrid
from singfock.spinor import make_boundary_profile


def state_with_trace(params, grid, profile, c_plus, c_minus):
    """Single-particle state whose derived boundary row is
    c_plus*phi_+ + c_minus*phi_-."""
    e = extraction_vector(grid, profile)
    psi0 = (c_plus + c_minus) / math.sqrt(8.0 * math.pi)
    delta = c_plus - c_minus
    p1f = np.conj(e) * (delta / np.vdot(e, np.conj(e)).real)
    return make_state(params, grid, profile, amplitude_empty=psi0,
                      psi1=unflatten_field(p1f, grid), n_max=1)


@pytest.fixture(scope="session")
def desk_params():
    return GeometryParams(mass_parameter=1.0, charge=2.0)


@pytest.fixture(scope="session")
def flat_params():
    # M=0 keeps lambda = 1 + 1/r^2 analytically simple
    return GeometryParams(mass_parameter=0.0, charge=1.0)


@pytest.fixture(scope="session")
def small_grid():
    return SpatialGrid.build(n_radial_cells=6, r_max=1.2, n_theta=2, n_phi=4)


@pytest.fixture(scope="session")
def profile():
    return make_boundary_profile()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
