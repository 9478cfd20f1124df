"""Fock-space Dirac dynamics on a naked-singularity background.

Truncated (0/1/2-particle) second-quantized evolution with an interior
boundary condition tying the wave function at the origin to pair creation
and annihilation, plus the particle-trajectory Markov process guided by it.
"""

from .config import RunConfig, ConfigError, default_config, parse_config
from .geometry import (GeometryParams, SpatialGrid, GeometryError,
                       lambda_of, inv_lambda, inv_lambda_antiderivative,
                       radial_null_geodesic, static_proper_time)
from .spinor import BoundaryProfile, make_boundary_profile, dirac_matrices
from .fock import (FockState, Configuration, make_state, sample_configuration,
                   weight_field, check_boundary_conditions)
from .hamiltonian import (DiscreteHamiltonian, FockVector, assemble,
                          make_stepper, step, KAPPA_FACTOR)
from .currents import (GuidanceTables, velocity_at, density,
                       singularity_flux, exchange_rates, run_balance_audit)
from .bohm import run_markov, MarkovResult, EventRecord, EventLog
from .rngstreams import trajectory_rng, master_rng

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "ConfigError", "default_config", "parse_config",
    "GeometryParams", "SpatialGrid", "GeometryError",
    "lambda_of", "inv_lambda", "inv_lambda_antiderivative",
    "radial_null_geodesic", "static_proper_time",
    "BoundaryProfile", "make_boundary_profile", "dirac_matrices",
    "FockState", "Configuration", "make_state", "sample_configuration",
    "weight_field", "check_boundary_conditions",
    "DiscreteHamiltonian", "FockVector", "assemble", "make_stepper", "step",
    "KAPPA_FACTOR",
    "GuidanceTables", "velocity_at", "density",
    "singularity_flux", "exchange_rates", "run_balance_audit",
    "run_markov", "MarkovResult", "EventRecord", "EventLog",
    "trajectory_rng", "master_rng",
    "__version__",
]
