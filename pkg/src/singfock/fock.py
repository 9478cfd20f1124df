"""Truncated Fock states on the grid and the boundary-trace algebra.

Storage convention: the N = 1 sector is an interior field of shape
(K, n_theta, n_phi, 4) whose radial slot a corresponds to node r_{a+1}; the
N = 2 sector is a square antisymmetric matrix over the flattened interior
index y = ((a * n_theta + j) * n_phi + k) * 4 + s.  Values at the boundary
shell r = 0 are never degrees of freedom: they are derived trace views
reconstructed from the pair of boundary conditions

    (i)  the trace lies pointwise in span{phi_+, phi_-},
    (ii) sqrt(8 pi) * psi_{N-1} equals the sum of the two trace coefficients,

so both conditions hold identically for every state this module produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .geometry import GeometryParams, SpatialGrid, inv_lambda
from .spinor import BoundaryProfile, antisymmetrize

SQRT_8PI = math.sqrt(8.0 * math.pi)
FOUR_PI = 4.0 * math.pi


class BoundaryConditionError(ValueError):
    """A supplied boundary row is not expressible in the profile subspace."""

    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"boundary-condition residual {residual:.3e} above tolerance")


class NormalizationError(ValueError):
    pass


def weight_field(params: GeometryParams, grid: SpatialGrid) -> np.ndarray:
    """Interior quadrature-times-density weights w_r * v_ang / lambda, shape (K, nt, np)."""
    r_int = grid.r[1:]
    w = grid.w_r[1:] * inv_lambda(params, r_int)
    return w[:, None, None] * grid.angular_weights[None, :, :]


def bare_weight_field(grid: SpatialGrid) -> np.ndarray:
    """Plain coordinate-volume weights w_r * v_ang on interior nodes."""
    return grid.w_r[1:, None, None] * grid.angular_weights[None, :, :]


def flatten_field(field: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(field).reshape(-1)

def unflatten_field(flat: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    return flat.reshape(grid.n_radial_cells, grid.n_theta, grid.n_phi, 4)


def weight_flat(params: GeometryParams, grid: SpatialGrid) -> np.ndarray:
    """weight_field broadcast over the spinor index and flattened to (n1,)."""
    wf = weight_field(params, grid)
    return np.repeat(flatten_field_spatial(wf), 4)


def flatten_field_spatial(field: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(field).reshape(-1)


def extraction_vector(grid: SpatialGrid, profile: BoundaryProfile) -> np.ndarray:
    """The trace-extraction functional e, supported on the first interior shell.

    conj(e) . psi1 approximates the angular average of (phi_+ - phi_-)^dagger
    applied to the boundary trace; on a field whose inner shell equals
    u_+ phi_+ + u_- phi_- it returns exactly u_+ - u_-.
    """
    K, nt, npφ = grid.n_radial_cells, grid.n_theta, grid.n_phi
    e = np.zeros((K, nt, npφ, 4), dtype=complex)
    e[0] = (grid.angular_weights[:, :, None] / FOUR_PI) * profile.difference[None, None, :]
    return flatten_field(e)


@dataclass(frozen=True)
class Configuration:
    """A finite interior point set with its sector label; positions are (r, theta, phi)."""

    sector: int
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(self.sector, 3)
        object.__setattr__(self, "positions", pos)
        if self.sector < 0:
            raise ValueError("sector must be >= 0")
        if self.sector and np.any(pos[:, 0] <= 0):
            raise ValueError("configuration points must lie in the interior r > 0")
        if self.sector > 1:
            for i in range(self.sector):
                for j in range(i + 1, self.sector):
                    if np.array_equal(pos[i], pos[j]):
                        raise ValueError("configuration points must be pairwise distinct")


@dataclass(frozen=True)
class FockState:
    """Truncated state (psi0, psi1, psi2) at one instant of coordinate time."""

    params: GeometryParams
    grid: SpatialGrid
    profile: BoundaryProfile
    amplitude_empty: complex
    psi1: np.ndarray
    psi2: Optional[np.ndarray]
    time: float = 0.0

    def __post_init__(self):
        K, nt, npφ = self.grid.n_radial_cells, self.grid.n_theta, self.grid.n_phi
        if self.psi1.shape != (K, nt, npφ, 4):
            raise ValueError("psi1 must be an interior field (K, n_theta, n_phi, 4)")
        if self.psi2 is not None:
            n1 = K * nt * npφ * 4
            if self.psi2.shape != (n1, n1):
                raise ValueError("psi2 must be a square matrix over the interior index")

    @property
    def n_max(self) -> int:
        return 1 if self.psi2 is None else 2

    @property
    def n1(self) -> int:
        return self.psi1.size

    def with_time(self, t: float) -> "FockState":
        return replace(self, time=t)

    # -- traces ---------------------------------------------------------------

    def trace_coefficients(self):
        """Sector-1 trace pair (u_+, u_-) derived from psi0 and the inner shell."""
        e = extraction_vector(self.grid, self.profile)
        delta = np.vdot(e, flatten_field(self.psi1))
        base = SQRT_8PI * self.amplitude_empty
        return 0.5 * (base + delta), 0.5 * (base - delta)

    def trace_fields(self):
        """Sector-2 trace pair (U_+, U_-) as (n1,) arrays over the spectator index."""
        if self.psi2 is None:
            raise ValueError("state has no two-particle sector")
        e = extraction_vector(self.grid, self.profile)
        delta = self.psi2 @ np.conj(e)
        base = SQRT_8PI * flatten_field(self.psi1)
        return 0.5 * (base + delta), 0.5 * (base - delta)

    def psi1_full(self) -> np.ndarray:
        """Sector-1 field including the derived boundary shell, (K+1, nt, np, 4)."""
        K, nt, npφ = self.grid.n_radial_cells, self.grid.n_theta, self.grid.n_phi
        full = np.empty((K + 1, nt, npφ, 4), dtype=complex)
        up, um = self.trace_coefficients()
        full[0] = up * self.profile.plus + um * self.profile.minus
        full[1:] = self.psi1
        return full

    def psi2_trace_field(self) -> np.ndarray:
        """Trace of psi2 in its second slot, shape (n1, n_theta, n_phi, 4)."""
        upf, umf = self.trace_fields()
        nt, npφ = self.grid.n_theta, self.grid.n_phi
        out = np.empty((self.n1, nt, npφ, 4), dtype=complex)
        out[:] = upf[:, None, None, None] * self.profile.plus
        out += umf[:, None, None, None] * self.profile.minus
        return out

    def psi2_full(self) -> np.ndarray:
        """Two-particle field extended by trace stripes to the full node set.

        The doubly-boundary block (both slots at r = 0) is set to zero; it is
        only ever read by interpolation when both particles sit inside the
        innermost cell simultaneously, which carries negligible weight.
        """
        if self.psi2 is None:
            raise ValueError("state has no two-particle sector")
        K, nt, npφ = self.grid.n_radial_cells, self.grid.n_theta, self.grid.n_phi
        shell = nt * npφ * 4
        nfull = (K + 1) * shell
        full = np.zeros((nfull, nfull), dtype=complex)
        tr = self.psi2_trace_field().reshape(self.n1, shell)
        full[shell:, shell:] = self.psi2
        full[shell:, :shell] = tr
        full[:shell, shell:] = -tr.T
        return full

    # -- masses ---------------------------------------------------------------

    def sector_masses(self) -> np.ndarray:
        w = weight_flat(self.params, self.grid)
        p1 = flatten_field(self.psi1)
        m0 = abs(self.amplitude_empty) ** 2
        m1 = float(np.real(np.vdot(p1, w * p1)))
        if self.psi2 is None:
            return np.array([m0, m1])
        m2 = 0.5 * float(np.einsum("y,z,yz->", w, w, np.abs(self.psi2) ** 2))
        return np.array([m0, m1, m2])

    def total_norm_sq(self) -> float:
        return float(self.sector_masses().sum())

    def normalized(self) -> "FockState":
        n = math.sqrt(self.total_norm_sq())
        if n == 0:
            raise NormalizationError("cannot normalize the zero state")
        psi2 = None if self.psi2 is None else self.psi2 / n
        return replace(self, amplitude_empty=self.amplitude_empty / n,
                       psi1=self.psi1 / n, psi2=psi2)


def boundary_trace(state: FockState, sector: int) -> np.ndarray:
    """Trace of the sector-N field at the singularity shell, singularity slot last.

    sector=1 returns the (n_theta, n_phi, 4) boundary field; sector=2 returns
    the (n1, n_theta, n_phi, 4) family indexed by the spectator.
    """
    if sector == 1:
        return state.psi1_full()[0]
    if sector == 2:
        return state.psi2_trace_field()
    raise ValueError("trace is defined for sectors 1 and 2")


def decompose_boundary(state: FockState, sector: int):
    """The pair Psi_pm = integral phi_pm^dagger psi(.., omega) domega = 4 pi u_pm."""
    if sector == 1:
        up, um = state.trace_coefficients()
    elif sector == 2:
        up, um = state.trace_fields()
    else:
        raise ValueError("decomposition is defined for sectors 1 and 2")
    return FOUR_PI * up, FOUR_PI * um


def decompose_raw_row(grid: SpatialGrid, profile: BoundaryProfile, row: np.ndarray,
                      tol: float = 1e-8):
    """Project an arbitrary boundary row on the profile pair, rejecting misfits.

    row has shape (n_theta, n_phi, 4).  Raises BoundaryConditionError when the
    component orthogonal to span{phi_+, phi_-} exceeds tol in relative norm.
    """
    v = grid.angular_weights
    up = np.einsum("jk,s,jks->", v, np.conj(profile.plus), row) / FOUR_PI
    um = np.einsum("jk,s,jks->", v, np.conj(profile.minus), row) / FOUR_PI
    recon = up * profile.plus + um * profile.minus
    num = np.sqrt(np.einsum("jk,jks->", v, np.abs(row - recon) ** 2).real)
    den = np.sqrt(np.einsum("jk,jks->", v, np.abs(row) ** 2).real)
    if den > 0 and num / den > tol:
        raise BoundaryConditionError(num / den)
    return FOUR_PI * up, FOUR_PI * um


def raw_row_residuals(grid: SpatialGrid, profile: BoundaryProfile, row: np.ndarray,
                      psi_lower: complex):
    """Residuals of both boundary conditions for an arbitrary row field.

    Returns (subspace residual, matching residual): the first measures the part
    of the row outside span{phi_+, phi_-}; the second compares psi_lower with
    (Psi_+ + Psi_-)/(4 pi sqrt(8 pi)).
    """
    v = grid.angular_weights
    up = np.einsum("jk,s,jks->", v, np.conj(profile.plus), row) / FOUR_PI
    um = np.einsum("jk,s,jks->", v, np.conj(profile.minus), row) / FOUR_PI
    recon = up * profile.plus + um * profile.minus
    r1 = float(np.sqrt(np.einsum("jk,jks->", v, np.abs(row - recon) ** 2).real))
    r2 = float(abs(psi_lower - (up + um) / SQRT_8PI))
    return r1, r2


def check_boundary_conditions(state: FockState) -> dict:
    """Residual report per sector; identically ~0 for states built by this package."""
    report = {}
    row1 = boundary_trace(state, 1)
    report["sector1"] = raw_row_residuals(state.grid, state.profile, row1,
                                          state.amplitude_empty)
    if state.psi2 is not None:
        tr = boundary_trace(state, 2)
        p1 = flatten_field(state.psi1)
        worst = (0.0, 0.0)
        for y in range(0, state.n1, max(1, state.n1 // 16)):
            r1, r2 = raw_row_residuals(state.grid, state.profile, tr[y], p1[y])
            worst = (max(worst[0], r1), max(worst[1], r2))
        report["sector2"] = worst
    return report


def wedge(a_flat: np.ndarray, b_flat: np.ndarray) -> np.ndarray:
    """Antisymmetric product a (x) b - b (x) a; unit mass for W-orthonormal pairs."""
    return np.outer(a_flat, b_flat) - np.outer(b_flat, a_flat)


def make_state(params: GeometryParams, grid: SpatialGrid, profile: BoundaryProfile,
               amplitude_empty=0.0, psi1=None, psi2=None, n_max: int = 2,
               time: float = 0.0, normalize: bool = False) -> FockState:
    """Convenience constructor filling absent sectors with zeros."""
    K, nt, npφ = grid.n_radial_cells, grid.n_theta, grid.n_phi
    if psi1 is None:
        psi1 = np.zeros((K, nt, npφ, 4), dtype=complex)
    psi1 = np.asarray(psi1, dtype=complex)
    if n_max >= 2:
        n1 = K * nt * npφ * 4
        if psi2 is None:
            psi2 = np.zeros((n1, n1), dtype=complex)
        psi2 = antisymmetrize(np.asarray(psi2, dtype=complex))
    elif psi2 is not None:
        raise ValueError("psi2 given but n_max < 2")
    else:
        psi2 = None
    st = FockState(params=params, grid=grid, profile=profile,
                   amplitude_empty=complex(amplitude_empty), psi1=psi1, psi2=psi2,
                   time=time)
    return st.normalized() if normalize else st


# -- sampling ----------------------------------------------------------------

def _radial_cell_edges(grid: SpatialGrid) -> np.ndarray:
    h = grid.h
    edges = np.empty(grid.n_radial_cells + 1)
    edges[0] = 0.5 * h
    edges[1:] = grid.r[1:] + 0.5 * h
    edges[-1] = grid.r_max
    return edges

def _cos_theta_cell_edges(grid: SpatialGrid) -> np.ndarray:
    x = grid.cos_theta
    edges = np.empty(len(x) + 1)
    edges[0] = -1.0
    edges[-1] = 1.0
    edges[1:-1] = 0.5 * (x[:-1] + x[1:])
    return edges


def _place_in_cell(params: GeometryParams, grid: SpatialGrid, cell: int,
                   rng: np.random.Generator) -> np.ndarray:
    nt, npφ = grid.n_theta, grid.n_phi
    i, rem = divmod(cell, nt * npφ)
    j, k = divmod(rem, npφ)
    redges = _radial_cell_edges(grid)
    lo = 0.0 if i == 0 else redges[i]
    hi = redges[i + 1]
    # radial law inside the cell follows the volume factor 1/lambda, which
    # vanishes like r^2 toward the center; rejection against the in-cell
    # maximum is exact (1/lambda peaks at charge^2/mass or at an edge)
    cand = [lo, hi]
    if params.mass_parameter > 0:
        rstar = params.charge_sq / params.mass_parameter
        if lo < rstar < hi:
            cand.append(rstar)
    cap = max(max(inv_lambda(params, c) for c in cand), 1e-300)
    while True:
        r = rng.uniform(lo, hi)
        if r > 0 and rng.uniform() * cap <= inv_lambda(params, r):
            break
    xedges = _cos_theta_cell_edges(grid)
    x = rng.uniform(xedges[j], xedges[j + 1])
    phi = (grid.phi[k] + grid.w_phi * (rng.random() - 0.5)) % (2.0 * math.pi)
    return np.array([max(r, 1e-12), math.acos(np.clip(x, -1.0, 1.0)), phi])


def sample_configuration(state: FockState, rng: np.random.Generator) -> Configuration:
    """Draw a configuration from the coordinate-volume density of the state.

    The sector is drawn from the sector masses, the grid cell by inverse CDF on
    per-cell mass, and the radius within the cell from the measure weight
    1/lambda(r) dr (angles uniform in the cell's cos-theta x phi patch).
    """
    masses = state.sector_masses()
    total = masses.sum()
    if abs(total - 1.0) > 1e-8:
        raise NormalizationError(f"state norm^2 = {total:.6f}, expected 1")
    sector = int(rng.choice(len(masses), p=masses / total))
    if sector == 0:
        return Configuration(0, np.zeros((0, 3)))

    K, nt, npφ = state.grid.n_radial_cells, state.grid.n_theta, state.grid.n_phi
    ncells = K * nt * npφ
    w = weight_field(state.params, state.grid)
    if sector == 1:
        pcell = (w * np.sum(np.abs(state.psi1) ** 2, axis=-1)).reshape(-1)
        pcell = pcell / pcell.sum()
        cell = int(rng.choice(ncells, p=pcell))
        return Configuration(1, _place_in_cell(state.params, state.grid, cell, rng)[None, :])

    wfl = weight_flat(state.params, state.grid)
    dens = wfl[:, None] * np.abs(state.psi2) ** 2 * wfl[None, :]
    spat = dens.reshape(ncells, 4, ncells, 4).sum(axis=(1, 3)).reshape(-1)
    spat = spat / spat.sum()
    pair = int(rng.choice(ncells * ncells, p=spat))
    c1, c2 = divmod(pair, ncells)
    while True:
        p1 = _place_in_cell(state.params, state.grid, c1, rng)
        p2 = _place_in_cell(state.params, state.grid, c2, rng)
        if not np.array_equal(p1, p2):
            return Configuration(2, np.stack([p1, p2]))
