"""Probability currents, guidance velocities and the sector-balance audit.

Conventions.  The conserved density on a sector-1 slice is |psi1|^2 / lambda
with respect to dr domega, so the net probability flux through the coordinate
sphere at a radial node is the bare angular quadrature of the alpha1 bilinear,

    flux(i) = sum_jk v_jk Re[psi^H alpha1 psi](i, j, k),

and at the singularity shell this reduces to 4 pi (|u_+|^2 - |u_-|^2) in terms
of the trace pair.  The same expression, evaluated at the Crank-Nicolson
midpoint, is exactly the probability the stepper moves between sectors per unit
time; run_balance_audit checks that identity step by step.

Guidance velocities divide bilinears of the wave:

    dr/dt     = lambda(r) (psi^H alpha1 psi) / (psi^H psi)
    dtheta/dt = lambda(r) a_theta(r) (psi^H alpha2 psi) / (psi^H psi)
    dphi/dt   = lambda(r) a_phi(r, theta) (psi^H alpha3 psi) / (psi^H psi)

The geometric prefactors are evaluated analytically at the particle position;
only the bilinears are interpolated (trilinearly, per tensor slot).  Inside the
innermost radial cell (r below the first cell edge at 1.5 h) the grid carries
no sub-cell structure, so the sector-1 radial velocity there is built from the
one-cell continuity equation instead of node interpolation: with the cell
population shaped like the volume measure 1/lambda and the singularity
exchange assigned to the inner face, the current at in-cell radius r is

    j(r) = f_0 (1 - G(r)) + f_e G(r),   G(r) = A(r) / A(r_edge),

where f_0 is the per-solid-angle trace flux, f_e the internode current at the
outer face and A the closed-form antiderivative of 1/lambda.  Dividing by the
density den_1 / lambda(r) gives a field that sweeps the cell population
through the detection gate at exactly the wave's exchange rate and reduces to
the usual j/rho outside.  Near the center the velocity sign equals the sign of
the trace flux, which the jump one-sidedness checks rely on, and v/lambda
tends to the constant f_0/den_1, so the cubic hit-time refinement in the
guidance loop stays exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fock import FOUR_PI, FockState, flatten_field, weight_flat
from .geometry import (GeometryParams, SpatialGrid, a_theta, inv_lambda,
                       inv_lambda_antiderivative, lambda_of)
from .hamiltonian import DiscreteHamiltonian, make_stepper
from .spinor import dirac_matrices

DENSITY_FLOOR = 1e-14


class UndefinedVelocityError(RuntimeError):
    """Raised by the scalar-position helpers when the local density vanishes."""

    def __init__(self, position, density):
        super().__init__(f"velocity undefined at {position}: density {density:.3e}")
        self.position = position
        self.density = density


def single_node_bilinears(state: FockState):
    """den and alpha-bilinears of the sector-1 field on all shells, (K+1, nt, np)."""
    f = state.psi1_full()
    a1, a2, a3, _ = dirac_matrices()
    den = np.einsum("ijks,ijks->ijk", np.conj(f), f).real
    out = [den]
    for mat in (a1, a2, a3):
        out.append(np.einsum("ijks,st,ijkt->ijk", np.conj(f), mat, f,
                             optimize=True).real)
    return tuple(out)


def pair_node_bilinears(state: FockState):
    """Spectator-summed bilinears of psi2 on node pairs, each (S, S).

    S counts spatial nodes including the boundary shell.  Entry [y, z] guides
    the particle at spatial node y while the other sits at z; by antisymmetry
    the swapped-slot bilinear is the transpose-gather of the same array.
    """
    grid = state.grid
    nt, npphi = grid.n_theta, grid.n_phi
    S = (grid.n_radial_cells + 1) * nt * npphi
    full = state.psi2_full().reshape(S, 4, S, 4)
    a1, a2, a3, _ = dirac_matrices()
    den = np.einsum("ysza,ysza->yz", np.conj(full), full, optimize=True).real
    out = [den]
    for mat in (a1, a2, a3):
        out.append(np.einsum("ysza,st,ytza->yz", np.conj(full), mat, full,
                             optimize=True).real)
    return tuple(out)


def _radial_interp(grid: SpatialGrid, r: np.ndarray):
    """Bracket nodes and weight on the shell axis; pure trace row below r_1."""
    x = r / grid.h
    i0 = np.clip(np.floor(x).astype(int), 0, grid.n_radial_cells - 1)
    t = np.clip(x - i0, 0.0, 1.0)
    t = np.where(i0 == 0, 0.0, t)
    return i0, i0 + 1, t


def _theta_interp(grid: SpatialGrid, theta: np.ndarray):
    """Linear in cos(theta) between collocation nodes, clamped past the ends."""
    xq = np.cos(theta)
    xs = grid.cos_theta
    hi = np.searchsorted(xs, xq)
    lo = np.clip(hi - 1, 0, len(xs) - 1)
    hi = np.clip(hi, 0, len(xs) - 1)
    gap = xs[hi] - xs[lo]
    t = np.where(gap > 0, (xq - xs[lo]) / np.where(gap > 0, gap, 1.0), 0.0)
    return lo, hi, t


def _phi_interp(grid: SpatialGrid, phi: np.ndarray):
    step = 2.0 * np.pi / grid.n_phi
    p = (phi / step) % grid.n_phi
    k0 = np.floor(p).astype(int) % grid.n_phi
    t = p - np.floor(p)
    return k0, (k0 + 1) % grid.n_phi, t


def _corner_weights(grid: SpatialGrid, positions: np.ndarray):
    """(8, B) spatial flat indices over shells*angles and matching weights."""
    r, th, ph = positions[:, 0], positions[:, 1], positions[:, 2]
    i0, i1, tr = _radial_interp(grid, r)
    j0, j1, tt = _theta_interp(grid, th)
    k0, k1, tp = _phi_interp(grid, ph)
    nt, npphi = grid.n_theta, grid.n_phi
    idx, wts = [], []
    for (ia, wa) in ((i0, 1.0 - tr), (i1, tr)):
        for (jb, wb) in ((j0, 1.0 - tt), (j1, tt)):
            for (kc, wc) in ((k0, 1.0 - tp), (k1, tp)):
                idx.append((ia * nt + jb) * npphi + kc)
                wts.append(wa * wb * wc)
    return np.stack(idx), np.stack(wts)


@dataclass
class GuidanceTables:
    """Per-state node tables shared by every trajectory in a batch."""

    state: FockState
    single: tuple
    pair: Optional[tuple]
    net_flux_empty_to_one: float
    conditional_net_flux: Optional[np.ndarray]
    spectator_density: Optional[np.ndarray]
    in_cell: tuple

    @classmethod
    def from_state(cls, state: FockState) -> "GuidanceTables":
        single = single_node_bilinears(state)
        pair = None
        cond = None
        dens1 = None
        up, um = state.trace_coefficients()
        q01 = FOUR_PI * (abs(up) ** 2 - abs(um) ** 2)
        if state.psi2 is not None:
            pair = pair_node_bilinears(state)
            upf, umf = state.trace_fields()
            gp = (np.abs(upf) ** 2).reshape(-1, 4).sum(axis=1)
            gm = (np.abs(umf) ** 2).reshape(-1, 4).sum(axis=1)
            cond = gp - gm
            p1 = flatten_field(state.psi1)
            dens1 = (np.abs(p1) ** 2).reshape(-1, 4).sum(axis=1)
        # innermost-cell continuity data: trace flux, outer-face current, node
        # density, all per solid angle, plus the exact cell volume integral
        den_tab, nr_tab = single[0], single[1]
        redge = 1.5 * state.grid.h
        z_cell = inv_lambda_antiderivative(state.params, redge)
        in_cell = (redge, z_cell, nr_tab[0].copy(),
                   0.5 * (nr_tab[1] + nr_tab[2]), den_tab[1].copy())
        return cls(state=state, single=single, pair=pair,
                   net_flux_empty_to_one=float(q01),
                   conditional_net_flux=cond, spectator_density=dens1,
                   in_cell=in_cell)

    # -- geometric prefactors --------------------------------------------------

    def _prefactors(self, positions: np.ndarray):
        params = self.state.params
        r, th = positions[:, 0], positions[:, 1]
        lam = lambda_of(params, np.maximum(r, 1e-300))
        ath = a_theta(params, r)
        return lam, lam * ath, lam * ath / np.sin(th)

    # -- sector 1 --------------------------------------------------------------

    def velocity_single(self, positions: np.ndarray):
        """Batched guidance velocities; returns (vel (B,3), defined (B,))."""
        positions = np.atleast_2d(positions)
        grid = self.state.grid
        params = self.state.params
        idx, wts = _corner_weights(grid, positions)
        den, nr, nth, nph = (np.einsum("cb,cb->b", wts, tab.reshape(-1)[idx])
                             for tab in self.single)
        vel, defined = self._assemble(positions, den, nr, nth, nph)
        redge, z_cell, f0, fe, den1 = self.in_cell
        inner = positions[:, 0] < redge
        if np.any(inner):
            sub = positions[inner]
            lo, hi, tt = _theta_interp(grid, sub[:, 1])
            k0, k1, tp = _phi_interp(grid, sub[:, 2])

            def _ang(tab):
                return ((1.0 - tt) * ((1.0 - tp) * tab[lo, k0]
                                      + tp * tab[lo, k1])
                        + tt * ((1.0 - tp) * tab[hi, k0] + tp * tab[hi, k1]))

            f0i, fei, d1i = _ang(f0), _ang(fe), _ang(den1)
            frac = inv_lambda_antiderivative(params, sub[:, 0]) / z_cell
            flux = f0i * (1.0 - frac) + fei * frac
            lam = lambda_of(params, np.maximum(sub[:, 0], 1e-12))
            ok = d1i > DENSITY_FLOOR
            vel[inner, 0] = np.where(ok, flux * lam / np.where(ok, d1i, 1.0),
                                     0.0)
            defined[inner] = ok
        return vel, defined

    # -- sector 2 --------------------------------------------------------------

    def velocity_pair(self, positions: np.ndarray):
        """positions (B, 2, 3) -> (vel (B, 2, 3), defined (B,)).

        defined is the AND over both particles; a pair with either velocity
        undefined is treated as one absorbing event by the process driver.
        """
        if self.pair is None:
            raise ValueError("state has no two-particle sector")
        positions = np.asarray(positions, dtype=float)
        B = positions.shape[0]
        idx_a, wts_a = _corner_weights(self.state.grid, positions[:, 0])
        idx_b, wts_b = _corner_weights(self.state.grid, positions[:, 1])
        vel = np.empty((B, 2, 3))
        ok = np.ones(B, dtype=bool)
        for slot, (iy, wy, iz, wz) in enumerate(
                ((idx_a, wts_a, idx_b, wts_b), (idx_b, wts_b, idx_a, wts_a))):
            acc = [np.zeros(B) for _ in range(4)]
            for cy in range(8):
                for cz in range(8):
                    w = wy[cy] * wz[cz]
                    for comp, table in enumerate(self.pair):
                        acc[comp] += w * table[iy[cy], iz[cz]]
            v, defined = self._assemble(positions[:, slot], *acc)
            vel[:, slot, :] = v
            ok &= defined
        return vel, ok

    def _assemble(self, positions, den, nr, nth, nph):
        lam, lth, lph = self._prefactors(positions)
        defined = den > DENSITY_FLOOR
        safe = np.where(defined, den, 1.0)
        vel = np.stack([lam * nr / safe, lth * nth / safe, lph * nph / safe],
                       axis=-1)
        vel[~defined] = 0.0
        return vel, defined

    def conditional_flux_at(self, positions: np.ndarray):
        """Interpolated spectator-conditional net flux and density, interior grid.

        Drives the one-to-two creation rate: rate(x) = 4 pi [flux(x)]^+ / dens(x).
        """
        if self.conditional_net_flux is None:
            raise ValueError("state has no two-particle sector")
        grid = self.state.grid
        positions = np.atleast_2d(positions)
        idx, wts = _corner_weights(grid, positions)
        shell = grid.n_theta * grid.n_phi
        # tables live on interior nodes only; shift shell indices down by one
        # and clamp the trace shell onto the first interior shell
        idx_int = np.where(idx >= shell, idx - shell, idx)
        flux = np.einsum("cb,cb->b", wts, self.conditional_net_flux[idx_int])
        dens = np.einsum("cb,cb->b", wts, self.spectator_density[idx_int])
        return flux, dens


def velocity_at(state: FockState, position, tables: Optional[GuidanceTables] = None):
    """Scalar-position convenience wrapper; raises when the density gate trips."""
    tables = tables or GuidanceTables.from_state(state)
    vel, ok = tables.velocity_single(np.asarray(position, dtype=float)[None, :])
    if not ok[0]:
        raise UndefinedVelocityError(tuple(position), 0.0)
    return vel[0]


def density(state: FockState, positions,
            tables: Optional[GuidanceTables] = None) -> float:
    """Coordinate-volume probability density at one configuration.

    positions: (n, 3) array of (r, theta, phi) rows, n the sector; an empty
    array addresses the zero-particle sector.  The returned value carries one
    factor of 1/lambda(r) per particle, so it stays bounded toward r = 0.
    """
    q = np.asarray(positions, dtype=float).reshape(-1, 3)
    if q.shape[0] == 0:
        return abs(state.amplitude_empty) ** 2
    tables = tables or GuidanceTables.from_state(state)
    inv = np.prod(inv_lambda(state.params, q[:, 0]))
    if q.shape[0] == 1:
        idx, wts = _corner_weights(state.grid, q)
        bare = float(np.einsum("cb,cb->b", wts,
                               tables.single[0].reshape(-1)[idx])[0])
        return inv * bare
    if q.shape[0] == 2:
        if tables.pair is None:
            raise ValueError("state has no two-particle sector")
        idx_a, wts_a = _corner_weights(state.grid, q[:1])
        idx_b, wts_b = _corner_weights(state.grid, q[1:2])
        bare = 0.0
        for cy in range(8):
            for cz in range(8):
                bare += (wts_a[cy, 0] * wts_b[cz, 0]
                         * tables.pair[0][idx_a[cy, 0], idx_b[cz, 0]])
        return inv * float(bare)
    raise ValueError("configurations above two particles are not stored")


# -- fluxes -------------------------------------------------------------------

@dataclass
class SingularityFlux:
    """Net probability flow into each sector boundary at one instant."""

    empty_to_one: float
    one_to_two: Optional[float]
    per_cell_empty_to_one: np.ndarray
    conditional_net_flux: Optional[np.ndarray]


def singularity_flux(state: FockState) -> SingularityFlux:
    up, um = state.trace_coefficients()
    net = abs(up) ** 2 - abs(um) ** 2
    cells = state.grid.angular_weights * net
    q12 = None
    cond = None
    if state.psi2 is not None:
        upf, umf = state.trace_fields()
        w = weight_flat(state.params, state.grid)
        per_node = np.abs(upf) ** 2 - np.abs(umf) ** 2
        q12 = FOUR_PI * float(np.sum(w * per_node))
        cond = per_node.reshape(-1, 4).sum(axis=1)
    return SingularityFlux(empty_to_one=FOUR_PI * float(net), one_to_two=q12,
                           per_cell_empty_to_one=cells,
                           conditional_net_flux=cond)


def exchange_rates(H: DiscreteHamiltonian, state: FockState):
    """Sector exchange rates generated by the coupling terms themselves.

    Matches singularity_flux for the production extraction scheme; kept
    separate so audits measure exactly what the stepper moves.
    """
    k, hb = H.kappa, H.params.hbar
    p1 = flatten_field(state.psi1)
    d1 = np.vdot(H.e_vec, p1)
    q01 = (2.0 * k / hb) * float(np.real(np.conj(state.amplitude_empty) * d1))
    q12 = 0.0
    if state.psi2 is not None:
        d2 = state.psi2 @ np.conj(H.e_vec)
        q12 = (2.0 * k / hb) * float(np.real(np.sum(H.W_flat * p1 * np.conj(d2))))
    return q01, q12


def radial_flux_profile(state: FockState) -> np.ndarray:
    """Net probability flow through each node sphere, boundary shell first."""
    _, nr, _, _ = single_node_bilinears(state)
    return np.einsum("jk,ijk->i", state.grid.angular_weights, nr)


# -- audit --------------------------------------------------------------------

@dataclass
class BalanceReport:
    dt: float
    n_steps: int
    max_norm_drift: float
    max_sector_residual: np.ndarray
    per_step_residuals: np.ndarray
    passed: bool
    tolerance: float


def run_balance_audit(H: DiscreteHamiltonian, state0: FockState, dt: float,
                      n_steps: int, method: str = "auto",
                      tol: float = 1e-8) -> BalanceReport:
    """Step the wave and compare per-sector mass changes with midpoint rates.

    For each step the report records |delta m_sector - dt * rate| with the
    exchange rates evaluated at the Crank-Nicolson midpoint; the identity is
    algebraic for the direct stepper so residuals sit at roundoff.
    """
    stepper = make_stepper(H, dt, method)
    stepper.load(state0)
    n_sectors = H.n_max + 1
    residuals = np.empty((n_steps, n_sectors))
    norm0 = stepper.state.total_norm_sq()
    worst_norm = 0.0
    for k in range(n_steps):
        before = stepper.state.sector_masses()
        snap = stepper.snapshot()
        stepper.advance()
        mid = stepper.midpoint_with(snap)
        after = stepper.state.sector_masses()
        q01, q12 = exchange_rates(H, mid)
        delta = after - before
        expect = np.zeros(n_sectors)
        expect[0] = -dt * q01
        expect[1] = dt * q01
        if n_sectors > 2:
            expect[1] -= dt * q12
            expect[2] = dt * q12
        residuals[k] = np.abs(delta - expect)
        worst_norm = max(worst_norm, abs(stepper.state.total_norm_sq() - norm0))
    worst = residuals.max(axis=0)
    return BalanceReport(dt=dt, n_steps=n_steps, max_norm_drift=worst_norm,
                         max_sector_residual=worst, per_step_residuals=residuals,
                         passed=bool(worst.max() <= tol), tolerance=tol)
