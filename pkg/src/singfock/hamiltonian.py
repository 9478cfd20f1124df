"""Sector-coupled discrete Hamiltonian and the unitary Crank-Nicolson stepper.

Degrees of freedom are the empty-sector amplitude, the interior one-particle
field and the interior antisymmetric two-particle matrix.  Boundary values are
derived traces (see fock), so the boundary conditions hold identically and the
generator below is exactly Hermitian with respect to the weighted inner product

    <z, z'> = conj(a) a' + psi1^H W psi1' + (1/2) psi2^H (W x W) psi2'.

The single-particle block is the weighted symmetrization of the first-order
operator

    M = -i hbar [alpha1 d_r + a_theta(r) alpha2 d_theta + a_phi(r,th) alpha3 d_phi]
        + (m / lambda(r)) beta,

namely H1 = W^-1 B with B = (U M + M^H U)/2 and U the bare quadrature weights;
H1 approximates lambda(r) times the curved-space Dirac operator plus the mass
term, and the symmetrization supplies the connection coefficients implicitly.
Sectors exchange probability only through the explicit coupling built from the
trace-extraction vector e: with kappa = hbar sqrt(32 pi^3) and iota = W^-1 e,

    i hbar da/dt      = -i kappa e^H psi1
    i hbar dpsi1/dt   = H1 psi1 + i kappa iota a - i kappa (psi2 contracted with e)
    i hbar dpsi2/dt   = (H1 (+) H1) psi2 + i kappa (psi1 ^ iota)

which makes the per-step probability exchange between adjacent sectors equal to
the quadrature of the boundary flux exactly (see currents.balance_audit).

The Crank-Nicolson solve is direct: diagonalizing B against W once reduces the
coupled system to one dense factorized solve in the single-particle eigenbasis
plus elementwise work, so a step costs a few matrix-vector products and the
Cayley update conserves the weighted norm to roundoff.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, gmres

from .fock import (FockState, bare_weight_field, extraction_vector,
                   flatten_field, make_state, unflatten_field, weight_flat)
from .geometry import GeometryParams, SpatialGrid, a_theta, inv_lambda
from .spinor import BoundaryProfile, dirac_matrices, make_boundary_profile

KAPPA_FACTOR = math.sqrt(32.0 * math.pi ** 3)


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals or [])


class FockVector(NamedTuple):
    """State-shaped array triple used for operator images and audits."""

    amplitude_empty: complex
    psi1: np.ndarray
    psi2: Optional[np.ndarray]


@dataclass
class StepReport:
    solver: str
    residual: float
    antisym_cleanup: float
    iterations: int
    wall_time: float


def _interior_radial_diff(K: int, h: float) -> np.ndarray:
    """Second-order first derivative on interior nodes; one-sided closures.

    The i = 1 stencil leans outward, never touching the boundary node, so the
    singularity enters the dynamics only through the explicit coupling.
    """
    if K < 3:
        raise AssemblyError("need at least 3 interior radial nodes")
    D = np.zeros((K, K))
    D[0, 0:3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    for a in range(1, K - 1):
        D[a, a - 1] = -1.0 / (2 * h)
        D[a, a + 1] = 1.0 / (2 * h)
    D[K - 1, K - 3:K] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return D


class DiscreteHamiltonian:
    """Assembled operator data; immutable once built."""

    def __init__(self, params: GeometryParams, grid: SpatialGrid,
                 profile: BoundaryProfile, n_max: int, coupling_enabled: bool,
                 symmetrize: bool, extraction: str, dense_limit: int):
        if n_max not in (1, 2):
            raise AssemblyError("supported truncations keep at most two particles")
        self.params = params
        self.grid = grid
        self.profile = profile
        self.n_max = n_max
        self.coupling_enabled = coupling_enabled
        self.symmetrize = symmetrize
        self.extraction = extraction
        self.kappa = params.hbar * KAPPA_FACTOR

        K = grid.n_radial_cells
        r_int = grid.r[1:]
        self._D_r = _interior_radial_diff(K, grid.h)
        self._D_th = grid.diff_theta()
        self._D_ph = grid.diff_phi
        self._ath = a_theta(params, r_int)
        self._sin_th = np.sin(grid.theta)
        self._tau_m = params.fermion_mass * inv_lambda(params, r_int)
        self._U = bare_weight_field(grid)[..., None]
        self.W_flat = weight_flat(params, grid)
        self._W_field = self.W_flat.reshape(K, grid.n_theta, grid.n_phi, 4)

        self.e_vec = self._build_extraction()
        self.iota = self.e_vec / self.W_flat

        self.n1 = K * grid.n_theta * grid.n_phi * 4
        self._dense_limit = dense_limit
        self._spectral = None
        self._h1_dense = None

    # -- extraction -----------------------------------------------------------

    def _build_extraction(self) -> np.ndarray:
        e = extraction_vector(self.grid, self.profile)
        if self.extraction == "one-point":
            return e
        if self.extraction == "two-point":
            # Richardson extrapolation toward r = 0.  Kept only as a negative
            # control: it doubles the positive-part cell-rate sum relative to
            # the net flux invariant.
            field = unflatten_field(e.copy(), self.grid)
            field[1] = -field[0]
            field[0] = 2.0 * field[0]
            return flatten_field(field)
        raise AssemblyError(f"unknown extraction scheme {self.extraction!r}")

    # -- single-particle operator ---------------------------------------------

    def apply_M(self, f: np.ndarray) -> np.ndarray:
        a1, a2, a3, beta = dirac_matrices()
        hbar = self.params.hbar
        t_r = np.einsum("ab,bjkt->ajkt", self._D_r, f)
        t_r = np.einsum("st,ajkt->ajks", a1, t_r)
        t_th = np.einsum("jl,alkt->ajkt", self._D_th, f)
        t_th = self._ath[:, None, None, None] * np.einsum("st,ajkt->ajks", a2, t_th)
        t_ph = np.einsum("km,ajmt->ajkt", self._D_ph, f)
        t_ph = (self._ath[:, None, None, None] / self._sin_th[None, :, None, None]) \
            * np.einsum("st,ajkt->ajks", a3, t_ph)
        out = -1j * hbar * (t_r + t_th + t_ph)
        if self.params.fermion_mass:
            out += self._tau_m[:, None, None, None] * np.einsum("st,ajkt->ajks", beta, f)
        return out

    def apply_M_adjoint(self, f: np.ndarray) -> np.ndarray:
        a1, a2, a3, beta = dirac_matrices()
        hbar = self.params.hbar
        t_r = np.einsum("ba,bjkt->ajkt", self._D_r, f)
        t_r = np.einsum("st,ajkt->ajks", a1, t_r)
        t_th = np.einsum("lj,alkt->ajkt", self._D_th, f)
        t_th = self._ath[:, None, None, None] * np.einsum("st,ajkt->ajks", a2, t_th)
        t_ph = np.einsum("mk,ajmt->ajkt", self._D_ph, f)
        t_ph = (self._ath[:, None, None, None] / self._sin_th[None, :, None, None]) \
            * np.einsum("st,ajkt->ajks", a3, t_ph)
        out = 1j * hbar * (t_r + t_th + t_ph)
        if self.params.fermion_mass:
            out += self._tau_m[:, None, None, None] * np.einsum("st,ajkt->ajks", beta, f)
        return out

    def apply_H1(self, f: np.ndarray) -> np.ndarray:
        """Weighted-Hermitian single-particle block, W^-1 (U M + M^H U)/2."""
        if self.symmetrize:
            b = 0.5 * (self._U * self.apply_M(f) + self.apply_M_adjoint(self._U * f))
        else:
            b = self._U * self.apply_M(f)
        return b / self._W_field

    # -- dense spectral data ---------------------------------------------------

    def _ensure_spectral(self):
        if self._spectral is not None:
            return
        if self.n1 > self._dense_limit:
            raise AssemblyError(
                f"dense path needs n1 <= {self._dense_limit}, got {self.n1}; "
                "two-particle evolution requires it"
            )
        a1, a2, a3, beta = dirac_matrices()
        It, Ip = np.eye(self.grid.n_theta), np.eye(self.grid.n_phi)
        Ar = np.diag(self._ath)
        T_r = np.kron(np.kron(np.kron(self._D_r, It), Ip), a1)
        T_th = np.kron(np.kron(np.kron(Ar, self._D_th), Ip), a2)
        T_ph = np.kron(np.kron(np.kron(Ar, np.diag(1.0 / self._sin_th)), self._D_ph), a3)
        M = (-1j * self.params.hbar) * (T_r + T_th + T_ph).astype(complex)
        if self.params.fermion_mass:
            M += np.kron(np.kron(np.kron(np.diag(self._tau_m), It), Ip), beta)
        shape = (self.grid.n_radial_cells, self.grid.n_theta, self.grid.n_phi, 4)
        U = flatten_field(np.broadcast_to(self._U, shape).copy())
        if self.symmetrize:
            B = 0.5 * (U[:, None] * M + M.conj().T * U[None, :])
            # exact Hermitian by construction; cleanup only sheds roundoff
            B = 0.5 * (B + B.conj().T)
        else:
            B = U[:, None] * M
        W = self.W_flat
        w_isqrt = 1.0 / np.sqrt(W)
        C = w_isqrt[:, None] * B * w_isqrt[None, :]
        if self.symmetrize:
            evals, Q = np.linalg.eigh(0.5 * (C + C.conj().T))
        else:
            evals, Q = None, None
        if evals is not None:
            V = w_isqrt[:, None] * Q
            A = Q.conj().T * np.sqrt(W)[None, :]
            g = A @ self.iota
            self._spectral = {"evals": evals, "V": V, "A": A, "g": g}
        else:
            self._spectral = {"B": B, "W": W}
        self._B_dense = B

    @property
    def spectral(self) -> dict:
        self._ensure_spectral()
        if "evals" not in self._spectral:
            raise AssemblyError("spectral data unavailable for non-symmetrized forms")
        return self._spectral

    def h1_dense(self) -> np.ndarray:
        if self._h1_dense is None:
            self._ensure_spectral()
            if "evals" in self._spectral:
                sp = self._spectral
                self._h1_dense = sp["V"] @ (sp["evals"][:, None] * sp["A"])
            else:
                # non-symmetrized diagnostic path
                self._h1_dense = (self._spectral["B"]
                                  / self.W_flat[:, None]).astype(complex)
        return self._h1_dense

    # -- full coupled action ---------------------------------------------------

    def apply_full(self, z: FockVector, coupling_only: bool = False) -> FockVector:
        """Image of the generator; i hbar dz/dt = apply_full(z)."""
        a, psi1, psi2 = z
        k = self.kappa if self.coupling_enabled else 0.0
        p1f = flatten_field(psi1)
        h_a = -1j * k * np.vdot(self.e_vec, p1f)
        if coupling_only:
            h1 = np.zeros_like(p1f)
        else:
            h1 = flatten_field(self.apply_H1(psi1))
        h1 = h1 + 1j * k * self.iota * a
        h2 = None
        if psi2 is not None:
            delta2 = psi2 @ np.conj(self.e_vec)
            h1 = h1 - 1j * k * delta2
            if coupling_only:
                h2 = np.zeros_like(psi2)
            else:
                H1d = self.h1_dense()
                h2 = H1d @ psi2 + psi2 @ H1d.T
            h2 = h2 + 1j * k * (np.outer(p1f, self.iota) - np.outer(self.iota, p1f))
        return FockVector(h_a, unflatten_field(h1, self.grid), h2)

    def inner(self, z: FockVector, zp: FockVector) -> complex:
        """The weighted inner product the generator is Hermitian under."""
        out = np.conj(z.amplitude_empty) * zp.amplitude_empty
        out += np.vdot(flatten_field(z.psi1), self.W_flat * flatten_field(zp.psi1))
        if z.psi2 is not None and zp.psi2 is not None:
            W = self.W_flat
            out += 0.5 * np.einsum("yz,y,z,yz->", np.conj(z.psi2), W, W, zp.psi2)
        return complex(out)

    def hermiticity_residual(self, rng: np.random.Generator, n_pairs: int = 8) -> float:
        """Normalized worst asymmetry <z, H z'> - <H z, z'> over random pairs."""
        worst = 0.0
        for _ in range(n_pairs):
            z = _random_vector(self, rng)
            zp = _random_vector(self, rng)
            hz, hzp = self.apply_full(z), self.apply_full(zp)
            lhs = self.inner(z, hzp)
            rhs = self.inner(hz, zp)
            scale = max(1.0, abs(lhs), abs(rhs))
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst

    def state_from_vector(self, z: FockVector, time: float = 0.0) -> FockState:
        return FockState(params=self.params, grid=self.grid, profile=self.profile,
                         amplitude_empty=complex(z.amplitude_empty), psi1=z.psi1,
                         psi2=z.psi2, time=time)

    def vector_from_state(self, s: FockState) -> FockVector:
        return FockVector(s.amplitude_empty, s.psi1, s.psi2)


def _random_vector(H: DiscreteHamiltonian, rng: np.random.Generator) -> FockVector:
    shape = H.grid.n_radial_cells, H.grid.n_theta, H.grid.n_phi, 4
    p1 = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    p2 = None
    if H.n_max >= 2:
        raw = rng.standard_normal((H.n1, H.n1)) + 1j * rng.standard_normal((H.n1, H.n1))
        p2 = 0.5 * (raw - raw.T)
    a = complex(rng.standard_normal() + 1j * rng.standard_normal())
    return FockVector(a, p1, p2)


def assemble(params: GeometryParams, grid: SpatialGrid,
             profile: Optional[BoundaryProfile] = None, n_max: int = 2,
             coupling_enabled: bool = True, symmetrize: bool = True,
             extraction: str = "one-point", dense_limit: int = 2048,
             check: bool = True, check_seed: int = 7021) -> DiscreteHamiltonian:
    """Build the coupled operator and verify its weighted Hermiticity.

    check=False skips the verification; required for the deliberately broken
    negative-control variants, which would otherwise refuse to assemble.
    """
    profile = profile or make_boundary_profile()
    H = DiscreteHamiltonian(params, grid, profile, n_max, coupling_enabled,
                            symmetrize, extraction, dense_limit)
    if check:
        res = H.hermiticity_residual(np.random.default_rng(check_seed), n_pairs=4)
        if res > 1e-10:
            raise AssemblyError(f"assembled form asymmetry {res:.3e} exceeds 1e-10")
    return H


# -- steppers -----------------------------------------------------------------

class SpectralStepper:
    """Direct Crank-Nicolson integrator in the single-particle eigenbasis.

    Exact elimination: the two-particle block is diagonal in the eigenbasis,
    the coupling is an outer product with the transformed extraction vector,
    and the reduced single-particle system has a constant matrix factorized
    once.  No iterative solve, no tolerance knobs.
    """

    def __init__(self, H: DiscreteHamiltonian, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.H = H
        self.dt = dt
        sp = H.spectral
        self.evals, self.V, self.A, self.g = sp["evals"], sp["V"], sp["A"], sp["g"]
        self.mu = dt / (2.0 * H.params.hbar)
        k = H.kappa if H.coupling_enabled else 0.0
        self.mk = self.mu * k
        lam = self.evals
        self.diag1_plus = 1.0 + 1j * self.mu * lam
        self.diag1_minus = 1.0 - 1j * self.mu * lam
        if H.n_max >= 2:
            S = lam[:, None] + lam[None, :]
            self.E2_plus = 1.0 / (1.0 + 1j * self.mu * S)
            self.E2_minus = 1.0 - 1j * self.mu * S
        else:
            self.E2_plus = None
        gg = np.abs(self.g) ** 2
        c1 = (self.E2_plus @ gg) if self.E2_plus is not None else 0.0
        R = np.diag(self.diag1_plus + self.mk ** 2 * c1).astype(complex)
        R += self.mk ** 2 * np.outer(self.g, np.conj(self.g))
        if self.E2_plus is not None:
            R -= self.mk ** 2 * (self.g[:, None] * self.E2_plus * np.conj(self.g)[None, :])
        self.R_lu = sla.lu_factor(R)

        self.a = 0.0 + 0.0j
        self.p1h = None
        self.p2h = None
        self.time = 0.0
        self._dirty = True
        self._cached_state = None

    def load(self, state: FockState):
        if state.params != self.H.params:
            raise ValueError("state parameters do not match the operator")
        if self.H.n_max == 1 and state.psi2 is not None:
            raise ValueError("operator truncates at one particle but state carries two")
        self.a = complex(state.amplitude_empty)
        self.p1h = self.A @ flatten_field(state.psi1)
        if self.H.n_max >= 2:
            if state.psi2 is None:
                self.p2h = np.zeros((self.H.n1, self.H.n1), dtype=complex)
            else:
                self.p2h = self.A @ state.psi2 @ self.A.T
        self.time = state.time
        self._dirty = True

    def _materialize(self) -> FockState:
        psi1 = unflatten_field(self.V @ self.p1h, self.H.grid)
        psi2 = None
        if self.p2h is not None:
            psi2 = self.V @ self.p2h @ self.V.T
            psi2 = 0.5 * (psi2 - psi2.T)
        return make_state(self.H.params, self.H.grid, self.H.profile,
                          amplitude_empty=self.a, psi1=psi1, psi2=psi2,
                          n_max=self.H.n_max, time=self.time)

    @property
    def state(self) -> FockState:
        if self._dirty or self._cached_state is None:
            self._cached_state = self._materialize()
            self._dirty = False
        return self._cached_state

    def midpoint_with(self, prev) -> FockState:
        """State at the Crank-Nicolson midpoint between a stored snapshot and now."""
        a_prev, p1_prev, p2_prev, t_prev = prev
        a = 0.5 * (a_prev + self.a)
        p1 = 0.5 * (p1_prev + self.p1h)
        psi1 = unflatten_field(self.V @ p1, self.H.grid)
        psi2 = None
        if self.p2h is not None:
            p2 = 0.5 * (p2_prev + self.p2h)
            psi2 = self.V @ p2 @ self.V.T
        return make_state(self.H.params, self.H.grid, self.H.profile,
                          amplitude_empty=a, psi1=psi1, psi2=psi2,
                          n_max=self.H.n_max, time=0.5 * (t_prev + self.time))

    def snapshot(self):
        p2 = None if self.p2h is None else self.p2h.copy()
        return (self.a, self.p1h.copy(), p2, self.time)

    def advance_time_only(self):
        """Shift the clock without evolving; frozen-wave ensembles use this."""
        self.time += self.dt
        self._dirty = True

    def advance(self) -> StepReport:
        t0 = _time.perf_counter()
        g, mk = self.g, self.mk
        ghp1 = np.vdot(g, self.p1h)
        r0 = self.a - mk * ghp1
        r1 = self.diag1_minus * self.p1h + mk * g * self.a
        if self.p2h is not None:
            gbar = np.conj(g)
            r1 -= mk * (self.p2h @ gbar)
            r2 = self.E2_minus * self.p2h \
                + mk * (np.outer(self.p1h, g) - np.outer(g, self.p1h))
            d = (self.E2_plus * r2) @ gbar
        else:
            r2 = None
            d = 0.0
        rhs = r1 + mk * g * r0 - mk * d
        p1_new = sla.lu_solve(self.R_lu, rhs)
        a_new = r0 - mk * np.vdot(g, p1_new)
        cleanup = 0.0
        if r2 is not None:
            p2_new = self.E2_plus * (r2 + mk * (np.outer(p1_new, g) - np.outer(g, p1_new)))
            sym = 0.5 * (p2_new + p2_new.T)
            cleanup = float(np.linalg.norm(sym))
            p2_new = p2_new - sym
            self.p2h = p2_new
        self.a = complex(a_new)
        self.p1h = p1_new
        self.time += self.dt
        self._dirty = True
        return StepReport(solver="spectral-direct", residual=0.0,
                          antisym_cleanup=cleanup, iterations=1,
                          wall_time=_time.perf_counter() - t0)


class GmresStepper:
    """Matrix-free Crank-Nicolson for large single-particle grids."""

    def __init__(self, H: DiscreteHamiltonian, dt: float, rtol: float = 3e-12,
                 maxiter: int = 400):
        if H.n_max != 1:
            raise AssemblyError("matrix-free stepping covers single-particle states only")
        self.H = H
        self.dt = dt
        self.rtol = rtol
        self.maxiter = maxiter
        self.mu = dt / (2.0 * H.params.hbar)
        self._state: Optional[FockState] = None

    def load(self, state: FockState):
        if state.psi2 is not None:
            raise ValueError("operator truncates at one particle but state carries two")
        self._state = state

    @property
    def state(self) -> FockState:
        return self._state

    @property
    def time(self) -> float:
        return self._state.time

    def advance_time_only(self):
        self._state = self._state.with_time(self._state.time + self.dt)

    def _pack(self, z: FockVector) -> np.ndarray:
        return np.concatenate([[z.amplitude_empty], flatten_field(z.psi1)])

    def _unpack(self, x: np.ndarray) -> FockVector:
        return FockVector(complex(x[0]), unflatten_field(x[1:], self.H.grid), None)

    def _cayley_apply(self, x: np.ndarray, sign: float) -> np.ndarray:
        z = self._unpack(x)
        hz = self.H.apply_full(z)
        return x + sign * 1j * self.mu * self._pack(hz)

    def snapshot(self):
        return self._state

    def midpoint_with(self, prev: FockState) -> FockState:
        s = self._state
        return make_state(s.params, s.grid, s.profile,
                          amplitude_empty=0.5 * (prev.amplitude_empty + s.amplitude_empty),
                          psi1=0.5 * (prev.psi1 + s.psi1), n_max=1,
                          time=0.5 * (prev.time + s.time))

    def advance(self) -> StepReport:
        t0 = _time.perf_counter()
        s = self._state
        x = self._pack(self.H.vector_from_state(s))
        rhs = self._cayley_apply(x, -1.0)
        n = len(x)
        op = LinearOperator((n, n), matvec=lambda v: self._cayley_apply(v, +1.0),
                            dtype=complex)
        residuals = []
        sol, info = gmres(op, rhs, x0=rhs, rtol=self.rtol, atol=0.0,
                          restart=50, maxiter=self.maxiter,
                          callback=residuals.append, callback_type="pr_norm")
        if info != 0:
            raise SolverError(f"Crank-Nicolson solve stalled (info={info})", residuals)
        res = float(np.linalg.norm(self._cayley_apply(sol, +1.0) - rhs)
                    / max(np.linalg.norm(rhs), 1e-300))
        z = self._unpack(sol)
        self._state = make_state(s.params, s.grid, s.profile,
                                 amplitude_empty=z.amplitude_empty, psi1=z.psi1,
                                 n_max=1, time=s.time + self.dt)
        return StepReport(solver="gmres", residual=res, antisym_cleanup=0.0,
                          iterations=len(residuals),
                          wall_time=_time.perf_counter() - t0)


def make_stepper(H: DiscreteHamiltonian, dt: float, method: str = "auto"):
    if method == "auto":
        method = "spectral" if (H.n_max >= 2 or H.n1 <= 2048) else "gmres"
    if method == "spectral":
        return SpectralStepper(H, dt)
    if method == "gmres":
        return GmresStepper(H, dt)
    raise ValueError(f"unknown stepping method {method!r}")


def step(H: DiscreteHamiltonian, state: FockState, dt: float,
         method: str = "auto") -> FockState:
    """One Crank-Nicolson step as a pure function; convenience wrapper."""
    st = make_stepper(H, dt, method)
    st.load(state)
    st.advance()
    return st.state
