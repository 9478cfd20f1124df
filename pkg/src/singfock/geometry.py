"""Background geometry: metric factor, coordinate alpha matrices, grids, null rays.

The background is the super-extremal charged static metric with line element
ds^2 = lam(r) dt^2 - lam(r)^-1 dr^2 - r^2 dOmega^2,  lam(r) = 1 - 2M/r + e^2/r^2,
with |e| > M so lam > 0 everywhere and r = 0 is a naked timelike singularity.
All densities in this package live relative to the coordinate volume dr domega,
whose ratio to the invariant volume is r^2 (`volume_factor`).

Everything here is immutable after construction and safe to share between
workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad


class GeometryError(ValueError):
    pass


class GeodesicError(RuntimeError):
    """Quadrature for a null ray failed to reach the requested tolerance."""


class PoleError(ValueError):
    """Angular coordinate hit theta = 0 or pi, where the chart degenerates."""


@dataclass(frozen=True)
class GeometryParams:
    """Background parameters plus the particle constants hbar and m.

    mass_parameter is allowed to be 0 (pure charge); the charge must dominate
    strictly, |e| > M, so the metric factor stays positive for all r >= 0.
    """

    mass_parameter: float
    charge: float
    hbar: float = 1.0
    fermion_mass: float = 0.0

    def __post_init__(self):
        if not (self.mass_parameter >= 0.0):
            raise GeometryError("mass parameter must be >= 0")
        if not (abs(self.charge) > self.mass_parameter):
            raise GeometryError(
                "need |charge| > mass (super-extremal); got "
                f"|{self.charge}| <= {self.mass_parameter}"
            )
        if not (self.hbar > 0.0):
            raise GeometryError("hbar must be positive")
        if not (self.fermion_mass >= 0.0):
            raise GeometryError("fermion mass must be >= 0")

    @property
    def charge_sq(self) -> float:
        return self.charge * self.charge


def lambda_of(params: GeometryParams, r):
    """Metric factor lam(r) = (r^2 - 2Mr + e^2)/r^2 for r > 0, +inf at r = 0.

    The infinity at r = 0 is a flag value only; interior formulas use the
    cancelled limits (`a_theta`, `inv_lambda`) and never do arithmetic on it.
    """
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, np.inf)
    pos = r > 0
    rp = r[pos]
    out[pos] = (rp * rp - 2.0 * params.mass_parameter * rp + params.charge_sq) / (rp * rp)
    if np.any(r < 0):
        raise GeometryError("radius must be >= 0")
    return out if out.shape else float(out)


def inv_lambda(params: GeometryParams, r):
    """1/lam(r), extended continuously by 0 at r = 0."""
    r = np.asarray(r, dtype=float)
    denom = r * r - 2.0 * params.mass_parameter * r + params.charge_sq
    out = (r * r) / denom
    if np.any(r < 0):
        raise GeometryError("radius must be >= 0")
    return out if out.shape else float(out)


def volume_factor(r):
    """Ratio of invariant to coordinate 4-volume: r^2."""
    r = np.asarray(r, dtype=float)
    out = r * r
    return out if out.shape else float(out)


def inv_lambda_antiderivative(params: GeometryParams, r):
    """Closed form of int_0^r ds / lam(s), the radial volume measure.

    s^2/(s^2 - 2Ms + e^2) integrates to s + M log(...) plus an arctan term
    whose denominator sqrt(e^2 - M^2) is real precisely in the super-extremal
    regime.  Normalized so the value at r = 0 is 0.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise GeometryError("radius must be >= 0")
    M, e2 = params.mass_parameter, params.charge_sq
    s = math.sqrt(e2 - M * M)
    out = (r + M * np.log((r * r - 2.0 * M * r + e2) / e2)
           + (2.0 * M * M - e2) / s * (np.arctan((r - M) / s)
                                       - math.atan(-M / s)))
    # integrand is positive, so the antiderivative is >= 0; the three terms
    # cancel to O(r^3) as r -> 0 and roundoff can land a hair below zero
    out = np.maximum(out, 0.0)
    return out if out.shape else float(out)


def a_theta(params: GeometryParams, r):
    """Coefficient 1/(sqrt(lam) r) = (r^2 - 2Mr + e^2)^(-1/2).

    Smooth through r = 0 with limit 1/|e|; this is the form used in all
    interior operators so no IEEE infinity ever enters arithmetic.
    """
    r = np.asarray(r, dtype=float)
    out = 1.0 / np.sqrt(r * r - 2.0 * params.mass_parameter * r + params.charge_sq)
    return out if out.shape else float(out)


def a_phi(params: GeometryParams, r, theta):
    """Coefficient 1/(sqrt(lam) r sin(theta)); theta strictly inside (0, pi)."""
    theta = np.asarray(theta, dtype=float)
    s = np.sin(theta)
    if np.any((theta <= 0) | (theta >= math.pi)):
        raise PoleError("theta must lie strictly inside (0, pi)")
    out = a_theta(params, r) / s
    return out if out.shape else float(out)


def alpha_tilde(params: GeometryParams, r: float, theta: float):
    """The four coordinate-basis alpha matrices (t, r, theta, phi) at (r, theta).

    For r > 0 these are (lam^-1 I, alpha1, (sqrt(lam) r)^-1 alpha2,
    (sqrt(lam) r sin th)^-1 alpha3); at r = 0 the analytic limits
    (0, alpha1, |e|^-1 alpha2, (|e| sin th)^-1 alpha3).
    """
    from .spinor import dirac_matrices

    if not (0.0 < theta < math.pi):
        raise PoleError("theta must lie strictly inside (0, pi)")
    a1, a2, a3, _beta = dirac_matrices()
    eye = np.eye(4, dtype=complex)
    at = a_theta(params, r)
    return (
        inv_lambda(params, r) * eye,
        a1.copy(),
        at * a2,
        (at / math.sin(theta)) * a3,
    )


def normal_vectors(params: GeometryParams, r: float):
    """Coordinate components of the unit normal n and the rescaled normal ntilde.

    n = (lam^-1/2, 0, 0, 0) vanishes in the r -> 0 limit; ntilde = (1, 0, 0, 0)
    for every r.
    """
    n = np.zeros(4)
    n[0] = math.sqrt(inv_lambda(params, r))
    ntilde = np.array([1.0, 0.0, 0.0, 0.0])
    return n, ntilde


_GEODESIC_TOL = 1e-10


def radial_null_geodesic(params: GeometryParams, t0: float, sign: str, r) -> float:
    """Coordinate time t(r) of the radial null ray through (t0, r=0).

    t(r) = t0 +- integral_0^r dr'/lam(r'); 'outgoing' takes +, 'incoming' -.
    The integrand r'^2/(r'^2 - 2Mr' + e^2) is bounded, so adaptive quadrature
    to absolute tolerance 1e-10 is cheap.
    """
    if sign not in ("outgoing", "incoming"):
        raise ValueError("sign must be 'outgoing' or 'incoming'")
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr < 0):
        raise GeometryError("radius must be >= 0")
    M, e2 = params.mass_parameter, params.charge_sq
    vals = np.empty_like(r_arr)
    for idx, rv in enumerate(r_arr):
        if rv == 0.0:
            vals[idx] = t0
            continue
        integral, err = quad(
            lambda s: s * s / (s * s - 2.0 * M * s + e2),
            0.0,
            rv,
            epsabs=_GEODESIC_TOL,
            epsrel=0.0,
            limit=200,
        )
        if err > _GEODESIC_TOL:
            raise GeodesicError(
                f"null-ray quadrature reached abs error {err:.3e} > {_GEODESIC_TOL:.1e}"
            )
        vals[idx] = t0 + integral if sign == "outgoing" else t0 - integral
    return vals if np.asarray(r).shape else float(vals[0])


def static_proper_time(params: GeometryParams, r: float, dt: float) -> float:
    """Proper time sqrt(lam(r)) * dt along a static worldline at radius r > 0."""
    if not (r > 0):
        raise GeometryError("static observers exist only at r > 0")
    if dt < 0:
        raise GeometryError("coordinate-time span must be >= 0")
    return math.sqrt(lambda_of(params, r)) * dt


def _gauss_legendre_diff(x: np.ndarray) -> np.ndarray:
    """Barycentric spectral differentiation matrix on arbitrary distinct nodes."""
    n = len(x)
    if n == 1:
        return np.zeros((1, 1))
    w = np.ones(n)
    for i in range(n):
        w[i] = 1.0 / np.prod(x[i] - np.delete(x, i))
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (x[i] - x[j])
        D[i, i] = -np.sum(D[i, np.arange(n) != i])
    return D


@dataclass(frozen=True)
class SpatialGrid:
    """Tensor grid on [0, r_max] x S^2 with the singularity node r_0 = 0 included.

    Radial nodes are uniform, r_i = i h; node 0 is the boundary node and is
    flagged, it carries derived trace values, never degrees of freedom.  The
    angular grid is Gauss-Legendre in cos(theta) times uniform phi, so no node
    sits at a pole and the quadrature weights sum to 4 pi exactly.
    """

    n_radial_cells: int
    r_max: float
    n_theta: int
    n_phi: int
    r: np.ndarray = field(repr=False)
    w_r: np.ndarray = field(repr=False)
    cos_theta: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    w_cos_theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    w_phi: float
    angular_weights: np.ndarray = field(repr=False)
    diff_cos_theta: np.ndarray = field(repr=False)
    diff_phi: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n_radial_cells: int, r_max: float, n_theta: int, n_phi: int) -> "SpatialGrid":
        if n_radial_cells < 2:
            raise GeometryError("need at least 2 radial cells")
        if r_max <= 0:
            raise GeometryError("r_max must be positive")
        if n_theta < 1 or n_phi < 1:
            raise GeometryError("angular resolutions must be >= 1")
        K = n_radial_cells
        h = r_max / K
        r = np.linspace(0.0, r_max, K + 1)
        w_r = np.full(K + 1, h)
        w_r[0] = 0.5 * h
        w_r[-1] = 0.5 * h

        x, wx = np.polynomial.legendre.leggauss(n_theta)
        theta = np.arccos(x)
        w_phi = 2.0 * math.pi / n_phi
        phi = np.arange(n_phi) * w_phi
        v_ang = np.outer(wx, np.full(n_phi, w_phi))

        D_x = _gauss_legendre_diff(x)
        D_phi = np.zeros((n_phi, n_phi))
        if n_phi >= 3:
            inv2d = 1.0 / (2.0 * w_phi)
            for k in range(n_phi):
                D_phi[k, (k + 1) % n_phi] = inv2d
                D_phi[k, (k - 1) % n_phi] = -inv2d

        grid = cls(
            n_radial_cells=K,
            r_max=r_max,
            n_theta=n_theta,
            n_phi=n_phi,
            r=r,
            w_r=w_r,
            cos_theta=x,
            theta=theta,
            w_cos_theta=wx,
            phi=phi,
            w_phi=w_phi,
            angular_weights=v_ang,
            diff_cos_theta=D_x,
            diff_phi=D_phi,
        )
        total = grid.angular_weights.sum()
        if abs(total - 4.0 * math.pi) > 1e-12 * 4.0 * math.pi:
            raise GeometryError("angular quadrature does not sum to 4 pi")
        return grid

    @property
    def h(self) -> float:
        return self.r_max / self.n_radial_cells

    @property
    def n_interior(self) -> int:
        """Spatial DOF count excluding the boundary shell."""
        return self.n_radial_cells * self.n_theta * self.n_phi

    def is_boundary_node(self, i: int) -> bool:
        return i == 0

    def diff_theta(self) -> np.ndarray:
        """d/dtheta on the collocation nodes: -sin(theta) d/d(cos theta)."""
        return -np.sin(self.theta)[:, None] * self.diff_cos_theta

    def geodesic_table(self, params: GeometryParams, t0: float = 0.0) -> np.ndarray:
        """Columns (r, t_outgoing, t_incoming, lambda) at the radial nodes."""
        rs = self.r
        out = radial_null_geodesic(params, t0, "outgoing", rs)
        inn = radial_null_geodesic(params, t0, "incoming", rs)
        lam = lambda_of(params, rs)
        return np.column_stack([rs, out, inn, lam])
