"""Dirac matrices, boundary eigenprofiles and N-particle spinor helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SQRT2 = math.sqrt(2.0)


@lru_cache(maxsize=1)
def _matrices():
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]], dtype=complex)
    sz = np.array([[1, 0], [0, -1]], dtype=complex)
    zero = np.zeros((2, 2), dtype=complex)
    eye = np.eye(2, dtype=complex)

    def off(s):
        return np.block([[zero, s], [s, zero]])

    a1, a2, a3 = off(sx), off(sy), off(sz)
    beta = np.block([[eye, zero], [zero, -eye]])
    for m in (a1, a2, a3, beta):
        m.setflags(write=False)
    return a1, a2, a3, beta


def dirac_matrices():
    """Standard representation: alpha_i = offdiag(sigma_i, sigma_i), beta = diag(I, -I)."""
    return _matrices()


def time_reversal_matrix() -> np.ndarray:
    """The real matrix R = alpha1 @ alpha3 used in the antiunitary reversal R o conj.

    Conjugation by R flips alpha1 and alpha3, preserves alpha2 and beta, and
    R @ R = -I.  Composed with complex conjugation this intertwines the default
    model with its conjugate-profile partner.
    """
    a1, _, a3, _ = dirac_matrices()
    return np.real(a1 @ a3).copy()


@dataclass(frozen=True)
class BoundaryProfile:
    """Pointwise eigenvectors of alpha1: alpha1 phi_pm = +-phi_pm, constant in omega.

    Constancy keeps the boundary subspace exactly two dimensional under any
    angular quadrature; each profile has quadrature norm sqrt(4 pi).
    """

    tag: str
    plus: np.ndarray
    minus: np.ndarray

    def __post_init__(self):
        a1 = dirac_matrices()[0]
        for vec, sgn in ((self.plus, 1.0), (self.minus, -1.0)):
            if not np.allclose(a1 @ vec, sgn * vec, atol=1e-14):
                raise ValueError(f"profile {self.tag!r} is not an alpha1 eigenpair")
            if abs(np.vdot(vec, vec) - 1.0) > 1e-14:
                raise ValueError("profile vectors must be unit")
        if abs(np.vdot(self.plus, self.minus)) > 1e-14:
            raise ValueError("phi_+ and phi_- must be orthogonal")

    @property
    def difference(self) -> np.ndarray:
        """phi_+ - phi_-; the vector the sector coupling projects on."""
        return self.plus - self.minus

    def field(self, n_theta: int, n_phi: int, which: str = "plus") -> np.ndarray:
        """Broadcast one profile over an angular grid, shape (n_theta, n_phi, 4)."""
        vec = {"plus": self.plus, "minus": self.minus}[which]
        return np.broadcast_to(vec, (n_theta, n_phi, 4)).copy()


def make_boundary_profile(tag: str = "default") -> BoundaryProfile:
    """Fixed conventions for the boundary eigenpair.

    'default':   phi_+ = (1,0,0,1)/sqrt2,  phi_- = (1,0,0,-1)/sqrt2
    'conjugate': phi_+ = (0,1,1,0)/sqrt2,  phi_- = (0,1,-1,0)/sqrt2
    The conjugate pair is R @ (phi_-, phi_+) of the default pair and is the one
    under which the time-reversed state solves the reversed equation.
    """
    if tag == "default":
        plus = np.array([1, 0, 0, 1], dtype=complex) / SQRT2
        minus = np.array([1, 0, 0, -1], dtype=complex) / SQRT2
    elif tag == "conjugate":
        plus = np.array([0, 1, 1, 0], dtype=complex) / SQRT2
        minus = np.array([0, 1, -1, 0], dtype=complex) / SQRT2
    else:
        raise ValueError(f"unknown boundary profile tag {tag!r}")
    return BoundaryProfile(tag=tag, plus=plus, minus=minus)


def apply_on_factor(matrix: np.ndarray, k: int, psi: np.ndarray, n_particles: int) -> np.ndarray:
    """Apply a 4x4 matrix to spinor slot k (1-based) of an N-particle array.

    The array layout must carry the N spinor indices as its last N axes, each
    of size 4.
    """
    if not (1 <= k <= n_particles):
        raise IndexError(f"particle index {k} outside 1..{n_particles}")
    axis = psi.ndim - n_particles + (k - 1)
    if psi.shape[axis] != 4:
        raise ValueError("selected axis is not a spinor axis of size 4")
    return np.moveaxis(np.tensordot(matrix, psi, axes=([1], [axis])), 0, axis)


def antisymmetrize(psi: np.ndarray, n_particles: int = 2) -> np.ndarray:
    """Project a combined-index two-particle array onto its antisymmetric part.

    Layout contract: psi is square with one flattened (position+spin) index per
    particle, so particle exchange is the matrix transpose.  One particle is a
    no-op; more than two are outside the supported truncation.
    """
    if n_particles == 1:
        return psi
    if n_particles != 2:
        raise ValueError("only truncations with at most two particles are stored")
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise ValueError("two-particle arrays must be square combined-index matrices")
    return 0.5 * (psi - psi.T)
