"""Direct/reciprocal lattice geometry, fundamental cell and Brillouin zone.

The direct lattice is the set ``L @ z`` for integer vectors ``z``; the
reciprocal matrix satisfies ``L.T @ L_star = 2*pi*I``.  The centered cell is
``L @ t`` and the zone is ``L_star @ t`` with ``t`` in the half-open cube
``[-1/2, 1/2)^d``.  The half-open convention makes the zone translates tile
frequency space with no double counting, which the discrete transforms rely
on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import SingularLattice

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class LatticeGeometry:
    """Geometry derived from a nonsingular direct-lattice matrix."""

    dim: int
    direct_matrix: np.ndarray      # (d, d), columns generate the lattice
    reciprocal_matrix: np.ndarray  # 2*pi * inv(L).T
    cell_volume: float             # |det L|
    zone_volume: float             # |det L*|
    inscribed_radius: float        # radius of a ball contained in the zone

    def __post_init__(self) -> None:
        self.direct_matrix.setflags(write=False)
        self.reciprocal_matrix.setflags(write=False)


def build_lattice(direct_matrix) -> LatticeGeometry:
    """Build a :class:`LatticeGeometry` from a d x d direct-lattice matrix.

    Raises :class:`SingularLattice` if ``|det L| <= 1e-12``.
    """
    L = np.atleast_2d(np.asarray(direct_matrix, dtype=float))
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise SingularLattice(f"direct matrix must be square, got shape {L.shape}")
    det = np.linalg.det(L)
    if abs(det) <= 1e-12:
        raise SingularLattice(f"|det L| = {abs(det):.3e} below threshold")
    d = L.shape[0]
    L_star = _TWO_PI * np.linalg.inv(L).T
    # Distance from the zone center to facet j of the parallelepiped
    # {L* t : |t_j| <= 1/2} is 1/(2 |row_j(inv(L*))|).
    inv_star = np.linalg.inv(L_star)
    radius = float(np.min(0.5 / np.linalg.norm(inv_star, axis=1)))
    return LatticeGeometry(
        dim=d,
        direct_matrix=L.copy(),
        reciprocal_matrix=L_star,
        cell_volume=abs(det),
        zone_volume=abs(np.linalg.det(L_star)),
        inscribed_radius=radius,
    )


def zone_coordinates(geom: LatticeGeometry, k, scale: float = 1.0) -> np.ndarray:
    """Fractional zone coordinates t with k = scale * L_star @ t.

    ``k`` may be a single d-vector or an array of shape (..., d).
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    k = np.asarray(k, dtype=float)
    t = np.linalg.solve(geom.reciprocal_matrix, k[..., :, None] / scale)
    return t[..., 0]


def in_zone(geom: LatticeGeometry, k, scale: float = 1.0):
    """Half-open membership test k in scale*B, i.e. t in [-1/2, 1/2)^d.

    Vectorized over leading axes of ``k``; returns a bool (or bool array).
    """
    t = zone_coordinates(geom, k, scale)
    inside = np.all((t >= -0.5) & (t < 0.5), axis=-1)
    return bool(inside) if inside.ndim == 0 else inside


@dataclass(frozen=True)
class ReciprocalIndexSet:
    """All reciprocal vectors L_star @ z with ||z||_inf <= cutoff, lex-ordered."""

    cutoff: int
    ints: np.ndarray    # (Q, d) integer coordinates z, lexicographic
    points: np.ndarray  # (Q, d) vectors L_star @ z

    def __post_init__(self) -> None:
        self.ints.setflags(write=False)
        self.points.setflags(write=False)

    def __len__(self) -> int:
        return self.ints.shape[0]

    def index_of(self, z) -> int:
        """Position of integer coordinate z, or -1 if outside the cube."""
        z = np.asarray(z, dtype=int)
        if np.any(np.abs(z) > self.cutoff):
            return -1
        # lexicographic layout: axis 0 slowest
        width = 2 * self.cutoff + 1
        idx = 0
        for zi in z:
            idx = idx * width + (int(zi) + self.cutoff)
        return idx

    def shift_indices(self, z) -> np.ndarray:
        """Positions of ints - z (entry -1 where the shift leaves the cube)."""
        z = np.asarray(z, dtype=int)
        shifted = self.ints - z[None, :]
        ok = np.all(np.abs(shifted) <= self.cutoff, axis=1)
        width = 2 * self.cutoff + 1
        digits = shifted + self.cutoff
        idx = np.zeros(len(self), dtype=int)
        for ax in range(shifted.shape[1]):
            idx = idx * width + digits[:, ax]
        idx[~ok] = -1
        return idx


def reciprocal_points(geom: LatticeGeometry, cutoff: int) -> ReciprocalIndexSet:
    """Enumerate the reciprocal index cube ||z||_inf <= cutoff."""
    if cutoff < 0:
        raise ValueError(f"cutoff must be >= 0, got {cutoff}")
    rng = range(-cutoff, cutoff + 1)
    ints = np.array(list(itertools.product(rng, repeat=geom.dim)), dtype=int)
    points = ints @ geom.reciprocal_matrix.T
    return ReciprocalIndexSet(cutoff=cutoff, ints=ints, points=points)
