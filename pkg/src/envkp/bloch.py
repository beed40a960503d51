"""Planewave solution of the periodic cell problem and the fiber family.

The cell eigenproblem ``-1/2 Lap v + W v = E v`` (periodic boundary
conditions, unit L2(cell) norm) is solved in the orthonormal planewave basis
``|C|^{-1/2} exp(i lam. z)``, ``lam = L_star @ z``.  In that basis the
Hamiltonian is the dense Hermitian matrix

    H[a, b] = 1/2 |lam_a|^2 delta_ab + What(z_a - z_b),

where ``What`` are the Fourier coefficients of the potential.  The band-space
fiber matrix

    A(xi)[n, m] = E_n delta_nm - i xi . P[n, m] + 1/2 |xi|^2 delta_nm

is the cell Hamiltonian of quasi-momentum ``xi`` expressed on the zone-center
eigenfunctions; with the full planewave basis retained its spectrum equals
the directly assembled fiber spectrum, which is used as a cross-oracle.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    BasisTooSmall,
    BoundViolated,
    CrossingInsideZone,
    DegenerateSpectrum,
    StepTooLarge,
)
from .lattice import LatticeGeometry, ReciprocalIndexSet, reciprocal_points


@dataclass(frozen=True)
class PeriodicPotentialSpec:
    """Real lattice-periodic potential given by finite Fourier data.

    ``coefficients`` maps integer reciprocal coordinates (as tuples) to the
    complex amplitude of ``exp(i lam . z)``.  The potential must be real
    (Hermitian coefficient symmetry) and bounded below by one, which the
    theory assumes throughout.
    """

    geom: LatticeGeometry
    coefficients: dict

    def __post_init__(self) -> None:
        for z, c in self.coefficients.items():
            if len(z) != self.geom.dim:
                raise ValueError(f"coefficient index {z} has wrong dimension")
            neg = tuple(-zi for zi in z)
            c_neg = self.coefficients.get(neg, 0.0)
            if abs(np.conj(c) - c_neg) > 1e-12:
                raise ValueError(f"coefficients not Hermitian at {z}")
        vals = self.sample(512 if self.geom.dim == 1 else 64)
        low = vals.real.min()
        if low < 1.0 - 1e-9:
            raise ValueError(f"periodic potential dips to {low:.6f} < 1")

    def coefficient(self, z) -> complex:
        return self.coefficients.get(tuple(int(i) for i in z), 0.0)

    def sample(self, n_per_dim: int) -> np.ndarray:
        """Evaluate W on a uniform cell grid (fractional coordinates)."""
        d = self.geom.dim
        fracs = [np.arange(n_per_dim) / n_per_dim - 0.5 for _ in range(d)]
        mesh = np.meshgrid(*fracs, indexing="ij")
        z_pts = np.stack([m.ravel() for m in mesh], axis=-1) @ self.geom.direct_matrix.T
        vals = np.zeros(z_pts.shape[0], dtype=complex)
        for z, c in self.coefficients.items():
            lam = self.geom.reciprocal_matrix @ np.asarray(z, dtype=float)
            vals += c * np.exp(1j * z_pts @ lam)
        if np.max(np.abs(vals.imag)) > 1e-10 * max(1.0, np.max(np.abs(vals.real))):
            raise ValueError("sampled potential has a nonreal part")
        return vals.reshape((n_per_dim,) * d)


@dataclass(frozen=True)
class BandBasis:
    """Zone-center eigenpairs in planewave coordinates plus momentum data.

    ``coeffs[n, a]`` is the amplitude of planewave ``a`` in band ``n``;
    ``momentum[n, m]`` is the d-vector of gradient matrix elements between
    bands n and m (anti-Hermitian in the band indices, zero on the diagonal).
    """

    geom: LatticeGeometry
    basis: ReciprocalIndexSet
    n_bands: int
    energies: np.ndarray          # (N,) ascending
    coeffs: np.ndarray            # (N, Q) complex
    momentum: np.ndarray          # (N, N, d) complex
    gap_tol: float = 1e-6

    def __post_init__(self) -> None:
        for arr in (self.energies, self.coeffs, self.momentum):
            arr.setflags(write=False)

    @property
    def n_planewaves(self) -> int:
        return len(self.basis)

    def validate(self, tol: float = 1e-10) -> None:
        """Re-check the orthonormality/momentum invariants."""
        gram = self.coeffs @ self.coeffs.conj().T
        if np.max(np.abs(gram - np.eye(self.n_bands))) > tol:
            raise AssertionError("band coefficients not orthonormal")
        if np.any(np.diff(self.energies) < 0):
            raise AssertionError("energies not ascending")
        P = self.momentum
        if np.max(np.abs(P + np.conj(np.swapaxes(P, 0, 1)))) > tol:
            raise AssertionError("momentum tensor not anti-Hermitian")
        diag = P[np.arange(self.n_bands), np.arange(self.n_bands)]
        if np.max(np.abs(diag)) > tol:
            raise AssertionError("diagonal momentum elements not zero")


def momentum_tensor(basis: ReciprocalIndexSet, coeffs: np.ndarray) -> np.ndarray:
    """Gradient matrix elements P[n, m] = sum_a conj(c[n,a]) (i lam_a) c[m,a]."""
    return np.einsum("na,ai,ma->nmi", coeffs.conj(), 1j * basis.points, coeffs)


def _phase_fix(vec: np.ndarray) -> np.ndarray:
    """Rotate so the largest-magnitude entry is real positive."""
    top = vec[np.argmax(np.abs(vec))]
    if abs(top) == 0.0:
        return vec
    return vec * (np.conj(top) / abs(top))


def solve_cell(
    W: PeriodicPotentialSpec,
    cutoff: int,
    n_bands: int,
    gap_tol: float = 1e-6,
    allow_degenerate: bool = False,
) -> BandBasis:
    """Solve the periodic cell problem, retaining the lowest ``n_bands`` bands.

    Raises :class:`BasisTooSmall` when more bands than planewaves are asked
    for, and :class:`DegenerateSpectrum` when two retained eigenvalues sit
    closer than ``gap_tol`` (suppress with ``allow_degenerate`` for tests
    that do not need simple bands).
    """
    basis = reciprocal_points(W.geom, cutoff)
    Q = len(basis)
    if n_bands > Q:
        raise BasisTooSmall(f"{n_bands} bands requested from {Q} planewaves")
    H = np.zeros((Q, Q), dtype=complex)
    H[np.arange(Q), np.arange(Q)] = 0.5 * np.sum(basis.points**2, axis=1)
    for z, c in W.coefficients.items():
        cols = basis.shift_indices(z)  # positions of z_a - z
        rows = np.nonzero(cols >= 0)[0]
        H[rows, cols[rows]] += c
    full_spectrum, vectors = np.linalg.eigh(H)
    energies = full_spectrum[:n_bands].copy()
    coeffs = vectors[:, :n_bands].T.copy()
    gaps = np.diff(energies)
    if not allow_degenerate and n_bands > 1 and np.min(gaps) <= gap_tol:
        worst = int(np.argmin(gaps))
        raise DegenerateSpectrum(
            f"gap E_{worst + 2} - E_{worst + 1} = {gaps[worst]:.3e} <= {gap_tol:.1e}"
        )
    for n in range(n_bands):
        coeffs[n] = _phase_fix(coeffs[n])
    P = momentum_tensor(basis, coeffs)
    # exactly zero for a simple band of a real potential; computed values carry
    # noise amplified by close pairs, so clean only the isolated bands (a
    # degenerate pair kept under allow_degenerate has genuine diagonal terms)
    for n in range(n_bands):
        below = full_spectrum[n] - full_spectrum[n - 1] if n > 0 else np.inf
        above = full_spectrum[n + 1] - full_spectrum[n] if n + 1 < Q else np.inf
        if min(below, above) > gap_tol:
            P[n, n, :] = 0.0
    return BandBasis(
        geom=W.geom,
        basis=basis,
        n_bands=n_bands,
        energies=energies,
        coeffs=coeffs,
        momentum=P,
        gap_tol=gap_tol,
    )


def fiber_matrix(bb: BandBasis, xi) -> np.ndarray:
    """Band-space fiber matrix A(xi); Hermitian by construction."""
    xi = np.asarray(xi, dtype=float)
    A = np.diag(bb.energies + 0.5 * float(xi @ xi)).astype(complex)
    A += -1j * np.einsum("nmi,i->nm", bb.momentum, xi)
    return A


@dataclass(frozen=True)
class FiberSpectrum:
    """Eigenvalues and unitary diagonalizer of A(xi) at one quasi-momentum."""

    xi: np.ndarray
    lambdas: np.ndarray       # (N,) ascending
    diagonalizer: np.ndarray  # (N, N), column n is the n-th eigenvector

    def __post_init__(self) -> None:
        self.lambdas.setflags(write=False)
        self.diagonalizer.setflags(write=False)


def diagonalize_fiber(
    bb: BandBasis, xi, reference: Optional[FiberSpectrum] = None
) -> FiberSpectrum:
    """Diagonalize A(xi) with ascending eigenvalues and pinned phases.

    Without a reference, each eigenvector gets its largest entry made real
    positive; with a reference (the previous point on a momentum path) the
    phase maximizing the real overlap with the reference column is used, so
    eigenvectors vary continuously along the path.
    """
    xi = np.asarray(xi, dtype=float)
    lambdas, T = np.linalg.eigh(fiber_matrix(bb, xi))
    T = T.copy()
    for n in range(bb.n_bands):
        if reference is not None:
            overlap = np.vdot(reference.diagonalizer[:, n], T[:, n])
            if abs(overlap) > 0.0:
                T[:, n] *= np.conj(overlap) / abs(overlap)
            else:
                T[:, n] = _phase_fix(T[:, n])
        else:
            T[:, n] = _phase_fix(T[:, n])
    return FiberSpectrum(xi=xi, lambdas=lambdas, diagonalizer=T)


def direct_fiber_solve(
    W: PeriodicPotentialSpec, cutoff: int, k, n_bands: int
) -> np.ndarray:
    """Ascending eigenvalues of the shifted-planewave fiber Hamiltonian.

    Assembles ``1/2 |lam + k|^2 delta + What`` directly; independent oracle
    for :func:`diagonalize_fiber`.
    """
    basis = reciprocal_points(W.geom, cutoff)
    Q = len(basis)
    if n_bands > Q:
        raise BasisTooSmall(f"{n_bands} bands requested from {Q} planewaves")
    k = np.asarray(k, dtype=float)
    H = np.zeros((Q, Q), dtype=complex)
    H[np.arange(Q), np.arange(Q)] = 0.5 * np.sum((basis.points + k) ** 2, axis=1)
    for z, c in W.coefficients.items():
        cols = basis.shift_indices(z)
        rows = np.nonzero(cols >= 0)[0]
        H[rows, cols[rows]] += c
    return np.linalg.eigvalsh(H)[:n_bands]


@dataclass(frozen=True)
class EffectiveMassSet:
    """Inverse effective-mass tensors for the retained bands."""

    inverse_masses: np.ndarray  # (N, d, d) real symmetric

    def __post_init__(self) -> None:
        self.inverse_masses.setflags(write=False)

    def __len__(self) -> int:
        return self.inverse_masses.shape[0]


def effective_mass(bb: BandBasis, n: int, with_tail_estimate: bool = False):
    """Inverse mass tensor of band n from second-order perturbation theory.

    Sums ``-2 Re[P_nm (x) P_mn] / (E_n - E_m)`` over the retained bands and
    adds the identity.  The result depends on the retained band count; with
    ``with_tail_estimate`` the magnitude of the final retained term is also
    returned as a size estimate for the first dropped one.
    """
    d = bb.geom.dim
    Minv = np.eye(d)
    last = 0.0
    terms = []
    for m in range(bb.n_bands):
        if m == n:
            continue
        outer = np.outer(bb.momentum[n, m], bb.momentum[m, n])
        if np.max(np.abs(outer.imag - (-outer.conj().T).imag) / 2.0) > 1e-10 * max(
            1.0, np.max(np.abs(outer))
        ):
            # imaginary parts must cancel in the symmetrized sum
            raise AssertionError("momentum outer product unexpectedly asymmetric")
        term = -2.0 * outer.real / (bb.energies[n] - bb.energies[m])
        term = 0.5 * (term + term.T)
        Minv += term
        terms.append((m, np.max(np.abs(term))))
    if terms:
        last = terms[-1][1]
    if with_tail_estimate:
        return Minv, last
    return Minv


def effective_masses(bb: BandBasis) -> EffectiveMassSet:
    """Inverse mass tensors for every retained band."""
    return EffectiveMassSet(
        inverse_masses=np.stack([effective_mass(bb, n) for n in range(bb.n_bands)])
    )


def _stencil_check(bb: BandBasis, n: int, points) -> dict:
    """Eigenvalues on stencil points; raises StepTooLarge on a local crossing."""
    values = {}
    for pt in points:
        lam = np.linalg.eigvalsh(fiber_matrix(bb, pt))
        lo, hi = max(0, n - 1), min(bb.n_bands - 1, n + 1)
        for j in range(lo, hi):
            if lam[j + 1] - lam[j] <= bb.gap_tol:
                raise StepTooLarge(
                    f"bands {j + 1}/{j + 2} cross near xi={np.asarray(pt)}"
                )
        values[tuple(np.round(np.asarray(pt, dtype=float), 15))] = lam[n]
    return values


def effective_mass_fd(bb: BandBasis, n: int, h: float = 1e-3) -> np.ndarray:
    """Central second-difference Hessian of lambda_n at xi = 0."""
    d = bb.geom.dim
    eye = np.eye(d)
    pts = [np.zeros(d)]
    for i in range(d):
        pts += [h * eye[i], -h * eye[i]]
        for j in range(i + 1, d):
            for si in (1, -1):
                for sj in (1, -1):
                    pts.append(h * (si * eye[i] + sj * eye[j]))
    vals = _stencil_check(bb, n, pts)

    def lam(pt):
        return vals[tuple(np.round(pt, 15))]

    H = np.zeros((d, d))
    lam0 = lam(np.zeros(d))
    for i in range(d):
        H[i, i] = (lam(h * eye[i]) - 2.0 * lam0 + lam(-h * eye[i])) / h**2
        for j in range(i + 1, d):
            H[i, j] = (
                lam(h * (eye[i] + eye[j]))
                - lam(h * (eye[i] - eye[j]))
                - lam(h * (-eye[i] + eye[j]))
                + lam(h * (-eye[i] - eye[j]))
            ) / (4.0 * h**2)
            H[j, i] = H[i, j]
    return H


def fiber_gradient_fd(bb: BandBasis, n: int, h: float = 1e-3) -> np.ndarray:
    """Central first difference of lambda_n at xi = 0 (should vanish)."""
    d = bb.geom.dim
    eye = np.eye(d)
    pts = [h * eye[i] for i in range(d)] + [-h * eye[i] for i in range(d)]
    vals = _stencil_check(bb, n, pts)
    grad = np.zeros(d)
    for i in range(d):
        grad[i] = (
            vals[tuple(np.round(h * eye[i], 15))]
            - vals[tuple(np.round(-h * eye[i], 15))]
        ) / (2.0 * h)
    return grad


def noncrossing_radius(
    bb: BandBasis,
    n_bands: int,
    r_max: float,
    n_radial: int = 32,
    n_angles: int = 8,
) -> float:
    """Largest scanned radius on which the first ``n_bands`` stay separated.

    Scans radial ladders in several directions and returns the largest radius
    whose whole ladder keeps every adjacent gap above ``bb.gap_tol``.  Purely
    empirical; returns 0.0 when the smallest scanned shell already fails.
    """
    if n_bands > bb.n_bands:
        raise ValueError("n_bands exceeds the retained band count")
    d = bb.geom.dim
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        angles = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        if d > 2:
            extra = np.eye(d)[2:]
            dirs = np.concatenate(
                [np.pad(dirs, ((0, 0), (0, d - 2))), extra, -extra], axis=0
            )
    radii = np.linspace(r_max / n_radial, r_max, n_radial)
    best = 0.0
    for r in radii:
        ok = True
        for u in dirs:
            lam = np.linalg.eigvalsh(fiber_matrix(bb, r * u))
            if np.min(np.diff(lam[:n_bands])) <= bb.gap_tol:
                ok = False
                break
        if not ok:
            break
        best = r
    return best


@dataclass(frozen=True)
class GrowthBoundReport:
    """Worst-case margins of the eigenvalue growth bounds at one xi."""

    xi: np.ndarray
    n0: int                    # first band with E_n >= |xi|^2 / 2 (0-based)
    margin_two_sided: float    # min over n >= n0 of bound - |lambda_n - E_n|
    margin_upper: float        # min over all n of upper bound - lambda_n
    worst_band_two_sided: int
    worst_band_upper: int


def eigenvalue_growth_margins(bb: BandBasis, xi, tol: float = 1e-9) -> GrowthBoundReport:
    """Check the two-sided and one-sided eigenvalue growth bounds at xi.

    Requires the full planewave basis retained (N = Q) so that the computed
    lambda_n are the true fiber eigenvalues of the discretized cell problem.
    Raises :class:`BoundViolated` if either bound fails beyond ``tol``.
    """
    if bb.n_bands != bb.n_planewaves:
        raise ValueError("eigenvalue_growth_margins needs the full basis (n_bands == Q)")
    xi = np.asarray(xi, dtype=float)
    lam = diagonalize_fiber(bb, xi).lambdas
    E = bb.energies
    s = float(np.linalg.norm(xi))
    candidates = np.nonzero(E >= 0.5 * s * s)[0]
    n0 = int(candidates[0]) if candidates.size else bb.n_bands
    two_sided = np.abs(s) * np.sqrt(2.0 * E) + 0.5 * s * s - np.abs(lam - E)
    upper = E + 2.0 * s * np.sqrt(E) + 0.5 * s * s - lam
    m2 = two_sided[n0:]
    margin2 = float(np.min(m2)) if m2.size else np.inf
    worst2 = n0 + int(np.argmin(m2)) if m2.size else -1
    margin1 = float(np.min(upper))
    worst1 = int(np.argmin(upper))
    scale = max(1.0, float(np.max(E)))
    if margin2 < -tol * scale:
        raise BoundViolated("two-sided growth bound", worst2, xi, margin2)
    if margin1 < -tol * scale:
        raise BoundViolated("upper growth bound", worst1, xi, margin1)
    return GrowthBoundReport(
        xi=xi,
        n0=n0,
        margin_two_sided=margin2,
        margin_upper=margin1,
        worst_band_two_sided=worst2,
        worst_band_upper=worst1,
    )


def vn_one_coefficients(bb: BandBasis) -> np.ndarray:
    """Overlaps of each band with the constant function on the cell.

    In planewave coordinates this is the zero-frequency amplitude scaled by
    the square root of the cell volume.
    """
    zero = bb.basis.index_of(np.zeros(bb.geom.dim, dtype=int))
    return np.sqrt(bb.geom.cell_volume) * np.conj(bb.coeffs[:, zero])


def export_band_csv(path, bb: BandBasis, xis) -> None:
    """Write (xi components, band index, lambda_n) rows for the given xis."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"xi{i + 1}" for i in range(bb.geom.dim)] + ["n", "lambda"])
        for xi in xis:
            xi = np.atleast_1d(np.asarray(xi, dtype=float))
            lam = diagonalize_fiber(bb, xi).lambdas
            for n in range(bb.n_bands):
                writer.writerow(
                    [repr(float(c)) for c in xi] + [n + 1, repr(float(lam[n]))]
                )


def export_band_json(path, bb: BandBasis) -> None:
    """Write energies, inverse masses and momentum magnitudes as JSON."""
    masses = effective_masses(bb)
    payload = {
        "schema": 1,
        "n_bands": bb.n_bands,
        "energies": bb.energies.tolist(),
        "inverse_masses": masses.inverse_masses.tolist(),
        "momentum_abs": np.linalg.norm(bb.momentum, axis=2).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def warn_on_crossings(lambdas_grid: np.ndarray, gap_tol: float) -> bool:
    """Emit CrossingInsideZone when adjacent bands touch on a sampled grid."""
    gaps = np.diff(lambdas_grid, axis=-1)
    if gaps.size and np.min(gaps) <= gap_tol:
        warnings.warn(
            "band ordering is by value; adjacent eigenvalues touch on the "
            "sampled momentum grid",
            CrossingInsideZone,
        )
        return True
    return False
