"""Scaled envelope transform between fine-grid waves and band amplitudes.

The macroscopic domain is a torus made of ``m`` copies of the scaled cell
``eps * C`` per dimension, sampled with ``q`` points per scaled cell.  Every
fine-grid frequency then splits uniquely as ``k + lam / eps`` with ``k`` on
the m-point grid filling ``B / eps`` and ``lam`` a reciprocal vector: in
integer coordinates a fine frequency ``j`` is ``r + m * s`` with
``r in [-m/2, m/2)`` (zone part) and ``s`` the cell-harmonic part.  The
transform gathers the band-shifted spectral blocks and contracts them
against the conjugated planewave amplitudes of each band; with ``q >=
2*cutoff + 2`` the round trip is exact on the retained band/frequency space.

Spectral arrays hold continuum-normalized transform values, so discrete
k-sums weighted with the k-cell volume reproduce the L2 norms used in the
convergence statements.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
import numpy as np

from .errors import AliasedCell, GridMismatch
from .lattice import LatticeGeometry, ReciprocalIndexSet, in_zone


@dataclass(frozen=True)
class MacroGrid:
    """Two-scale discretization of the periodic macroscopic box.

    The box is ``m * eps`` lattice cells wide per dimension, with ``q`` fine
    samples per scaled cell (``m`` and ``q`` even so the frequency cubes are
    symmetric).  ``q >= 2*cutoff + 2`` keeps the cell harmonics of a band
    basis with that cutoff alias-free.
    """

    geom: LatticeGeometry
    eps: float
    cells: int   # m
    q: int
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.cells < 2 or self.cells % 2:
            raise ValueError("cells (m) must be an even integer >= 2")
        if self.q < 4 or self.q % 2:
            raise ValueError("q must be an even integer >= 4")

    # --- shapes and measures -------------------------------------------------
    @property
    def dim(self) -> int:
        return self.geom.dim

    @property
    def n_fine(self) -> int:
        return self.cells * self.q

    @property
    def fine_shape(self) -> tuple:
        return (self.n_fine,) * self.dim

    @property
    def macro_shape(self) -> tuple:
        return (self.cells,) * self.dim

    @property
    def fine_points(self) -> int:
        return self.n_fine**self.dim

    @property
    def box_volume(self) -> float:
        return (self.cells * self.eps) ** self.dim * self.geom.cell_volume

    @property
    def x_weight(self) -> float:
        """Quadrature weight per fine grid point."""
        return self.box_volume / self.fine_points

    @property
    def k_weight(self) -> float:
        """Frequency-cell volume of the discrete k lattice."""
        return (2.0 * np.pi) ** self.dim / self.box_volume

    # --- index machinery -----------------------------------------------------
    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def _axis_freq_ints(self, n: int) -> np.ndarray:
        return np.rint(np.fft.fftfreq(n) * n).astype(int)

    @property
    def macro_ints(self) -> np.ndarray:
        """(m^d, d) signed zone-frequency integers, FFT order per axis."""

        def build():
            axes = [self._axis_freq_ints(self.cells)] * self.dim
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([a.ravel() for a in mesh], axis=-1)

        return self._cached("macro_ints", build)

    @property
    def fine_freq_ints(self) -> np.ndarray:
        """(fine_points, d) signed fine-frequency integers, FFT order."""

        def build():
            axes = [self._axis_freq_ints(self.n_fine)] * self.dim
            mesh = np.meshgrid(*axes, indexing="ij")
            return np.stack([a.ravel() for a in mesh], axis=-1)

        return self._cached("fine_freq_ints", build)

    def macro_k_points(self) -> np.ndarray:
        """(m^d, d) zone frequencies k = L_star @ r / (m eps)."""

        def build():
            scale = 1.0 / (self.cells * self.eps)
            return scale * (self.macro_ints @ self.geom.reciprocal_matrix.T)

        return self._cached("macro_k", build)

    def fine_k_points(self) -> np.ndarray:
        """(fine_points, d) all representable frequencies."""

        def build():
            scale = 1.0 / (self.cells * self.eps)
            return scale * (self.fine_freq_ints @ self.geom.reciprocal_matrix.T)

        return self._cached("fine_k", build)

    def fine_x_points(self) -> np.ndarray:
        """(fine_points, d) sample positions eps * L @ (u / q)."""

        def build():
            axes = [np.arange(self.n_fine) / self.q] * self.dim
            mesh = np.meshgrid(*axes, indexing="ij")
            u = np.stack([a.ravel() for a in mesh], axis=-1)
            return self.eps * (u @ self.geom.direct_matrix.T)

        return self._cached("fine_x", build)

    def spectral_positions(self, int_vectors: np.ndarray) -> np.ndarray:
        """Flat fine-array positions of signed frequency integer vectors.

        Raises :class:`AliasedCell` when a vector exceeds the fine Nyquist
        range ``[-mq/2, mq/2)``.
        """
        iv = np.asarray(int_vectors, dtype=int)
        n = self.n_fine
        if np.any(iv < -n // 2) or np.any(iv >= n // 2):
            raise AliasedCell("frequency outside the fine grid Nyquist range")
        pos = iv % n
        flat = np.zeros(pos.shape[:-1], dtype=int)
        for ax in range(self.dim):
            flat = flat * n + pos[..., ax]
        return flat

    def gather_positions(self, basis: ReciprocalIndexSet) -> np.ndarray:
        """(Q, m^d) flat fine positions of frequency r + m*s per (s, r)."""
        key = ("gather", basis.cutoff)

        def build():
            if self.q < 2 * basis.cutoff + 2:
                raise AliasedCell(
                    f"q = {self.q} < 2*cutoff + 2 = {2 * basis.cutoff + 2}"
                )
            ints = (
                self.macro_ints[None, :, :] + self.cells * basis.ints[:, None, :]
            )
            return self.spectral_positions(ints)

        return self._cached(key, build)

    # --- transforms between x samples and spectral values ---------------------
    def x_to_spectral(self, values: np.ndarray) -> np.ndarray:
        axes = tuple(range(values.ndim - self.dim, values.ndim))
        scale = self.x_weight / (2.0 * np.pi) ** (self.dim / 2.0)
        return np.fft.fftn(values, axes=axes) * scale

    def spectral_to_x(self, spectral: np.ndarray) -> np.ndarray:
        axes = tuple(range(spectral.ndim - self.dim, spectral.ndim))
        scale = (2.0 * np.pi) ** (self.dim / 2.0) / self.x_weight
        return np.fft.ifftn(spectral * scale, axes=axes)

    def x_norm(self, values: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(values) ** 2) * self.x_weight))

    def spectral_norm(self, spectral: np.ndarray) -> float:
        return float(np.sqrt(np.sum(np.abs(spectral) ** 2) * self.k_weight))

    def fine_sobolev_norm(self, psi: np.ndarray, mu: float) -> float:
        """Discrete H^mu norm of a fine-grid field over all frequencies."""
        spec = self.x_to_spectral(psi).reshape(-1)
        k2 = np.sum(self.fine_k_points() ** 2, axis=1)
        return float(
            np.sqrt(np.sum((1.0 + k2) ** mu * np.abs(spec) ** 2) * self.k_weight)
        )


@dataclass
class EnvelopeField:
    """Band amplitudes on the zone-filling k grid of a macroscopic box.

    ``data[n]`` holds the transform values of band n on the m-point grid in
    ``B / eps`` (FFT ordering per axis), so support inside the scaled zone is
    structural.  ``time`` is a context stamp used by trajectory bookkeeping.
    """

    grid: MacroGrid
    data: np.ndarray  # (N,) + macro_shape complex
    time: float = 0.0

    def __post_init__(self) -> None:
        expected = (self.data.shape[0],) + self.grid.macro_shape
        if self.data.shape != expected:
            raise GridMismatch(
                f"envelope data shape {self.data.shape}, expected {expected}"
            )

    @property
    def n_bands(self) -> int:
        return self.data.shape[0]

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.n_bands, -1)

    def norm(self) -> float:
        return self.grid.spectral_norm(self.data)

    def copy(self) -> "EnvelopeField":
        return EnvelopeField(grid=self.grid, data=self.data.copy(), time=self.time)


def decompose(psi: np.ndarray, bb, grid: MacroGrid) -> EnvelopeField:
    """Envelope transform of a fine-grid wave onto the first N bands.

    Fourier-transforms ``psi``, splits each frequency into zone part plus
    reciprocal translate, and contracts the translate blocks against the
    conjugated band amplitudes.
    """
    if psi.shape != grid.fine_shape:
        raise GridMismatch(f"psi shape {psi.shape}, expected {grid.fine_shape}")
    pos = grid.gather_positions(bb.basis)
    spec = grid.x_to_spectral(psi).reshape(-1)
    blocks = spec[pos]  # (Q, m^d)
    g = bb.coeffs.conj() @ blocks
    return EnvelopeField(grid=grid, data=g.reshape((bb.n_bands,) + grid.macro_shape))


def reconstruct(env: EnvelopeField, bb) -> np.ndarray:
    """Adjoint-inverse of :func:`decompose` on the truncated space."""
    grid = env.grid
    if env.n_bands > bb.n_bands:
        raise GridMismatch("envelope holds more bands than the basis")
    pos = grid.gather_positions(bb.basis)
    spec = np.zeros(grid.fine_points, dtype=complex)
    contrib = bb.coeffs[: env.n_bands].T @ env.flat()  # (Q, m^d)
    spec[pos.reshape(-1)] = contrib.reshape(-1)
    return grid.spectral_to_x(spec.reshape(grid.fine_shape))


def extended_from_envelope(env: EnvelopeField) -> np.ndarray:
    """Embed zone-supported amplitudes into the full fine frequency set."""
    grid = env.grid
    pos = grid.spectral_positions(grid.macro_ints)
    out = np.zeros((env.n_bands, grid.fine_points), dtype=complex)
    out[:, pos] = env.flat()
    return out.reshape((env.n_bands,) + grid.fine_shape)


def envelope_from_extended(
    ext: np.ndarray, grid: MacroGrid, time: float = 0.0
) -> EnvelopeField:
    """Restrict an extended spectral field to its zone block."""
    n_bands = ext.shape[0]
    pos = grid.spectral_positions(grid.macro_ints)
    flat = ext.reshape(n_bands, -1)[:, pos]
    return EnvelopeField(
        grid=grid, data=flat.reshape((n_bands,) + grid.macro_shape), time=time
    )


def envelope_on_fine(env: EnvelopeField) -> np.ndarray:
    """Evaluate the band envelopes on the fine x grid (exact zero padding)."""
    return env.grid.spectral_to_x(extended_from_envelope(env))


def truncate(env: EnvelopeField, gamma: float) -> EnvelopeField:
    """Zero amplitudes outside gamma * B (half-open membership)."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    keep = in_zone(env.grid.geom, env.grid.macro_k_points(), gamma)
    flat = env.flat() * keep[None, :]
    return EnvelopeField(
        grid=env.grid,
        data=flat.reshape(env.data.shape),
        time=env.time,
    )


def truncate_fine(psi: np.ndarray, grid: MacroGrid, gamma: float) -> np.ndarray:
    """Same frequency cutoff applied to a fine-grid scalar field."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    if psi.shape != grid.fine_shape:
        raise GridMismatch(f"psi shape {psi.shape}, expected {grid.fine_shape}")
    keep = in_zone(grid.geom, grid.fine_k_points(), gamma)
    spec = grid.x_to_spectral(psi).reshape(-1) * keep
    return grid.spectral_to_x(spec.reshape(grid.fine_shape))


def sobolev_norm(env: EnvelopeField, mu: float) -> float:
    """Weighted norm with multiplier (1 + |k|^2)^(mu/2); mu = 0 is plain L2."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    k2 = np.sum(env.grid.macro_k_points() ** 2, axis=1)
    weighted = (1.0 + k2) ** mu * np.sum(np.abs(env.flat()) ** 2, axis=0)
    return float(np.sqrt(np.sum(weighted) * env.grid.k_weight))


def evaluate_macro_sum(grid: MacroGrid, terms: dict, where: str = "fine") -> np.ndarray:
    """Evaluate a finite macro Fourier sum on the fine grid.

    ``terms`` maps integer frequency tuples (multiples of the box fundamental)
    to complex amplitudes.  Returns real values when the terms are Hermitian.
    """
    if where != "fine":
        raise ValueError("only fine-grid evaluation is supported")
    spec = np.zeros(grid.fine_points, dtype=complex)
    for j, c in terms.items():
        jv = np.asarray(j, dtype=int).reshape(1, -1)
        if jv.shape[1] != grid.dim:
            raise GridMismatch(f"term frequency {j} has wrong dimension")
        spec[grid.spectral_positions(jv)[0]] += c
    vals = np.fft.ifftn(spec.reshape(grid.fine_shape)) * grid.fine_points
    if np.max(np.abs(vals.imag)) <= 1e-10 * max(1.0, np.max(np.abs(vals.real))):
        return vals.real
    return vals


def weighted_density_gap(psi: np.ndarray, env: EnvelopeField, theta: dict) -> float:
    """Integral of theta times (wave density minus summed envelope density).

    ``theta`` is a finite macro Fourier sum given as integer-frequency terms;
    both densities are integrated on the fine grid so the quadrature is exact
    for the band-limited integrands involved.
    """
    grid = env.grid
    if psi.shape != grid.fine_shape:
        raise GridMismatch(f"psi shape {psi.shape}, expected {grid.fine_shape}")
    th = evaluate_macro_sum(grid, theta)
    f_fine = envelope_on_fine(env)
    dens_env = np.sum(np.abs(f_fine) ** 2, axis=0)
    gap = np.sum(th * (np.abs(psi) ** 2 - dens_env)) * grid.x_weight
    return float(np.real(gap))


def envelope_from_macro_terms(
    grid: MacroGrid, n_bands: int, band_terms: dict
) -> EnvelopeField:
    """Synthesize amplitudes from per-band finite macro Fourier sums.

    ``band_terms[n]`` maps integer frequency tuples to the amplitude of
    ``exp(i k_j . x)`` in the position-side envelope of band ``n``; the
    frequencies must fall inside the scaled zone grid.
    """
    m = grid.cells
    data = np.zeros((n_bands, grid.cells**grid.dim), dtype=complex)
    spike = grid.box_volume / (2.0 * np.pi) ** (grid.dim / 2.0)
    strides = m ** np.arange(grid.dim - 1, -1, -1)
    for n, terms in band_terms.items():
        for j, a in terms.items():
            jv = np.asarray(j, dtype=int)
            if np.any(jv < -m // 2) or np.any(jv >= m // 2):
                raise GridMismatch(f"band {n} frequency {j} outside the zone grid")
            data[n, (jv % m) @ strides] += spike * a
    return EnvelopeField(
        grid=grid, data=data.reshape((n_bands,) + grid.macro_shape)
    )


# --- snapshot files ----------------------------------------------------------

_HEADER = struct.Struct("<idiii")  # dim, eps, N, m, q


def _lex_permutation(grid: MacroGrid) -> np.ndarray:
    ints = grid.macro_ints
    return np.lexsort(tuple(ints[:, ax] for ax in range(ints.shape[1] - 1, -1, -1)))


def write_snapshot(path, env: EnvelopeField) -> None:
    """Binary snapshot: little-endian header + complex64 band-major lex data."""
    grid = env.grid
    perm = _lex_permutation(grid)
    payload = env.flat()[:, perm].astype(np.complex64)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(grid.dim, grid.eps, env.n_bands, grid.cells, grid.q)
        )
        fh.write(payload.tobytes())


def read_snapshot(path, geom: LatticeGeometry) -> EnvelopeField:
    """Load a snapshot written by :func:`write_snapshot` for a known lattice."""
    with open(path, "rb") as fh:
        dim, eps, n_bands, m, q = _HEADER.unpack(fh.read(_HEADER.size))
        if dim != geom.dim:
            raise GridMismatch(f"snapshot dim {dim} != lattice dim {geom.dim}")
        grid = MacroGrid(geom=geom, eps=eps, cells=m, q=q)
        raw = np.frombuffer(fh.read(), dtype=np.complex64)
    flat = raw.reshape(n_bands, m**dim).astype(complex)
    perm = _lex_permutation(grid)
    data = np.empty_like(flat)
    data[:, perm] = flat
    return EnvelopeField(grid=grid, data=data.reshape((n_bands,) + grid.macro_shape))


def export_density_csv(path, env: EnvelopeField) -> None:
    """Plot-ready CSV of |g_n(k)|^2 in lexicographic k order."""
    import csv as _csv

    grid = env.grid
    perm = _lex_permutation(grid)
    kpts = grid.macro_k_points()[perm]
    flat = env.flat()[:, perm]
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([f"k{i + 1}" for i in range(grid.dim)] + ["n", "abs_g_sq"])
        for n in range(env.n_bands):
            for i in range(kpts.shape[0]):
                writer.writerow(
                    list(kpts[i]) + [n + 1, repr(float(np.abs(flat[n, i]) ** 2))]
                )
