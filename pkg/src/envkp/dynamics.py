"""Strang propagators for the wave, envelope and homogenized systems.

One driver serves every integrator: the fine-grid wave propagator, the
exact envelope system (two-scale potential operator), the band-coupled
system with the homogenized potential, its diagonal effective-mass version,
the filtered (gauge-removed) version, and the scale-free limit system.

Every Strang factor is an exact matrix or scalar exponential, so the stiff
inverse-square-scale phases cost nothing in stability: each factor is
unitary and the only dt limit is accuracy of the splitting itself.  Band
states evolve on the full fine frequency lattice, because the homogenized
potential (unlike the two-scale one) legitimately pushes amplitude outside
the scaled zone and truncating it there would corrupt the model gaps the
package exists to measure.

Snapshot layout: 'fine' trajectories store x-space wave samples with the
grid's fine shape; 'bands' trajectories store flat spectral arrays of shape
(N, fine_points).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bloch import BandBasis, EffectiveMassSet, PeriodicPotentialSpec
from .envelope import (
    EnvelopeField,
    MacroGrid,
    envelope_from_extended,
    evaluate_macro_sum,
    extended_from_envelope,
    write_snapshot,
)
from .errors import CrossingInsideZone, GridMismatch
from .potential import BandProjectedPotential, ExternalPotentialSpec


@dataclass(frozen=True)
class PropagatorConfig:
    """Time-stepping parameters shared by all propagators.

    ``dt`` may be negative to run a reversibility check; ``record_every``
    counts steps between stored snapshots (the final state is always kept).
    The oscillation guard ``|dt| <= eps^2 * dt_factor`` matters for the
    propagators that approximate inverse-square-scale phase interplay
    (wave, exact envelope, filtered); they warn when it is violated.
    """

    dt: float
    t_final: float
    eps: float
    scheme: str = "strang"
    record_every: int = 1
    dt_factor: float = 0.1
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.dt == 0.0:
            raise ValueError("dt must be nonzero")
        if self.t_final < 0.0:
            raise ValueError("t_final must be nonnegative")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")
        if self.scheme != "strang":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        steps = int(round(self.t_final / abs(self.dt)))
        if steps < 1 or abs(steps * abs(self.dt) - self.t_final) > 1e-9 * max(
            1.0, self.t_final
        ):
            raise ValueError("t_final must be an integer number of steps")
        return steps

    def warn_if_unresolved(self, model: str) -> None:
        if abs(self.dt) > self.eps**2 * self.dt_factor * (1.0 + 1e-12):
            warnings.warn(
                f"{model}: dt={abs(self.dt):.3e} exceeds eps^2*dt_factor="
                f"{self.eps**2 * self.dt_factor:.3e}; oscillatory phases may "
                "be under-resolved",
                RuntimeWarning,
            )


@dataclass
class Trajectory:
    """Recorded snapshots of one propagator run."""

    times: np.ndarray
    states: list
    kind: str  # 'fine' or 'bands'
    grid: MacroGrid
    norms: np.ndarray
    meta: dict = field(default_factory=dict)

    def terminal(self):
        return self.states[-1]


@dataclass(frozen=True)
class FreeFlowTables:
    """Fiber spectra over a momentum grid, plus diagonal model phases.

    ``lambdas[i]``/``diagonalizers[i]`` hold the band-space fiber spectrum at
    ``eps * kpoints[i]``; ``em_phases`` carries the diagonal effective-mass
    symbol ``E_n / eps^2 + k . Minv_n k / 2`` when masses are supplied.
    """

    kpoints: np.ndarray        # (n_k, d)
    eps: float
    lambdas: np.ndarray        # (n_k, N)
    diagonalizers: np.ndarray  # (n_k, N, N)
    em_phases: Optional[np.ndarray] = None  # (n_k, N)

    def __post_init__(self) -> None:
        T = self.diagonalizers
        gram = np.einsum("kab,kac->kbc", T.conj(), T)
        eye = np.eye(T.shape[1])
        err = float(np.max(np.abs(gram - eye)))
        if err > 1e-10:
            raise AssertionError(f"stored diagonalizers not unitary: {err:.2e}")


def build_free_flow_tables(
    bb: BandBasis,
    kpoints: np.ndarray,
    eps: float,
    masses: Optional[EffectiveMassSet] = None,
) -> FreeFlowTables:
    """Batched fiber diagonalization at eps * k over a momentum grid."""
    xi = eps * np.asarray(kpoints, dtype=float)
    n_k = xi.shape[0]
    N = bb.n_bands
    A = np.zeros((n_k, N, N), dtype=complex)
    idx = np.arange(N)
    A[:, idx, idx] = bb.energies[None, :] + 0.5 * np.sum(xi**2, axis=1)[:, None]
    A += -1j * np.einsum("nmi,ki->knm", bb.momentum, xi)
    lambdas, T = np.linalg.eigh(A)
    em = None
    if masses is not None:
        k = np.asarray(kpoints, dtype=float)
        quad = 0.5 * np.einsum("ki,nij,kj->kn", k, masses.inverse_masses, k)
        em = bb.energies[None, :] / eps**2 + quad
    gaps = np.diff(lambdas, axis=1)
    if gaps.size and np.min(gaps) <= bb.gap_tol:
        warnings.warn(
            "adjacent fiber eigenvalues touch on the momentum grid; "
            "value ordering retained",
            CrossingInsideZone,
        )
    return FreeFlowTables(
        kpoints=np.asarray(kpoints, float),
        eps=eps,
        lambdas=lambdas,
        diagonalizers=T,
        em_phases=em,
    )


# --- shared stepping driver ----------------------------------------------------


def _record_steps(n_steps: int, every: int) -> list:
    marks = list(range(0, n_steps + 1, every))
    if marks[-1] != n_steps:
        marks.append(n_steps)
    return marks


def _drive(
    state: np.ndarray,
    cfg: PropagatorConfig,
    free_full: Callable,
    pot_half: Callable,
    pot_full: Optional[Callable],
    norm_of: Callable,
    snapshot_of: Callable,
    time_dependent: bool,
):
    """Run Strang steps, merging interior half-steps when the potential
    factor is time independent, and collect snapshots."""
    n_steps = cfg.n_steps
    dt = cfg.dt
    marks = _record_steps(n_steps, cfg.record_every)
    times, snaps, norms = [], [], []

    def record(step, st):
        t = cfg.t0 + step * dt
        times.append(t)
        snaps.append(snapshot_of(st, t))
        norms.append(norm_of(st))

    record(0, state)
    if time_dependent or pot_full is None:
        for s in range(1, n_steps + 1):
            t_mid = cfg.t0 + (s - 0.5) * dt
            state = pot_half(state, t_mid)
            state = free_full(state)
            state = pot_half(state, t_mid)
            if s in marks[1:]:
                record(s, state)
    else:
        state = pot_half(state, 0.0)
        mark_set = set(marks[1:])
        for s in range(1, n_steps + 1):
            state = free_full(state)
            if s in mark_set or s == n_steps:
                state = pot_half(state, 0.0)
                if s in mark_set:
                    record(s, state)
                if s < n_steps:
                    state = pot_half(state, 0.0)
            else:
                state = pot_full(state, 0.0)
    return np.asarray(times), snaps, np.asarray(norms)


def _coerce_band_state(init, grid: MacroGrid) -> np.ndarray:
    """Initial data as a flat (N, fine_points) spectral array.

    Accepts an :class:`EnvelopeField` (embedded into the fine frequency set)
    or an already-extended array, e.g. a snapshot from a previous run.
    """
    if isinstance(init, EnvelopeField):
        if init.grid.fine_shape != grid.fine_shape:
            raise GridMismatch("envelope grid differs from the run grid")
        return extended_from_envelope(init).reshape(init.n_bands, -1).copy()
    arr = np.asarray(init, dtype=complex)
    n_bands = arr.shape[0]
    if arr.shape[1:] == grid.fine_shape or arr.shape == (n_bands, grid.fine_points):
        return arr.reshape(n_bands, -1).copy()
    raise GridMismatch(f"cannot interpret initial state of shape {arr.shape}")


def _band_fft_pair(grid: MacroGrid, n_bands: int):
    shape = (n_bands,) + grid.fine_shape
    axes = tuple(range(1, grid.dim + 1))

    def to_x(flat):
        return np.fft.ifftn(flat.reshape(shape), axes=axes).reshape(n_bands, -1)

    def to_k(fx):
        return np.fft.fftn(fx.reshape(shape), axes=axes).reshape(n_bands, -1)

    return to_x, to_k


def _matrix_exponentials(Vx: np.ndarray, dt: float):
    """exp(-i dt V / 2) and exp(-i dt V) for a field of Hermitian matrices."""
    w, U = np.linalg.eigh(Vx)
    half = np.einsum("xab,xb,xcb->xac", U, np.exp(-0.5j * dt * w), U.conj())
    full = np.einsum("xab,xb,xcb->xac", U, np.exp(-1.0j * dt * w), U.conj())
    return half, full


def _apply_band_matrix(mats: np.ndarray, f: np.ndarray) -> np.ndarray:
    """out[a] = sum_b mats[:, a, b] * f[b] for (n_x, N, N) against (N, n_x)."""
    N = f.shape[0]
    out = np.zeros_like(f)
    for a in range(N):
        acc = out[a]
        for b in range(N):
            acc += mats[:, a, b] * f[b]
    return out


# --- the five propagators -------------------------------------------------------


def evolve_schrodinger(
    psi0: np.ndarray,
    W: PeriodicPotentialSpec,
    V: Optional[ExternalPotentialSpec],
    grid: MacroGrid,
    cfg: PropagatorConfig,
) -> Trajectory:
    """Fine-grid split-step integration of the two-scale wave equation.

    Potential factor: exact phases of ``W(x/eps)/eps^2 + V(x, x/eps)``;
    kinetic factor: exact phases of ``|k|^2 / 2`` in frequency space.
    """
    if psi0.shape != grid.fine_shape:
        raise GridMismatch(f"psi0 shape {psi0.shape}, expected {grid.fine_shape}")
    cfg.warn_if_unresolved("evolve_schrodinger")
    # W(x/eps) lives on cell harmonics, i.e. fine frequencies m * z
    spec = np.zeros(grid.fine_points, dtype=complex)
    for z, c in W.coefficients.items():
        iv = grid.cells * np.asarray(z, int)
        spec[grid.spectral_positions(iv.reshape(1, -1))[0]] += c
    w_fine = (np.fft.ifftn(spec.reshape(grid.fine_shape)) * grid.fine_points).real
    pot = w_fine / grid.eps**2
    if V is not None:
        pot = pot + V.evaluate_fine(grid)
    phase_half = np.exp(-0.5j * cfg.dt * pot)
    phase_full = phase_half * phase_half
    k2 = np.sum(grid.fine_k_points() ** 2, axis=1).reshape(grid.fine_shape)
    kin = np.exp(-0.5j * cfg.dt * k2)

    def free_full(psi):
        return np.fft.ifftn(kin * np.fft.fftn(psi))

    times, snaps, norms = _drive(
        psi0.astype(complex),
        cfg,
        free_full,
        lambda psi, t: phase_half * psi,
        lambda psi, t: phase_full * psi,
        norm_of=grid.x_norm,
        snapshot_of=lambda psi, t: psi.copy(),
        time_dependent=False,
    )
    return Trajectory(
        times=times,
        states=snaps,
        kind="fine",
        grid=grid,
        norms=norms,
        meta={"model": "schrodinger", "dt": cfg.dt, "eps": grid.eps},
    )


def _kp_step_matrices(tables: FreeFlowTables, dt: float) -> np.ndarray:
    phase = np.exp(-1j * dt * tables.lambdas / tables.eps**2)
    T = tables.diagonalizers
    return np.einsum("kab,kb,kcb->kac", T, phase, T.conj())


def evolve_kp(
    env0,
    bb: BandBasis,
    bpp: Optional[BandProjectedPotential],
    cfg: PropagatorConfig,
    exact_potential: Optional[ExternalPotentialSpec] = None,
    tables: Optional[FreeFlowTables] = None,
    grid: Optional[MacroGrid] = None,
) -> Trajectory:
    """Band-coupled envelope propagator with the fiber-exact free factor.

    With ``exact_potential`` given, the potential half-step exponentiates the
    two-scale operator instead of the homogenized one (a rapidly convergent
    power series: the step generator has norm below ``dt * max|V|``), which
    turns this into the exact envelope system on the retained bands.

    ``env0`` may be an :class:`EnvelopeField` or an extended spectral array
    (then ``grid`` is required), e.g. a snapshot from an earlier run.
    """
    grid = env0.grid if isinstance(env0, EnvelopeField) else grid
    if grid is None:
        raise GridMismatch("array initial data needs an explicit grid")
    if abs(grid.eps - cfg.eps) > 1e-12:
        raise GridMismatch("config eps differs from grid eps")

    if exact_potential is not None:
        return _evolve_exact(env0, bb, exact_potential, cfg, tables, grid)
    state0 = _coerce_band_state(env0, grid)
    N = state0.shape[0]

    if tables is None:
        tables = build_free_flow_tables(bb, grid.fine_k_points(), grid.eps)
    steps = _kp_step_matrices(tables, cfg.dt)
    to_x, to_k = _band_fft_pair(grid, N)
    if bpp is not None:
        Vx = bpp.evaluate_fine(grid)
        e_half, e_full = _matrix_exponentials(Vx, cfg.dt)
        pot_half = lambda g, t: to_k(_apply_band_matrix(e_half, to_x(g)))
        pot_full = lambda g, t: to_k(_apply_band_matrix(e_full, to_x(g)))
    else:
        pot_half = lambda g, t: g
        pot_full = lambda g, t: g

    def free_full(g):
        return _apply_band_matrix(steps, g)

    times, snaps, norms = _drive(
        state0,
        cfg,
        free_full,
        pot_half,
        pot_full,
        norm_of=grid.spectral_norm,
        snapshot_of=lambda g, t: g.copy(),
        time_dependent=False,
    )
    return Trajectory(
        times=times,
        states=snaps,
        kind="bands",
        grid=grid,
        norms=norms,
        meta={"model": "kp", "dt": cfg.dt, "eps": grid.eps, "n_bands": N},
    )


def _evolve_exact(
    env0,
    bb: BandBasis,
    V: ExternalPotentialSpec,
    cfg: PropagatorConfig,
    tables: Optional[FreeFlowTables],
    grid: MacroGrid,
) -> Trajectory:
    """Exact envelope system: zone-supported state, two-scale potential."""
    V.check_grid(grid)
    cfg.warn_if_unresolved("evolve_kp[exact]")
    if isinstance(env0, EnvelopeField):
        zone0 = env0.flat().copy()
    else:
        # the exact generator never leaves the zone block, so restriction of
        # an extended snapshot loses nothing for round trips
        zone0 = envelope_from_extended(
            _coerce_band_state(env0, grid).reshape((-1,) + grid.fine_shape), grid
        ).flat()
    N = zone0.shape[0]
    if N != bb.n_bands:
        raise GridMismatch("envelope bands must match the basis")
    if tables is None:
        tables = build_free_flow_tables(bb, grid.macro_k_points(), grid.eps)
    steps = _kp_step_matrices(tables, cfg.dt)
    pos = grid.gather_positions(bb.basis)  # (Q, m^d)
    pos_flat = pos.reshape(-1)
    v_fine = V.evaluate_fine(grid)
    v_max = float(np.max(np.abs(v_fine)))

    def u_apply(g):
        contrib = bb.coeffs.T @ g  # (Q, m^d)
        spec = np.zeros(grid.fine_points, dtype=complex)
        spec[pos_flat] = contrib.reshape(-1)
        psi = grid.spectral_to_x(spec.reshape(grid.fine_shape))
        spec2 = grid.x_to_spectral(v_fine * psi).reshape(-1)
        return bb.coeffs.conj() @ spec2[pos]

    def n_terms(theta):
        p, bound = 1, abs(theta) * max(v_max, 1e-300)
        term = bound
        while term > 1e-16 and p < 24:
            p += 1
            term *= bound / p
        return max(p, 2)

    def pot_exp(g, theta):
        acc = g.copy()
        term = g
        for p in range(1, n_terms(theta) + 1):
            term = (-1j * theta / p) * u_apply(term)
            acc = acc + term
        return acc

    def free_full(g):
        return _apply_band_matrix(steps, g)

    times, snaps, norms = _drive(
        zone0,
        cfg,
        free_full,
        lambda g, t: pot_exp(g, 0.5 * cfg.dt),
        lambda g, t: pot_exp(g, cfg.dt),
        norm_of=grid.spectral_norm,
        snapshot_of=lambda g, t: _embed_zone_flat(g, grid),
        time_dependent=False,
    )
    return Trajectory(
        times=times,
        states=snaps,
        kind="bands",
        grid=grid,
        norms=norms,
        meta={"model": "exact", "dt": cfg.dt, "eps": grid.eps, "n_bands": N},
    )


def _embed_zone_flat(g: np.ndarray, grid: MacroGrid) -> np.ndarray:
    out = np.zeros((g.shape[0], grid.fine_points), dtype=complex)
    out[:, grid.spectral_positions(grid.macro_ints)] = g
    return out


def _diagonal_band_run(
    state0: np.ndarray,
    grid: MacroGrid,
    cfg: PropagatorConfig,
    free_phase: np.ndarray,  # (N, n_k) symbol multiplied by dt in the factor
    pot_half,
    pot_full,
    time_dependent: bool,
    model: str,
) -> Trajectory:
    N = state0.shape[0]
    free_factor = np.exp(-1j * cfg.dt * free_phase)

    def free_full(g):
        return free_factor * g

    times, snaps, norms = _drive(
        state0,
        cfg,
        free_full,
        pot_half,
        pot_full,
        norm_of=grid.spectral_norm,
        snapshot_of=lambda g, t: g.copy(),
        time_dependent=time_dependent,
    )
    return Trajectory(
        times=times,
        states=snaps,
        kind="bands",
        grid=grid,
        norms=norms,
        meta={"model": model, "dt": cfg.dt, "eps": grid.eps, "n_bands": N},
    )


def _em_symbol(
    grid: MacroGrid, energies: np.ndarray, masses: EffectiveMassSet, with_energy: bool
) -> np.ndarray:
    k = grid.fine_k_points()
    quad = 0.5 * np.einsum("ki,nij,kj->nk", k, masses.inverse_masses, k)
    if with_energy:
        quad = quad + energies[:, None] / grid.eps**2
    return quad


def evolve_em(
    env0,
    bb: BandBasis,
    masses: EffectiveMassSet,
    bpp: Optional[BandProjectedPotential],
    cfg: PropagatorConfig,
    grid: Optional[MacroGrid] = None,
) -> Trajectory:
    """Effective-mass model: diagonal quadratic free symbol, homogenized V."""
    grid = env0.grid if isinstance(env0, EnvelopeField) else grid
    if grid is None:
        raise GridMismatch("array initial data needs an explicit grid")
    state0 = _coerce_band_state(env0, grid)
    N = state0.shape[0]
    symbol = _em_symbol(grid, bb.energies[:N], masses, with_energy=True)
    to_x, to_k = _band_fft_pair(grid, N)
    if bpp is not None:
        e_half, e_full = _matrix_exponentials(bpp.evaluate_fine(grid), cfg.dt)
        pot_half = lambda g, t: to_k(_apply_band_matrix(e_half, to_x(g)))
        pot_full = lambda g, t: to_k(_apply_band_matrix(e_full, to_x(g)))
    else:
        pot_half = lambda g, t: g
        pot_full = lambda g, t: g
    return _diagonal_band_run(state0, grid, cfg, symbol, pot_half, pot_full, False, "em")


def evolve_filtered(
    h0,
    bb: BandBasis,
    masses: EffectiveMassSet,
    bpp: Optional[BandProjectedPotential],
    cfg: PropagatorConfig,
    grid: Optional[MacroGrid] = None,
) -> Trajectory:
    """Effective-mass flow with the stiff band phases moved into the coupling.

    The potential factor exponentiates the phase-twisted matrix
    ``exp(i (E_n - E_n') t / eps^2) V_nn'(x)`` frozen at the step midpoint;
    the twist is applied by sandwiching the precomputed exponential between
    diagonal band phases, so each step stays an exact unitary.
    """
    grid = h0.grid if isinstance(h0, EnvelopeField) else grid
    if grid is None:
        raise GridMismatch("array initial data needs an explicit grid")
    cfg.warn_if_unresolved("evolve_filtered")
    state0 = _coerce_band_state(h0, grid)
    N = state0.shape[0]
    symbol = _em_symbol(grid, bb.energies[:N], masses, with_energy=False)
    to_x, to_k = _band_fft_pair(grid, N)
    if bpp is not None:
        e_half, _ = _matrix_exponentials(bpp.evaluate_fine(grid), cfg.dt)
        energies = bb.energies[:N]

        def pot_half(g, t_mid):
            d = np.exp(1j * energies * t_mid / grid.eps**2)
            f = to_x(g) * d.conj()[:, None]
            f = _apply_band_matrix(e_half, f)
            return to_k(f * d[:, None])

    else:
        pot_half = lambda g, t: g
    return _diagonal_band_run(state0, grid, cfg, symbol, pot_half, None, True, "filtered")


def evolve_limit(
    h0,
    masses: EffectiveMassSet,
    bpp: Optional[BandProjectedPotential],
    cfg: PropagatorConfig,
    grid: Optional[MacroGrid] = None,
) -> Trajectory:
    """Scale-free homogenized system: decoupled bands, diagonal potential."""
    grid = h0.grid if isinstance(h0, EnvelopeField) else grid
    if grid is None:
        raise GridMismatch("array initial data needs an explicit grid")
    state0 = _coerce_band_state(h0, grid)
    N = state0.shape[0]
    k = grid.fine_k_points()
    symbol = 0.5 * np.einsum("ki,nij,kj->nk", k, masses.inverse_masses, k)
    to_x, to_k = _band_fft_pair(grid, N)
    if bpp is not None:
        diag = bpp.diagonal_terms()
        v_diag = np.stack(
            [
                evaluate_macro_sum(
                    grid, {j: vec[n] for j, vec in diag.items()}
                ).reshape(-1)
                for n in range(N)
            ]
        )
        if np.max(np.abs(v_diag.imag)) > 1e-10 * max(1.0, np.max(np.abs(v_diag.real))):
            raise GridMismatch("diagonal potential entries must be real")
        v_diag = v_diag.real
        p_half = np.exp(-0.5j * cfg.dt * v_diag)
        p_full = p_half * p_half
        pot_half = lambda g, t: to_k(p_half * to_x(g))
        pot_full = lambda g, t: to_k(p_full * to_x(g))
    else:
        pot_half = lambda g, t: g
        pot_full = lambda g, t: g
    return _diagonal_band_run(state0, grid, cfg, symbol, pot_half, pot_full, False, "limit")


# --- comparisons and observables -------------------------------------------------


def model_gap(traj_a: Trajectory, traj_b: Trajectory, times=None) -> np.ndarray:
    """Spectral-norm distance between two band trajectories per sample time.

    Sample times must match exactly (nothing is interpolated).
    """
    if traj_a.kind != "bands" or traj_b.kind != "bands":
        raise GridMismatch("model_gap compares band trajectories")
    if traj_a.grid.fine_shape != traj_b.grid.fine_shape:
        raise GridMismatch("trajectories use different grids")
    ta, tb = traj_a.times, traj_b.times
    if times is None:
        if ta.shape != tb.shape or np.max(np.abs(ta - tb)) > 1e-9:
            raise GridMismatch("sample times do not match")
        idx_a = idx_b = np.arange(len(ta))
    else:
        idx_a = _match_times(ta, times)
        idx_b = _match_times(tb, times)
    gaps = [
        traj_a.grid.spectral_norm(traj_a.states[ia] - traj_b.states[ib])
        for ia, ib in zip(idx_a, idx_b)
    ]
    return np.asarray(gaps)


def _match_times(recorded: np.ndarray, wanted) -> np.ndarray:
    out = []
    for t in np.atleast_1d(wanted):
        hits = np.nonzero(np.abs(recorded - t) <= 1e-9)[0]
        if hits.size != 1:
            raise GridMismatch(f"time {t} not among recorded samples")
        out.append(hits[0])
    return np.asarray(out)


def density_observable(state: np.ndarray, theta: dict, grid: MacroGrid) -> float:
    """Integral of theta against the position density of a state.

    Accepts a fine-grid wave (x samples) or a flat band spectral array.
    """
    th = evaluate_macro_sum(grid, theta).reshape(-1)
    if state.shape == grid.fine_shape:
        dens = np.abs(state.reshape(-1)) ** 2
    elif state.ndim == 2 and state.shape[1] == grid.fine_points:
        f = grid.spectral_to_x(
            state.reshape((state.shape[0],) + grid.fine_shape)
        ).reshape(state.shape[0], -1)
        dens = np.sum(np.abs(f) ** 2, axis=0)
    else:
        raise GridMismatch(f"unrecognized state shape {state.shape}")
    return float(np.real(np.sum(th * dens) * grid.x_weight))


def save_trajectory(out_dir, name: str, traj: Trajectory) -> None:
    """Write per-snapshot envelope files plus a metadata JSON."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    if traj.kind != "bands":
        raise GridMismatch("only band trajectories are exported")
    files = []
    for i, state in enumerate(traj.states):
        env = envelope_from_extended(
            state.reshape((state.shape[0],) + traj.grid.fine_shape),
            traj.grid,
            time=float(traj.times[i]),
        )
        fname = f"{name}_{i:04d}.snap"
        write_snapshot(os.path.join(out_dir, fname), env)
        files.append(fname)
    meta = dict(traj.meta)
    meta.update(
        {
            "schema": 1,
            "times": traj.times.tolist(),
            "norms": traj.norms.tolist(),
            "snapshots": files,
        }
    )
    with open(os.path.join(out_dir, f"{name}_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
