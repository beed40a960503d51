import numpy as np
import pytest

from envkp.bloch import PeriodicPotentialSpec, effective_masses, solve_cell
from envkp.dynamics import (
    FreeFlowTables,
    PropagatorConfig,
    build_free_flow_tables,
    density_observable,
    evolve_em,
    evolve_filtered,
    evolve_kp,
    evolve_limit,
    evolve_schrodinger,
    model_gap,
    save_trajectory,
)
from envkp.envelope import (
    EnvelopeField,
    MacroGrid,
    decompose,
    envelope_from_extended,
    envelope_from_macro_terms,
    reconstruct,
)
from envkp.errors import GridMismatch
from envkp.lattice import build_lattice
from envkp.potential import ExternalPotentialSpec, band_project

TWO_PI = 2.0 * np.pi
BOX = 4.0
EPS = 0.25


@pytest.fixture(scope="module")
def geom():
    return build_lattice([[TWO_PI]])


@pytest.fixture(scope="module")
def mathieu(geom):
    return PeriodicPotentialSpec(
        geom=geom, coefficients={(0,): 1.5, (1,): 0.25, (-1,): 0.25}
    )


@pytest.fixture(scope="module")
def bb(mathieu):
    return solve_cell(mathieu, cutoff=4, n_bands=3)


@pytest.fixture(scope="module")
def masses(bb):
    return effective_masses(bb)


@pytest.fixture(scope="module")
def grid(geom):
    return MacroGrid(geom=geom, eps=EPS, cells=16, q=12)


@pytest.fixture(scope="module")
def vext(geom):
    terms = {
        ((1,), (0,)): 0.15, ((-1,), (0,)): 0.15,
        ((2,), (1,)): 0.05, ((-2,), (-1,)): 0.05,
        ((2,), (-1,)): 0.05, ((-2,), (1,)): 0.05,
    }
    return ExternalPotentialSpec(geom=geom, box_scale=BOX, terms=terms)


@pytest.fixture(scope="module")
def bpp(vext, bb):
    return band_project(vext, bb)


@pytest.fixture(scope="module")
def env0(grid, bb):
    return envelope_from_macro_terms(
        grid, bb.n_bands, {0: {(1,): 1.0, (-1,): 0.4}, 1: {(0,): 0.5}}
    )


def make_cfg(n_steps=16, dt=None, record_every=None, t0=0.0):
    dt = dt if dt is not None else 0.1 * EPS**2
    return PropagatorConfig(
        dt=dt,
        t_final=n_steps * abs(dt),
        eps=EPS,
        record_every=record_every or n_steps,
        t0=t0,
    )


def test_config_validation():
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.0, t_final=1.0, eps=0.25)
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.1, t_final=-1.0, eps=0.25)
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.1, t_final=1.0, eps=0.25, scheme="yoshida")
    cfg = PropagatorConfig(dt=0.25, t_final=1.0, eps=0.5)
    assert cfg.n_steps == 4
    with pytest.raises(ValueError):
        PropagatorConfig(dt=0.3, t_final=1.0, eps=0.5).n_steps


def test_oscillation_warning():
    cfg = PropagatorConfig(dt=0.1, t_final=0.4, eps=0.25)
    with pytest.warns(RuntimeWarning):
        cfg.warn_if_unresolved("test")


def test_free_flow_tables_unitary(bb, grid, masses):
    tables = build_free_flow_tables(bb, grid.fine_k_points(), EPS, masses)
    assert isinstance(tables, FreeFlowTables)
    assert tables.em_phases is not None
    # columns diagonalize the fiber matrix at scaled momenta
    from envkp.bloch import fiber_matrix

    i = 37
    xi = EPS * tables.kpoints[i]
    A = fiber_matrix(bb, xi)
    T = tables.diagonalizers[i]
    res = T.conj().T @ A @ T - np.diag(tables.lambdas[i])
    assert np.max(np.abs(res)) < 1e-9 * max(1.0, np.max(np.abs(A)))


def test_schrodinger_plane_wave_phase(geom, grid):
    w_flat = PeriodicPotentialSpec(geom=geom, coefficients={(0,): 1.0})
    x = grid.fine_x_points()[:, 0]
    k0 = 2.0 / BOX  # a box harmonic
    psi0 = np.exp(1j * k0 * x)
    cfg = make_cfg(n_steps=32)
    traj = evolve_schrodinger(psi0, w_flat, None, grid, cfg)
    t = traj.times[-1]
    expected = np.exp(-1j * t * (1.0 / EPS**2 + 0.5 * k0**2)) * psi0
    assert np.max(np.abs(traj.terminal() - expected)) < 1e-10


def test_schrodinger_norm_and_reversal(mathieu, vext, grid):
    rng = np.random.default_rng(0)
    psi0 = rng.standard_normal(grid.fine_shape) + 1j * rng.standard_normal(
        grid.fine_shape
    )
    cfg = make_cfg(n_steps=24)
    traj = evolve_schrodinger(psi0, mathieu, vext, grid, cfg)
    drift = np.max(np.abs(traj.norms - traj.norms[0]))
    assert drift < 1e-10 * traj.norms[0] * cfg.n_steps
    back_cfg = make_cfg(n_steps=24, dt=-cfg.dt, t0=traj.times[-1])
    back = evolve_schrodinger(traj.terminal(), mathieu, vext, grid, back_cfg)
    assert grid.x_norm(back.terminal() - psi0) < 1e-8 * grid.x_norm(psi0)


def test_schrodinger_self_convergence_second_order(mathieu, vext, grid):
    rng = np.random.default_rng(3)
    spec = np.zeros(grid.fine_points, dtype=complex)
    # band-limited initial data so the splitting error dominates
    spec[:8] = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    spec[-8:] = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    psi0 = grid.spectral_to_x(spec.reshape(grid.fine_shape))
    t_final = 0.05
    errs = []
    for n_steps in (8, 16, 32):
        cfg = PropagatorConfig(
            dt=t_final / n_steps, t_final=t_final, eps=EPS, record_every=n_steps
        )
        errs.append(evolve_schrodinger(psi0, mathieu, vext, grid, cfg).terminal())
    e1 = grid.x_norm(errs[0] - errs[1])
    e2 = grid.x_norm(errs[1] - errs[2])
    assert 2.5 < e1 / e2 < 6.0


def test_kp_free_populations_constant(bb, grid):
    tables = build_free_flow_tables(bb, grid.fine_k_points(), EPS)
    env = envelope_from_macro_terms(grid, bb.n_bands, {1: {(2,): 1.0}})
    cfg = make_cfg(n_steps=16, record_every=4)
    traj = evolve_kp(env, bb, None, cfg, tables=tables)
    pos = np.nonzero(np.abs(traj.states[0]).max(axis=0) > 1e-12)[0][0]
    T = tables.diagonalizers[pos]
    pops = [np.abs(T.conj().T @ st[:, pos]) for st in traj.states]
    for p in pops[1:]:
        assert np.max(np.abs(p - pops[0])) < 1e-10 * max(1.0, np.max(pops[0]))


def test_kp_norm_conserved_with_potential(bb, bpp, env0):
    cfg = make_cfg(n_steps=20)
    traj = evolve_kp(env0, bb, bpp, cfg)
    assert np.max(np.abs(traj.norms - traj.norms[0])) < 1e-10 * traj.norms[0] * 20


def test_kp_reversal_with_potential(bb, bpp, env0, grid):
    cfg = make_cfg(n_steps=16)
    traj = evolve_kp(env0, bb, bpp, cfg)
    back_cfg = make_cfg(n_steps=16, dt=-cfg.dt, t0=traj.times[-1])
    back = evolve_kp(traj.terminal(), bb, bpp, back_cfg, grid=grid)
    diff = grid.spectral_norm(back.terminal() - traj.states[0])
    assert diff < 1e-8 * grid.spectral_norm(traj.states[0])


def test_exact_envelope_zone_supported(bb, vext, env0, grid):
    cfg = make_cfg(n_steps=8, record_every=2)
    traj = evolve_kp(env0, bb, None, cfg, exact_potential=vext)
    drift = np.max(np.abs(traj.norms - traj.norms[0]))
    assert drift < 1e-10 * traj.norms[0] * cfg.n_steps
    for st in traj.states:
        ext = st.reshape((bb.n_bands,) + grid.fine_shape)
        zone = envelope_from_extended(ext, grid)
        rebuilt = np.zeros_like(st)
        pos = grid.spectral_positions(grid.macro_ints)
        rebuilt[:, pos] = zone.flat()
        assert np.max(np.abs(rebuilt - st)) == 0.0


def test_exact_envelope_reversal(bb, vext, env0, grid):
    cfg = make_cfg(n_steps=12)
    traj = evolve_kp(env0, bb, None, cfg, exact_potential=vext)
    back_cfg = make_cfg(n_steps=12, dt=-cfg.dt, t0=traj.times[-1])
    back = evolve_kp(traj.terminal(), bb, None, back_cfg,
                     exact_potential=vext, grid=grid)
    diff = grid.spectral_norm(back.terminal() - traj.states[0])
    assert diff < 1e-8 * grid.spectral_norm(traj.states[0])


def test_exact_equals_kp_without_potential(bb, env0, grid, geom):
    cfg = make_cfg(n_steps=10, record_every=5)
    v0 = ExternalPotentialSpec(geom=geom, box_scale=BOX, terms={})
    tr_exact = evolve_kp(env0, bb, None, cfg, exact_potential=v0)
    tr_kp = evolve_kp(env0, bb, None, cfg)
    gaps = model_gap(tr_exact, tr_kp)
    assert np.max(gaps) < 1e-12 * grid.spectral_norm(tr_kp.states[0])


def test_em_single_band_diagonal_phase(bb, masses, grid):
    env = envelope_from_macro_terms(grid, bb.n_bands, {0: {(2,): 1.0}})
    cfg = make_cfg(n_steps=16)
    traj = evolve_em(env, bb, masses, None, cfg)
    g0, gT = traj.states[0], traj.terminal()
    pos = np.nonzero(np.abs(g0[0]) > 1e-12)[0][0]
    k = grid.fine_k_points()[pos, 0]
    t = traj.times[-1]
    phase = np.exp(
        -1j * t * (bb.energies[0] / EPS**2 + 0.5 * k * masses.inverse_masses[0, 0, 0] * k)
    )
    assert abs(gT[0, pos] - phase * g0[0, pos]) < 1e-10 * abs(g0[0, pos])
    # off-band components never populated by the diagonal flow
    assert np.max(np.abs(gT[1:])) == 0.0


def test_em_flat_potential_matches_fine_free_flow(geom, grid):
    w_flat = PeriodicPotentialSpec(geom=geom, coefficients={(0,): 1.0})
    bbf = solve_cell(w_flat, cutoff=4, n_bands=1)
    mf = effective_masses(bbf)
    assert np.allclose(mf.inverse_masses[0], np.eye(1), atol=1e-12)
    env = envelope_from_macro_terms(grid, 1, {0: {(1,): 1.0, (3,): 0.5j}})
    cfg = make_cfg(n_steps=16)
    tr_em = evolve_em(env, bbf, mf, None, cfg)
    psi0 = reconstruct(env, bbf)
    tr_fine = evolve_schrodinger(psi0, w_flat, None, grid, cfg)
    env_t = decompose(tr_fine.terminal(), bbf, grid)
    zone_em = envelope_from_extended(
        tr_em.terminal().reshape((1,) + grid.fine_shape), grid
    )
    gap = grid.spectral_norm(env_t.flat() - zone_em.flat())
    assert gap < 1e-10 * env.norm()


def test_filtered_gauge_identity_diagonal_potential(geom, bb, masses, grid, env0):
    # macro-only potential: the gauge map between the two systems is exact
    v_diag = ExternalPotentialSpec(
        geom=geom, box_scale=BOX, terms={((1,), (0,)): 0.2, ((-1,), (0,)): 0.2}
    )
    bpp_d = band_project(v_diag, bb)
    cfg = make_cfg(n_steps=12, record_every=3)
    tr_em = evolve_em(env0, bb, masses, bpp_d, cfg)
    tr_f = evolve_filtered(env0, bb, masses, bpp_d, cfg)
    for i, t in enumerate(tr_em.times):
        gauge = np.exp(1j * bb.energies[:, None] * t / EPS**2)
        mapped = tr_em.states[i] * gauge
        assert grid.spectral_norm(mapped - tr_f.states[i]) < 1e-10 * tr_em.norms[0]


def test_filtered_gauge_identity_generic_potential(bb, masses, bpp, env0, grid):
    cfg = make_cfg(n_steps=24, record_every=6)
    tr_em = evolve_em(env0, bb, masses, bpp, cfg)
    tr_f = evolve_filtered(env0, bb, masses, bpp, cfg)
    worst = 0.0
    for i, t in enumerate(tr_em.times):
        gauge = np.exp(1j * bb.energies[:, None] * t / EPS**2)
        mapped = tr_em.states[i] * gauge
        worst = max(worst, grid.spectral_norm(mapped - tr_f.states[i]))
    allowance = 10.0 * cfg.dt**2 * cfg.t_final * max(1.0, tr_em.norms[0])
    assert worst <= allowance


def test_filtered_reversal(bb, masses, bpp, env0, grid):
    cfg = make_cfg(n_steps=12)
    traj = evolve_filtered(env0, bb, masses, bpp, cfg)
    back_cfg = make_cfg(n_steps=12, dt=-cfg.dt, t0=traj.times[-1])
    back = evolve_filtered(traj.terminal(), bb, masses, bpp, back_cfg, grid=grid)
    diff = grid.spectral_norm(back.terminal() - traj.states[0])
    assert diff < 1e-8 * grid.spectral_norm(traj.states[0])


def test_limit_free_flow_exact(masses, grid, bb):
    env = envelope_from_macro_terms(grid, bb.n_bands, {0: {(1,): 1.0}, 2: {(2,): 1.0}})
    cfg = make_cfg(n_steps=8)
    traj = evolve_limit(env, masses, None, cfg)
    k = grid.fine_k_points()[:, 0]
    t = traj.times[-1]
    expected = traj.states[0].copy()
    for n in range(bb.n_bands):
        expected[n] *= np.exp(-0.5j * t * masses.inverse_masses[n, 0, 0] * k**2)
    assert grid.spectral_norm(traj.terminal() - expected) < 1e-12 * traj.norms[0]


def test_limit_zero_data(masses, grid, bb, bpp):
    env = EnvelopeField(
        grid=grid, data=np.zeros((bb.n_bands,) + grid.macro_shape, dtype=complex)
    )
    cfg = make_cfg(n_steps=4)
    traj = evolve_limit(env, masses, bpp, cfg)
    assert all(np.max(np.abs(st)) == 0.0 for st in traj.states)


def test_limit_per_band_norms_conserved(masses, grid, bb, bpp):
    env = envelope_from_macro_terms(grid, bb.n_bands, {0: {(1,): 1.0}, 1: {(2,): 0.7}})
    cfg = make_cfg(n_steps=16)
    traj = evolve_limit(env, masses, bpp, cfg)
    for n in range(bb.n_bands):
        n0 = np.linalg.norm(traj.states[0][n])
        nT = np.linalg.norm(traj.terminal()[n])
        assert abs(nT - n0) <= 1e-10 * max(1.0, n0) * cfg.n_steps


def test_model_gap_basics(bb, bpp, masses, env0, grid):
    cfg = make_cfg(n_steps=8, record_every=2)
    tr1 = evolve_kp(env0, bb, bpp, cfg)
    tr2 = evolve_kp(env0, bb, bpp, cfg)
    assert np.max(model_gap(tr1, tr2)) == 0.0
    tr3 = evolve_em(env0, bb, masses, bpp, cfg)
    gaps = model_gap(tr1, tr3)
    assert gaps.shape == tr1.times.shape
    assert gaps[0] == 0.0
    cfg_other = make_cfg(n_steps=8, record_every=3)
    with pytest.raises(GridMismatch):
        model_gap(tr1, evolve_kp(env0, bb, bpp, cfg_other))
    sub = model_gap(tr1, tr3, times=[tr1.times[-1]])
    assert np.isclose(sub[0], gaps[-1])


def test_density_observable_routes(bb, env0, grid):
    psi = reconstruct(env0, bb)
    theta = {(0,): 1.0}
    total = density_observable(psi, theta, grid)
    assert np.isclose(total, grid.x_norm(psi) ** 2, rtol=1e-12)
    ext = np.zeros((bb.n_bands, grid.fine_points), dtype=complex)
    from envkp.envelope import extended_from_envelope

    ext = extended_from_envelope(env0).reshape(bb.n_bands, -1)
    env_total = density_observable(ext, theta, grid)
    assert np.isclose(env_total, env0.norm() ** 2, rtol=1e-12)


def test_pi_n_confinement_diagonal_flows(bb, masses, grid, geom):
    # free diagonal flows keep data exactly inside its initial band set
    env = envelope_from_macro_terms(grid, bb.n_bands, {0: {(1,): 1.0}})
    cfg = make_cfg(n_steps=12)
    for traj in (
        evolve_em(env, bb, masses, None, cfg),
        evolve_limit(env, masses, None, cfg),
    ):
        assert np.max(np.abs(traj.terminal()[1:])) == 0.0
    # a band-diagonal projected potential keeps leakage at rounding level
    v_diag = ExternalPotentialSpec(
        geom=geom, box_scale=BOX, terms={((1,), (0,)): 0.2, ((-1,), (0,)): 0.2}
    )
    bpp_d = band_project(v_diag, bb)
    traj = evolve_em(env, bb, masses, bpp_d, cfg)
    assert np.max(np.abs(traj.terminal()[1:])) < 1e-13 * np.max(np.abs(traj.terminal()))


def test_kp_leaks_outside_zone_under_homogenized_potential(bb, grid, geom):
    # a potential component beyond the zone edge pushes amplitude out of the
    # scaled zone; the extended state space keeps that content
    v_hi = ExternalPotentialSpec(
        geom=geom, box_scale=BOX, terms={((12,), (0,)): 0.3, ((-12,), (0,)): 0.3}
    )
    bpp_hi = band_project(v_hi, bb)
    env = envelope_from_macro_terms(grid, bb.n_bands, {0: {(0,): 1.0}})
    cfg = make_cfg(n_steps=8)
    traj = evolve_kp(env, bb, bpp_hi, cfg)
    ext = traj.terminal().reshape((bb.n_bands,) + grid.fine_shape)
    zone = envelope_from_extended(ext, grid)
    total = grid.spectral_norm(traj.terminal())
    inside = zone.norm()
    assert total - inside > 1e-6 * total


def test_trajectory_export(tmp_path, bb, bpp, env0):
    cfg = make_cfg(n_steps=4, record_every=2)
    traj = evolve_kp(env0, bb, bpp, cfg)
    save_trajectory(tmp_path, "kp", traj)
    import json

    meta = json.loads((tmp_path / "kp_meta.json").read_text())
    assert meta["schema"] == 1
    assert len(meta["snapshots"]) == len(traj.times)
    assert (tmp_path / meta["snapshots"][0]).exists()
