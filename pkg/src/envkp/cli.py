"""Command line interface: bands, decompose, evolve, sweep, check."""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction

import numpy as np

from . import bloch, dynamics, envelope, potential
from .errors import BoundViolated, ConfigInvalid, EnvkpError
from .harness import ExperimentConfig, TOLERANCES, run_sweep


def _load_config(path) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigInvalid(f"config file not found: {path}")
    return ExperimentConfig.from_file(path)


def _cmd_bands(cfg: ExperimentConfig, args) -> int:
    bb = cfg.band_basis()
    os.makedirs(args.out, exist_ok=True)
    geom = bb.geom
    # one zone diameter of momenta through the origin per axis
    ticks = np.linspace(-0.5, 0.5, 65, endpoint=False)
    xis = [geom.reciprocal_matrix @ (t * np.eye(geom.dim)[ax]) for ax in range(geom.dim) for t in ticks]
    bloch.export_band_csv(os.path.join(args.out, "bands.csv"), bb, xis)
    bloch.export_band_json(os.path.join(args.out, "bands.json"), bb)
    print(json.dumps({"energies": bb.energies.tolist()}, indent=1))
    return 0


def _cmd_decompose(cfg: ExperimentConfig, args) -> int:
    geom = cfg.geometry()
    bb = cfg.band_basis()
    eps = args.eps[0] if args.eps else cfg.eps_list[0]
    grid = cfg.grid_for(eps, geom)
    env0 = envelope.envelope_from_macro_terms(grid, cfg.n_bands, cfg.initial_terms)
    psi = envelope.reconstruct(env0, bb)
    env1 = envelope.decompose(psi, bb, grid)
    gap = abs(grid.x_norm(psi) ** 2 - env1.norm() ** 2)
    roundtrip = grid.spectral_norm(env1.flat() - env0.flat())
    os.makedirs(args.out, exist_ok=True)
    envelope.write_snapshot(os.path.join(args.out, "decomposed.snap"), env1)
    envelope.export_density_csv(os.path.join(args.out, "decomposed.csv"), env1)
    result = {"eps": eps, "parseval_gap": gap, "roundtrip": roundtrip}
    print(json.dumps(result, indent=1))
    return 0 if gap <= 1e-10 * max(1.0, env1.norm() ** 2) else 1


def _cmd_evolve(cfg: ExperimentConfig, args) -> int:
    geom = cfg.geometry()
    bb = cfg.band_basis()
    eps = args.eps[0] if args.eps else cfg.eps_list[0]
    grid = cfg.grid_for(eps, geom)
    pcfg = cfg.propagator_config(eps)
    env0 = envelope.envelope_from_macro_terms(grid, cfg.n_bands, cfg.initial_terms)
    V = cfg.external_potential(geom)
    bpp = potential.band_project(V, bb) if (V is not None and V.terms) else None
    masses = bloch.effective_masses(bb)
    model = args.model
    if model == "kp":
        traj = dynamics.evolve_kp(env0, bb, bpp, pcfg)
    elif model == "exact":
        if V is None:
            V = potential.ExternalPotentialSpec(geom=geom, box_scale=cfg.box_cells, terms={})
        traj = dynamics.evolve_kp(env0, bb, None, pcfg, exact_potential=V)
    elif model == "em":
        traj = dynamics.evolve_em(env0, bb, masses, bpp, pcfg)
    elif model == "filtered":
        traj = dynamics.evolve_filtered(env0, bb, masses, bpp, pcfg)
    elif model == "limit":
        traj = dynamics.evolve_limit(env0, masses, bpp, pcfg)
    else:
        raise ConfigInvalid(f"unknown model {model!r}")
    dynamics.save_trajectory(args.out, model, traj)
    drift = float(np.max(np.abs(traj.norms - traj.norms[0])))
    print(json.dumps({"model": model, "eps": eps, "norm_drift": drift}, indent=1))
    return 0 if drift <= 1e-8 * max(1.0, traj.norms[0]) else 1


def _cmd_sweep(cfg: ExperimentConfig, args) -> int:
    eps_override = args.eps if args.eps else None
    result = run_sweep(
        cfg, threads=args.threads, out_dir=args.out or cfg.out_dir,
        eps_override=eps_override,
    )
    brief = {
        name: {"slope": r.slope, "monotone": r.monotone, "passed": r.passed}
        for name, r in result["reports"].items()
    }
    print(json.dumps({"passed": result["summary"]["passed"], "quantities": brief}, indent=1))
    return 0 if result["summary"]["passed"] else 1


def run_check_battery(cfg: ExperimentConfig, seed: int) -> dict:
    """Invariant battery: transforms, operator bounds, growth bounds, unitarity."""
    rng = np.random.default_rng(seed)
    geom = cfg.geometry()
    W = cfg.periodic_potential()
    bb = cfg.band_basis()
    eps = cfg.eps_list[0]
    grid = cfg.grid_for(eps, geom)
    report: dict = {"seed": seed, "eps": eps, "checks": {}, "tolerances": dict(TOLERANCES)}
    ok = True

    def record(name, margin, passed):
        nonlocal ok
        report["checks"][name] = {"margin": float(margin), "passed": bool(passed)}
        ok = ok and passed

    # Parseval + round trip on random band-limited data
    worst_p, worst_rt = 0.0, 0.0
    for _ in range(8):
        data = rng.standard_normal((cfg.n_bands,) + grid.macro_shape) + 1j * rng.standard_normal(
            (cfg.n_bands,) + grid.macro_shape
        )
        env = envelope.EnvelopeField(grid=grid, data=data)
        psi = envelope.reconstruct(env, bb)
        worst_p = max(worst_p, abs(grid.x_norm(psi) - env.norm()) / env.norm())
        back = envelope.decompose(psi, bb, grid)
        worst_rt = max(worst_rt, grid.spectral_norm(back.flat() - env.flat()) / env.norm())
    record("parseval_rel", worst_p, worst_p <= 1e-10)
    record("roundtrip_rel", worst_rt, worst_rt <= 1e-10)

    V = cfg.external_potential(geom)
    if V is not None and V.terms:
        bpp = potential.band_project(V, bb)
        vmax = V.linf_norm()
        worst = -np.inf
        for _ in range(20):
            data = rng.standard_normal((cfg.n_bands,) + grid.macro_shape) + 1j * rng.standard_normal(
                (cfg.n_bands,) + grid.macro_shape
            )
            env = envelope.EnvelopeField(grid=grid, data=data)
            u0 = potential.apply_U0(env, bpp)
            ue, _res = potential.apply_Ueps(env, V, bb)
            worst = max(
                worst,
                u0.norm() / env.norm() - vmax,
                ue.norm() / env.norm() - vmax,
            )
        record("uniform_bound_excess", worst, worst <= 1e-10)
        # operators must agree when potential and data sit deep inside the zone
        low = {(j, lam): c for (j, lam), c in V.terms.items()
               if np.max(np.abs(np.asarray(j))) <= 1}
        if low:
            Vlow = potential.ExternalPotentialSpec(
                geom=geom, box_scale=V.box_scale, terms=low
            )
            env = envelope.envelope_from_macro_terms(
                grid, cfg.n_bands, cfg.initial_terms
            )
            eq = (
                potential.apply_U0(env, potential.band_project(Vlow, bb)).flat()
                - potential.apply_Ueps(env, Vlow, bb)[0].flat()
            )
            gap = grid.spectral_norm(eq) / env.norm()
            record("confined_support_equality", gap, gap <= 1e-10)
        try:
            data = rng.standard_normal((cfg.n_bands,) + grid.macro_shape)
            env = envelope.EnvelopeField(grid=grid, data=data.astype(complex))
            measured, bound = potential.two_scale_gap(V, bb, env, mu=cfg.mu)
            record("two_scale_gap_bound", bound - measured, True)
        except BoundViolated as exc:
            record("two_scale_gap_bound", -1.0, False)
            report["checks"]["two_scale_gap_bound"]["detail"] = str(exc.args)

    # growth bounds on the full basis
    full = bloch.solve_cell(W, min(cfg.cutoff, 10), 2 * min(cfg.cutoff, 10) + 1,
                            allow_degenerate=True)
    worst = np.inf
    for s in (0.1, 0.5, 1.0):
        xi = s * np.eye(geom.dim)[0]
        rep = bloch.eigenvalue_growth_margins(full, xi)
        worst = min(worst, rep.margin_two_sided, rep.margin_upper)
    record("eigenvalue_growth_margin", worst, worst >= -1e-9)

    # unitarity of a short run of each propagator
    env0 = envelope.envelope_from_macro_terms(grid, cfg.n_bands, cfg.initial_terms)
    n_steps = 16
    pcfg = dynamics.PropagatorConfig(
        dt=cfg.dt_factor * eps**2,
        t_final=n_steps * cfg.dt_factor * eps**2,
        eps=eps,
        record_every=n_steps,
        dt_factor=cfg.dt_factor,
    )
    bpp = potential.band_project(V, bb) if (V is not None and V.terms) else None
    masses = bloch.effective_masses(bb)
    worst = 0.0
    runs = {
        "kp": lambda: dynamics.evolve_kp(env0, bb, bpp, pcfg),
        "em": lambda: dynamics.evolve_em(env0, bb, masses, bpp, pcfg),
        "filtered": lambda: dynamics.evolve_filtered(env0, bb, masses, bpp, pcfg),
        "limit": lambda: dynamics.evolve_limit(env0, masses, bpp, pcfg),
        "schrodinger": lambda: dynamics.evolve_schrodinger(
            envelope.reconstruct(env0, bb), W, V, grid, pcfg
        ),
    }
    for name, run in runs.items():
        traj = run()
        drift = float(np.max(np.abs(traj.norms - traj.norms[0]))) / traj.norms[0]
        worst = max(worst, drift / n_steps)
    record("norm_drift_per_step", worst, worst <= 1e-10)

    report["passed"] = bool(ok)
    return report


def _cmd_check(cfg: ExperimentConfig, args) -> int:
    report = run_check_battery(cfg, args.seed)
    print(json.dumps(report, indent=1))
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envkp",
        description="Envelope-function spectral experiments for periodic media",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("bands", "export band structure and effective masses"),
        ("decompose", "transform synthesized data and report the norm identity gap"),
        ("evolve", "run one propagator and export its trajectory"),
        ("sweep", "run the configured scale sweep and fit decay rates"),
        ("check", "run the invariant battery"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--eps",
            nargs="*",
            type=lambda s: float(Fraction(s)),
            help="override the scale list (fractions accepted)",
        )
        p.add_argument("--seed", type=int, default=0, help="seed for randomized checks")
        p.add_argument("--threads", type=int, default=1, help="parallel scale runs")
        if name == "evolve":
            p.add_argument("--model", default="kp",
                           choices=["exact", "kp", "em", "filtered", "limit"])
    return parser


def cli_main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        handler = {
            "bands": _cmd_bands,
            "decompose": _cmd_decompose,
            "evolve": _cmd_evolve,
            "sweep": _cmd_sweep,
            "check": _cmd_check,
        }[args.command]
        return handler(cfg, args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except EnvkpError as exc:
        print(f"check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
