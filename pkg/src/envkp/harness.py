"""Experiment orchestration: configs, scale sweeps, rate fits, reports.

A sweep runs the selected propagators at each scale in a decreasing list,
measures the model gaps the convergence theory bounds, then fits log-log
slopes.  Slope criteria are asserted with an absolute 0.3 allowance below
the required rate (the proved rates are upper bounds, so faster decay also
passes) together with monotone decay.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .bloch import BandBasis, effective_masses, solve_cell, PeriodicPotentialSpec
from .dynamics import (
    PropagatorConfig,
    density_observable,
    evolve_em,
    evolve_filtered,
    evolve_kp,
    evolve_limit,
    evolve_schrodinger,
    model_gap,
)
from .envelope import (
    MacroGrid,
    envelope_from_macro_terms,
    reconstruct,
    sobolev_norm,
)
from .errors import ConfigInvalid, InsufficientPoints
from .lattice import build_lattice
from .potential import (
    ExternalPotentialSpec,
    band_project,
    load_potential_spec,
)

SLOPE_ALLOWANCE = 0.3
ZERO_FLOOR = 1e-13

TOLERANCES = {
    "slope_allowance": SLOPE_ALLOWANCE,
    "zero_floor": ZERO_FLOOR,
    "zone_convention": "half-open",
    "unitarity_drift_per_step": 1e-10,
    "parseval": 1e-10,
}


def fit_rate(points):
    """Least squares slope of log(error) against log(scale).

    Points with error below the zero floor are dropped as converged to zero.
    Raises :class:`InsufficientPoints` when fewer than two usable points
    remain (with an "identically zero" note when everything was dropped).
    """
    pts = [(float(e), float(v)) for e, v in points]
    usable = [(e, v) for e, v in pts if v >= ZERO_FLOOR]
    if len(usable) < 2:
        note = "identically zero" if not usable and pts else "too few points"
        raise InsufficientPoints(note)
    x = np.log([e for e, _ in usable])
    y = np.log([v for _, v in usable])
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), resid


@dataclass
class ConvergenceReport:
    """Per-quantity sweep table plus the fitted and required rates."""

    name: str
    eps: list
    times: list
    errors: np.ndarray       # (n_eps, n_times)
    max_errors: np.ndarray   # (n_eps,)
    slope: Optional[float] = None
    intercept: Optional[float] = None
    residual: Optional[float] = None
    theoretical_slope: Optional[float] = None
    monotone: bool = False
    passed: Optional[bool] = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "eps": [float(e) for e in self.eps],
            "times": [float(t) for t in self.times],
            "errors": self.errors.tolist(),
            "max_errors": self.max_errors.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "residual": self.residual,
            "theoretical_slope": self.theoretical_slope,
            "monotone": self.monotone,
            "passed": self.passed,
            "note": self.note,
        }


@dataclass
class ExperimentConfig:
    """Validated experiment description (see README for the file schema)."""

    text: str
    direct_matrix: np.ndarray
    w_mean: float
    w_harmonics: dict          # integer tuple -> cosine amplitude
    cutoff: int
    n_bands: int
    gap_tol: float
    potential_terms: Optional[dict]   # (j, lam) -> complex, or None
    potential_file: Optional[str]
    box_cells: float
    q: int
    initial_terms: dict        # band index (0-based) -> {j tuple: amp}
    mu: float
    t_final: float
    dt_factor: float
    snapshots: int
    eps_list: list             # decreasing floats
    models: list
    theta_terms: dict
    criteria: dict
    out_dir: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    # --- builders -------------------------------------------------------------
    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            text = fh.read()
        return cls.from_text(text, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_text(cls, text: str, base_dir: str = ".") -> "ExperimentConfig":
        parser = configparser.ConfigParser(delimiters=("=",), interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigInvalid(f"cannot parse config: {exc}") from exc
        try:
            return cls._build(text, parser, base_dir)
        except ConfigInvalid:
            raise
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def _build(cls, text, parser, base_dir) -> "ExperimentConfig":
        lat = parser["lattice"]
        if "matrix" in lat:
            rows = [
                [float(v) for v in row.split()]
                for row in lat["matrix"].split(";")
            ]
            direct = np.array(rows, dtype=float)
        else:
            direct = np.array([[float(lat["period"])]])
        dim = direct.shape[0]

        wp = parser["periodic_potential"]
        w_mean = float(wp.get("mean", "1.0"))
        harmonics = {}
        for key, val in wp.items():
            if key.startswith("cos"):
                ints = tuple(int(v) for v in key.split()[1:])
                if len(ints) != dim:
                    raise ConfigInvalid(f"harmonic key '{key}' has wrong dimension")
                harmonics[ints] = float(val)
        cutoff = int(wp["cutoff"])
        n_bands = int(wp["bands"])
        gap_tol = float(wp.get("gap_tol", "1e-6"))

        pot_terms = None
        pot_file = None
        if parser.has_section("external_potential"):
            ep = parser["external_potential"]
            if "file" in ep:
                pot_file = os.path.join(base_dir, ep["file"])
            terms = {}
            for key, val in ep.items():
                if key.startswith("term"):
                    ints = [int(v) for v in key.split()[1:]]
                    if len(ints) != 2 * dim:
                        raise ConfigInvalid(f"term key '{key}' needs {2 * dim} ints")
                    parts = val.split()
                    c = complex(float(parts[0]), float(parts[1]) if len(parts) > 1 else 0.0)
                    terms[(tuple(ints[:dim]), tuple(ints[dim:]))] = c
            if terms:
                pot_terms = terms

        grid = parser["grid"]
        box_cells = float(grid["box_cells"])
        q = int(grid["q"])

        init = parser["initial"]
        mu = float(init.get("mu", "0"))
        initial_terms = {}
        for key, val in init.items():
            if key.startswith("band"):
                n = int(key.split()[1]) - 1
                terms = {}
                for item in val.split():
                    jtxt, atxt = item.split(":")
                    j = tuple(int(v) for v in jtxt.split(","))
                    if len(j) != dim:
                        raise ConfigInvalid(f"initial frequency {jtxt} wrong dimension")
                    terms[j] = complex(atxt)
                initial_terms[n] = terms
        if not initial_terms:
            raise ConfigInvalid("no initial data given")
        if max(initial_terms) >= n_bands:
            raise ConfigInvalid("initial data references a band beyond the basis")

        tm = parser["time"]
        t_final = float(tm["t_final"])
        dt_factor = float(tm.get("dt_factor", "0.1"))
        snapshots = int(tm.get("snapshots", "8"))

        sw = parser["sweep"]
        eps_list = [float(Fraction(tok)) for tok in sw["eps"].split()]
        if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
            raise ConfigInvalid("eps list must be strictly decreasing")
        models = sw.get("models", "kp em").split()
        known = {"exact", "kp", "em", "filtered", "limit", "schrodinger"}
        unknown = set(models) - known
        if unknown:
            raise ConfigInvalid(f"unknown models: {sorted(unknown)}")

        theta_terms = {}
        if parser.has_section("observable"):
            for item in parser["observable"].get("theta", "").split():
                jtxt, atxt = item.split(":")
                j = tuple(int(v) for v in jtxt.split(","))
                theta_terms[j] = complex(atxt)

        criteria = {}
        if parser.has_section("criteria"):
            for key, val in parser["criteria"].items():
                criteria[key] = float(val)

        out_dir = "out"
        if parser.has_section("output"):
            out_dir = parser["output"].get("dir", "out")

        cfg = cls(
            text=text,
            direct_matrix=direct,
            w_mean=w_mean,
            w_harmonics=harmonics,
            cutoff=cutoff,
            n_bands=n_bands,
            gap_tol=gap_tol,
            potential_terms=pot_terms,
            potential_file=pot_file,
            box_cells=box_cells,
            q=q,
            initial_terms=initial_terms,
            mu=mu,
            t_final=t_final,
            dt_factor=dt_factor,
            snapshots=snapshots,
            eps_list=eps_list,
            models=models,
            theta_terms=theta_terms,
            criteria=criteria,
            out_dir=out_dir,
        )
        cfg.validate()
        return cfg

    # --- derived objects --------------------------------------------------------
    def validate(self) -> None:
        if self.q < 2 * self.cutoff + 2:
            raise ConfigInvalid(
                f"q = {self.q} < 2*cutoff + 2 = {2 * self.cutoff + 2}"
            )
        for eps in self.eps_list:
            m = self.box_cells / eps
            if abs(m - round(m)) > 1e-9 or int(round(m)) % 2:
                raise ConfigInvalid(
                    f"eps = {eps} incompatible with box_cells = {self.box_cells}: "
                    "cells per box must be an even integer"
                )

    def geometry(self):
        return build_lattice(self.direct_matrix)

    def periodic_potential(self) -> PeriodicPotentialSpec:
        geom = self.geometry()
        coeffs = {(0,) * geom.dim: complex(self.w_mean)}
        for ints, amp in self.w_harmonics.items():
            coeffs[ints] = coeffs.get(ints, 0.0) + amp / 2.0
            neg = tuple(-i for i in ints)
            coeffs[neg] = coeffs.get(neg, 0.0) + amp / 2.0
        return PeriodicPotentialSpec(geom=geom, coefficients=coeffs)

    def band_basis(self) -> BandBasis:
        return solve_cell(
            self.periodic_potential(), self.cutoff, self.n_bands, self.gap_tol
        )

    def external_potential(self, geom) -> Optional[ExternalPotentialSpec]:
        if self.potential_file is not None:
            return load_potential_spec(self.potential_file, geom)
        if self.potential_terms is not None:
            return ExternalPotentialSpec(
                geom=geom, box_scale=self.box_cells, terms=self.potential_terms
            )
        return None

    def grid_for(self, eps: float, geom) -> MacroGrid:
        return MacroGrid(
            geom=geom, eps=eps, cells=int(round(self.box_cells / eps)), q=self.q
        )

    def propagator_config(self, eps: float) -> PropagatorConfig:
        # rounded up to a snapshot multiple so every scale records the same
        # sample times (comparisons never interpolate)
        raw = max(1, int(np.ceil(self.t_final / (self.dt_factor * eps**2))))
        n_steps = self.snapshots * int(np.ceil(raw / self.snapshots))
        dt = self.t_final / n_steps
        return PropagatorConfig(
            dt=dt,
            t_final=self.t_final,
            eps=eps,
            record_every=n_steps // self.snapshots,
            dt_factor=self.dt_factor,
        )


def _run_single_eps(cfg: ExperimentConfig, eps: float, shared: dict) -> dict:
    geom = shared["geom"]
    bb = shared["bb"]
    V = shared["V"]
    bpp = shared["bpp"]
    masses = shared["masses"]
    grid = cfg.grid_for(eps, geom)
    pcfg = cfg.propagator_config(eps)
    env0 = envelope_from_macro_terms(grid, cfg.n_bands, cfg.initial_terms)

    trajs: dict = {}
    if "exact" in cfg.models:
        trajs["exact"] = evolve_kp(env0, bb, None, pcfg, exact_potential=V)
    if "kp" in cfg.models:
        trajs["kp"] = evolve_kp(env0, bb, bpp, pcfg)
    if "em" in cfg.models:
        trajs["em"] = evolve_em(env0, bb, masses, bpp, pcfg)
    if "filtered" in cfg.models:
        trajs["filtered"] = evolve_filtered(env0, bb, masses, bpp, pcfg)
    if "limit" in cfg.models:
        trajs["limit"] = evolve_limit(env0, masses, bpp, pcfg)
    if "schrodinger" in cfg.models:
        psi0 = reconstruct(env0, bb)
        trajs["schrodinger"] = evolve_schrodinger(
            psi0, shared["W"], V, grid, pcfg
        )

    out = {"eps": eps, "gaps": {}, "times": None, "sobolev_in": sobolev_norm(env0, cfg.mu)}
    pairs = [
        ("exact_vs_kp", "exact", "kp"),
        ("kp_vs_em", "kp", "em"),
        ("filtered_vs_limit", "filtered", "limit"),
    ]
    for name, a, b in pairs:
        if a in trajs and b in trajs:
            gaps = model_gap(trajs[a], trajs[b])
            out["gaps"][name] = gaps
            out["times"] = trajs[a].times
    if "schrodinger" in trajs and "limit" in trajs and cfg.theta_terms:
        tr_s, tr_l = trajs["schrodinger"], trajs["limit"]
        if tr_s.times.shape != tr_l.times.shape or np.max(
            np.abs(tr_s.times - tr_l.times)
        ) > 1e-9:
            raise ConfigInvalid("sample times differ between wave and limit runs")
        dens = [
            abs(
                density_observable(tr_s.states[i], cfg.theta_terms, grid)
                - density_observable(tr_l.states[i], cfg.theta_terms, grid)
            )
            for i in range(len(tr_s.times))
        ]
        out["gaps"]["density"] = np.asarray(dens)
        out["times"] = tr_s.times
    if out["times"] is None and trajs:
        out["times"] = next(iter(trajs.values())).times
    out["norm_drift"] = {
        name: float(np.max(np.abs(tr.norms - tr.norms[0]))) for name, tr in trajs.items()
    }
    return out


def run_sweep(
    cfg: ExperimentConfig,
    threads: int = 1,
    out_dir: Optional[str] = None,
    eps_override: Optional[list] = None,
) -> dict:
    """Run every configured model over the scale list and fit decay rates.

    Returns ``{"reports": {name: ConvergenceReport}, "summary": dict}`` and,
    when ``out_dir`` is given, writes the JSON/CSV report files there.
    """
    eps_list = list(eps_override) if eps_override else list(cfg.eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigInvalid("eps list must be strictly decreasing")
    geom = cfg.geometry()
    W = cfg.periodic_potential()
    bb = cfg.band_basis()
    V = cfg.external_potential(geom)
    needs_v = {"exact", "schrodinger"} & set(cfg.models)
    if V is None and needs_v and cfg.potential_terms is None:
        V = ExternalPotentialSpec(geom=geom, box_scale=cfg.box_cells, terms={})
    bpp = band_project(V, bb) if (V is not None and V.terms) else None
    masses = effective_masses(bb)
    shared = {"geom": geom, "W": W, "bb": bb, "V": V, "bpp": bpp, "masses": masses}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                eps: pool.submit(_run_single_eps, cfg, eps, shared)
                for eps in eps_list
            }
            runs = [futures[eps].result() for eps in eps_list]
    else:
        runs = [_run_single_eps(cfg, eps, shared) for eps in eps_list]

    sob = np.array([r["sobolev_in"] for r in runs])
    if sob.max() > 1.01 * sob.min():
        raise ConfigInvalid(
            "initial-data smoothness norm varies across the sweep; "
            "declared mu is inconsistent"
        )

    quantities = sorted({name for r in runs for name in r["gaps"]})
    reports = {}
    for name in quantities:
        errors = np.stack([np.asarray(r["gaps"][name]) for r in runs])
        max_err = errors.max(axis=1)
        report = ConvergenceReport(
            name=name,
            eps=eps_list,
            times=list(runs[0]["times"]),
            errors=errors,
            max_errors=max_err,
            monotone=bool(np.all(np.diff(max_err) <= 1e-12 + 1e-6 * max_err[:-1])),
        )
        usable = max_err >= ZERO_FLOOR
        if int(np.count_nonzero(usable)) >= 4:
            slope, intercept, resid = fit_rate(
                [(e, v) for e, v in zip(eps_list, max_err)]
            )
            report.slope, report.intercept, report.residual = slope, intercept, resid
        else:
            report.note = (
                "identically zero" if not usable.any() else "insufficient points"
            )
        _apply_criteria(cfg, report)
        reports[name] = report

    summary = {
        "schema": 1,
        "config_sha256": cfg.sha256,
        "tolerances": dict(TOLERANCES),
        "eps": [float(e) for e in eps_list],
        "models": cfg.models,
        "norm_drift": {r["eps"]: r["norm_drift"] for r in runs},
        "passed": all(r.passed is not False for r in reports.values()),
    }
    if out_dir:
        _write_reports(out_dir, cfg, reports, summary)
    return {"reports": reports, "summary": summary}


def _apply_criteria(cfg: ExperimentConfig, report: ConvergenceReport) -> None:
    min_slope = cfg.criteria.get(f"{report.name}_min_slope")
    max_ratio = cfg.criteria.get(f"{report.name}_max_ratio")
    if min_slope is None and max_ratio is None:
        return
    ok = True
    notes = []
    if min_slope is not None:
        report.theoretical_slope = min_slope + SLOPE_ALLOWANCE
        if report.slope is None:
            ok = report.note == "identically zero"
            notes.append(f"no fit ({report.note})")
        else:
            ok = ok and report.slope >= min_slope and report.monotone
            notes.append(f"slope {report.slope:.3f} vs >= {min_slope}")
    if max_ratio is not None:
        first, last = report.max_errors[0], report.max_errors[-1]
        ratio = last / first if first > 0 else 0.0
        ok = ok and report.monotone and ratio <= max_ratio
        notes.append(f"decay ratio {ratio:.3e} vs <= {max_ratio}")
    report.passed = bool(ok)
    report.note = "; ".join([report.note] + notes).strip("; ")


def _write_reports(out_dir, cfg, reports, summary) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        **summary,
        "quantities": {name: r.to_dict() for name, r in reports.items()},
    }
    with open(os.path.join(out_dir, "sweep_report.json"), "w") as fh:
        json.dump(payload, fh, indent=1)
    with open(os.path.join(out_dir, "sweep_errors.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quantity", "eps", "time", "error"])
        for name, r in reports.items():
            for i, eps in enumerate(r.eps):
                for j, t in enumerate(r.times):
                    writer.writerow([name, repr(float(eps)), repr(float(t)), repr(float(r.errors[i, j]))])
