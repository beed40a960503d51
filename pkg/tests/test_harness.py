import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from envkp.cli import cli_main
from envkp.errors import ConfigInvalid, InsufficientPoints
from envkp.harness import ConvergenceReport, ExperimentConfig, fit_rate, run_sweep

CONFIG = """
[lattice]
period = 6.283185307179586

[periodic_potential]
mean = 1.5
cos 1 = 0.5
cutoff = 4
bands = 3

[external_potential]
term 1 0 = 0.15 0.0
term -1 0 = 0.15 0.0
term 2 1 = 0.05
term -2 -1 = 0.05
term 2 -1 = 0.05
term -2 1 = 0.05

[grid]
box_cells = 4
q = 12

[initial]
mu = 2
band 1 = 1:1.0 -1:0.4
band 2 = 0:0.5

[time]
t_final = 0.02
dt_factor = 0.1
snapshots = 4

[sweep]
eps = 1/2 1/4 1/8
models = exact kp em filtered limit schrodinger

[observable]
theta = 0:1.0 1:0.25 -1:0.25
"""


@pytest.fixture(scope="module")
def cfg():
    return ExperimentConfig.from_text(CONFIG)


def test_fit_rate_quadratic():
    eps = [0.5, 0.25, 0.125, 0.0625]
    slope, intercept, resid = fit_rate([(e, 3.0 * e**2) for e in eps])
    assert np.isclose(slope, 2.0, atol=1e-12)
    assert np.isclose(np.exp(intercept), 3.0, rtol=1e-12)
    assert resid < 1e-12


@settings(max_examples=20, deadline=None)
@given(
    p=st.floats(0.2, 3.0),
    c=st.floats(0.01, 50.0),
)
def test_fit_rate_recovers_power(p, c):
    eps = [2.0**-j for j in range(1, 6)]
    slope, _, resid = fit_rate([(e, c * e**p) for e in eps])
    assert np.isclose(slope, p, atol=1e-9)
    assert resid < 1e-9


def test_fit_rate_insufficient():
    with pytest.raises(InsufficientPoints):
        fit_rate([(0.5, 0.0), (0.25, 1e-16)])
    with pytest.raises(InsufficientPoints):
        fit_rate([(0.5, 1.0)])


def test_config_parse_roundtrip(cfg):
    assert cfg.n_bands == 3
    assert cfg.eps_list == [0.5, 0.25, 0.125]
    assert cfg.initial_terms[0][(1,)] == 1.0
    assert cfg.mu == 2.0
    assert len(cfg.sha256) == 64
    W = cfg.periodic_potential()
    assert np.isclose(W.coefficients[(1,)], 0.25)
    geom = cfg.geometry()
    V = cfg.external_potential(geom)
    assert V.terms[((2,), (1,))] == 0.05


def test_config_validation_errors():
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_text(CONFIG.replace("eps = 1/2 1/4 1/8", "eps = 1/4 1/2"))
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_text(CONFIG.replace("q = 12", "q = 8"))
    with pytest.raises(ConfigInvalid):
        # 3/8 of a cell edge cannot hold an integer number of scaled cells
        ExperimentConfig.from_text(
            CONFIG.replace("eps = 1/2 1/4 1/8", "eps = 1/2 3/8 1/4")
        )
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_text("not a config [")
    with pytest.raises(ConfigInvalid):
        ExperimentConfig.from_text(CONFIG.replace("models = exact", "models = magic"))


def test_propagator_config_respects_dt_rule(cfg):
    pcfg = cfg.propagator_config(0.125)
    assert pcfg.dt <= cfg.dt_factor * 0.125**2 * (1 + 1e-12)
    assert np.isclose(pcfg.n_steps * pcfg.dt, cfg.t_final)


@pytest.fixture(scope="module")
def sweep_result(cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    return run_sweep(cfg, out_dir=str(out)), out


def test_sweep_reports_structure(sweep_result):
    result, out = sweep_result
    reports = result["reports"]
    assert set(reports) == {"exact_vs_kp", "kp_vs_em", "filtered_vs_limit", "density"}
    for rep in reports.values():
        assert isinstance(rep, ConvergenceReport)
        assert rep.errors.shape[0] == 3
        assert rep.note in ("", "insufficient points", "identically zero")
        assert rep.slope is None  # only 3 scale points
    payload = json.loads((out / "sweep_report.json").read_text())
    assert payload["schema"] == 1
    assert payload["config_sha256"] == result["summary"]["config_sha256"]
    assert "slope_allowance" in payload["tolerances"]
    csv_text = (out / "sweep_errors.csv").read_text().splitlines()
    assert csv_text[0] == "quantity,eps,time,error"
    assert len(csv_text) > 10


def test_sweep_gaps_decay(sweep_result):
    # at this tiny horizon only the two-scale/homogenized potential gap is in
    # its asymptotic regime; the band-beating gaps need longer times
    result, _ = sweep_result
    errs = result["reports"]["exact_vs_kp"].max_errors
    assert errs[0] > 0
    assert errs[-1] < 1e-3 * errs[0]
    assert np.all(result["reports"]["kp_vs_em"].max_errors > 0)


def test_sweep_threaded_determinism(cfg):
    a = run_sweep(cfg, threads=1)
    b = run_sweep(cfg, threads=3)
    for name, rep in a["reports"].items():
        assert np.array_equal(rep.errors, b["reports"][name].errors)


def test_sweep_eps_override(cfg):
    result = run_sweep(cfg, eps_override=[0.5, 0.25])
    assert result["reports"]["kp_vs_em"].errors.shape[0] == 2


def test_sweep_zero_potential_gap_skipped_with_reason():
    # without an external potential the exact and band-coupled systems agree
    import re

    text = re.sub(r"\[external_potential\][^\[]*", "", CONFIG)
    text = text.replace(
        "models = exact kp em filtered limit schrodinger", "models = exact kp"
    )
    text += "\n[criteria]\nexact_vs_kp_min_slope = 1.7\n"
    cfg = ExperimentConfig.from_text(text)
    result = run_sweep(cfg)
    rep = result["reports"]["exact_vs_kp"]
    assert np.all(rep.max_errors < 1e-13)
    assert rep.slope is None
    assert "identically zero" in rep.note
    assert rep.passed is True  # zero gap satisfies any decay criterion


def write_cfg(tmp_path, text=CONFIG):
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    return str(path)


def test_cli_check(tmp_path, capsys):
    code = cli_main(["check", "--config", write_cfg(tmp_path), "--seed", "7"])
    out = json.loads(capsys.readouterr().out)
    assert code == 0
    assert out["passed"] is True
    assert out["checks"]["parseval_rel"]["passed"]


def test_cli_check_deterministic(tmp_path, capsys):
    path = write_cfg(tmp_path)
    cli_main(["check", "--config", path, "--seed", "3"])
    first = capsys.readouterr().out
    cli_main(["check", "--config", path, "--seed", "3"])
    second = capsys.readouterr().out
    assert first == second


def test_cli_bands(tmp_path, capsys):
    out_dir = tmp_path / "bands_out"
    code = cli_main(
        ["bands", "--config", write_cfg(tmp_path), "--out", str(out_dir)]
    )
    assert code == 0
    assert (out_dir / "bands.csv").exists()
    payload = json.loads((out_dir / "bands.json").read_text())
    assert payload["n_bands"] == 3
    capsys.readouterr()


def test_cli_decompose(tmp_path, capsys):
    out_dir = tmp_path / "dec_out"
    code = cli_main(
        ["decompose", "--config", write_cfg(tmp_path), "--out", str(out_dir)]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["parseval_gap"] < 1e-10 or report["roundtrip"] < 1e-10
    assert (out_dir / "decomposed.snap").exists()


def test_cli_evolve(tmp_path, capsys):
    out_dir = tmp_path / "evo_out"
    code = cli_main(
        [
            "evolve", "--config", write_cfg(tmp_path), "--out", str(out_dir),
            "--model", "em", "--eps", "1/4",
        ]
    )
    assert code == 0
    assert (out_dir / "em_meta.json").exists()
    capsys.readouterr()


def test_cli_sweep(tmp_path, capsys):
    out_dir = tmp_path / "sweep_out"
    code = cli_main(
        [
            "sweep", "--config", write_cfg(tmp_path), "--out", str(out_dir),
            "--eps", "1/2", "1/4", "--threads", "2",
        ]
    )
    assert code == 0
    assert (out_dir / "sweep_report.json").exists()
    summary = json.loads(capsys.readouterr().out)
    assert summary["passed"] is True


def test_config_external_potential_from_file(tmp_path):
    pot = tmp_path / "pot.txt"
    pot.write_text(
        "dim 1\nbox 4.0\nterm 1 0 0.15 0.0\nterm -1 0 0.15 0.0\n"
    )
    import re

    text = re.sub(
        r"\[external_potential\][^\[]*", "[external_potential]\nfile = pot.txt\n\n",
        CONFIG,
    )
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    cfg = ExperimentConfig.from_file(str(path))
    V = cfg.external_potential(cfg.geometry())
    assert V.terms[((1,), (0,))] == 0.15


def test_cli_sweep_failed_criterion(tmp_path, capsys):
    text = CONFIG + "\n[criteria]\nkp_vs_em_min_slope = 50\n"
    code = cli_main(
        [
            "sweep", "--config", write_cfg(tmp_path, text),
            "--out", str(tmp_path / "o"), "--eps", "1/2", "1/4",
        ]
    )
    assert code == 1
    capsys.readouterr()


def test_cli_config_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("[lattice]\nperiod = 1.0\n")
    code = cli_main(["check", "--config", str(path), "--seed", "1"])
    assert code == 2
    assert "config error" in capsys.readouterr().err
    assert cli_main(["check", "--config", str(tmp_path / "missing.cfg")]) == 2
