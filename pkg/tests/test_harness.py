import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tunnelqmc import cli, harness
from tunnelqmc.errors import ConfigError, InsufficientSamplingError
from tunnelqmc.harness import (DEFAULTS, KINDS, SCALING_CSV_HEADER, ExperimentConfig,
                               aggregate_stats, build_instance, loglog_slope, parse_config,
                               run_equilibrium_check, run_escape_scaling, run_perturbation_report,
                               run_profiles, run_spectrum, run_zb_ratio, serialize_config)


# --- configuration -------------------------------------------------------------

def test_parse_defaults_per_kind():
    for kind in KINDS:
        cfg = parse_config(f"[experiment]\nkind = {kind}\n")
        for key, val in DEFAULTS[kind].items():
            assert getattr(cfg, key) == val


def test_parse_aliases_and_ranges():
    cfg = parse_config("[experiment]\nkind = escape-scaling\nfamily = shamrock\nK = 1-3, 5\n"
                       "runs = 200\nbeta = 20\ncap = 1e6\n")
    assert cfg.sizes == (1, 2, 3, 5)
    assert cfg.runs == 200 and cfg.cap == 1_000_000 and cfg.beta == 20.0


@pytest.mark.parametrize("text,match", [
    ("[experiment]\nkind = spectrum\nbogus = 1\n", "line 3"),
    ("[experiment]\nkind = nope\n", "kind"),
    ("[experiment]\n", "kind"),
    ("[other]\nkind = spectrum\n", "section"),
    ("[experiment]\nkind = spectrum\nruns = x\n", "line 3"),
    ("[experiment]\nkind = spectrum\neps = 7\n", "eps"),
    ("[experiment]\nkind = escape-scaling\nfamily = ring\nN = 4\n", "family"),
    ("[experiment]\nkind = equilibrium-check\nN = 7\n", "N"),
    ("[experiment]\nkind = spectrum\nthreshold = 2\n", "threshold"),
    ("[experiment]\nkind = spectrum\nkind = spectrum\n", "malformed"),
])
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(["spectrum", "zb-ratio", "profiles"]),
       seed=st.integers(0, 2 ** 31), beta=st.floats(0.1, 500.0),
       sizes=st.lists(st.integers(3, 9), min_size=1, max_size=4))
def test_serialize_roundtrip(kind, seed, beta, sizes):
    cfg = ExperimentConfig(kind=kind, seed=seed, beta=beta, sizes=tuple(sizes))
    assert parse_config(serialize_config(cfg)) == cfg


def test_load_config(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nkind = profiles\nJ = 3\n")
    assert harness.load_config(path).J == 3.0


# --- statistics ----------------------------------------------------------------------

def test_aggregate_example():
    s = aggregate_stats([1, 3])
    assert (s.mean, s.stderr, s.count, s.timeouts) == (2.0, 1.0, 2, 0)


def test_aggregate_timeouts():
    s = aggregate_stats([4, None, 6, None])
    assert s.mean == 5.0 and s.count == 2 and s.timeouts == 2
    with pytest.raises(InsufficientSamplingError):
        aggregate_stats([None, None])
    assert math.isnan(aggregate_stats([7]).stderr)


def test_aggregate_exact_summation():
    vals = [1e16, 1.0, -1e16, 1.0] * 5
    assert aggregate_stats(vals).mean == pytest.approx(0.5, abs=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=50))
def test_aggregate_matches_numpy(vals):
    s = aggregate_stats(vals)
    arr = np.array(vals)
    assert s.mean == pytest.approx(arr.mean(), rel=1e-12, abs=1e-9)
    assert s.stderr == pytest.approx(arr.std(ddof=1) / math.sqrt(arr.size), rel=1e-9, abs=1e-6)


def test_loglog_slope():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    slope, err = loglog_slope(x, 3 * x ** 1.5)
    assert slope == pytest.approx(1.5, rel=1e-12) and math.isnan(err)
    slope, err = loglog_slope(x, 3 * x ** 1.5, 0.1 * 3 * x ** 1.5)
    assert slope == pytest.approx(1.5, rel=1e-12) and err > 0


# --- experiments ---------------------------------------------------------------------

def test_build_instance_families():
    assert build_instance(ExperimentConfig(kind="spectrum", family="shamrock", sizes=(2,)),
                          2).n_spins == 5
    with pytest.raises(ConfigError):
        build_instance(ExperimentConfig(kind="spectrum", family="random"), 3)


def test_spectrum_and_perturbation_reports():
    cfg = ExperimentConfig(kind="spectrum", family="ring", sizes=(4, 5), J=6.0, eps=0.5,
                           delta=0.02)
    rows, text = run_spectrum(cfg)
    assert text.splitlines()[0] == "N,K,Delta,beta,E_minus,E_plus,g,delta_e"
    assert [r["N"] for r in rows] == [4, 5]
    rows, text = run_perturbation_report(cfg)
    assert text.splitlines()[0] == "N,Delta,eps,J,L,n_paths,g_pert,g_exact,ratio,g_allorders"
    assert all(abs(r["ratio"] - 1) < 0.1 and r["n_paths"] == 2 for r in rows)


def test_equilibrium_check_small():
    cfg = ExperimentConfig(kind="equilibrium-check", family="random", sizes=(1, 2),
                           runs=2, betas=(2.0,), sweeps=20_000, seed=3)
    rows, text, failed = run_equilibrium_check(cfg)
    assert text.splitlines()[0] == "case,N,beta,observable,qmc,stderr,exact,z,pass"
    assert {r["case"] for r in rows} >= {"free-spin", "random-0", "classical"}
    assert failed <= 1


def test_equilibrium_negative_control():
    cfg = ExperimentConfig(kind="equilibrium-check", family="random", sizes=(1,), runs=1,
                           betas=(2.0,), sweeps=50_000, corrupt_acceptance=3.0)
    _, _, failed = run_equilibrium_check(cfg)
    assert failed > 0


def test_zb_ratio_small():
    cfg = ExperimentConfig(kind="zb-ratio", family="ring", sizes=(3,), J=6.0, eps=2.0,
                           beta=5.0, delta=0.0, target=0.1, sweeps=200_000, seed=1)
    rows, text = run_zb_ratio(cfg)
    assert text.splitlines()[0] == "N,beta,Delta,p_r0,p_r1,ratio,stderr,prediction,z"
    assert rows[0]["prediction"] == pytest.approx(0.1, rel=1e-8)
    assert math.isfinite(rows[0]["z"])


def test_zb_ratio_without_round_trips():
    # a run with no round trips has zero stderr; z must not raise
    cfg = ExperimentConfig(kind="zb-ratio", family="ring", sizes=(6,), J=6.0, eps=2.0,
                           beta=5.0, delta=0.05, sweeps=200, seed=1)
    rows, _ = run_zb_ratio(cfg)
    assert rows[0]["stderr"] == 0.0 and rows[0]["z"] == -math.inf


def test_escape_scaling_small():
    cfg = ExperimentConfig(kind="escape-scaling", family="shamrock", sizes=(1, 2), runs=4,
                           J=6.0, eps=0.2, delta=0.5, beta=20.0, seed=5)
    rows, text, raw = run_escape_scaling(cfg)
    assert text.splitlines()[0] == ",".join(SCALING_CSV_HEADER)
    assert len(raw) == 8 and rows[0].normalized_sweeps == 1.0
    assert rows[1].pred_2K_inv_g2_normalized == pytest.approx(
        2 * rows[1].pred_inv_g2_normalized, rel=1e-12)


def test_profiles_report():
    cfg = ExperimentConfig(kind="profiles", family="ring", sizes=(5,), J=6.0, eps=0.2,
                           delta=0.1, beta=20.0)
    rows, text = run_profiles(cfg)
    assert text.splitlines()[0] == "N,J,profile,label,step,length,free_energy,obstruction"
    assert {r["profile"] for r in rows} == {"intra", "inter"}


# --- command line ----------------------------------------------------------------------

def test_cli_parser_flags():
    parser = cli.build_parser()
    for name in ("spectrum", "perturb", "equilibrium", "zb-ratio", "escape", "profiles"):
        args = parser.parse_args([name, "--config", "c.ini", "--seed", "3", "--out", "o.csv",
                                  "--runs", "5", "--threads", "2"])
        assert (args.seed, args.runs, args.threads) == (3, 5, 2)


def test_cli_spectrum(tmp_path, capsys):
    cfg = tmp_path / "s.ini"
    cfg.write_text("[experiment]\nkind = spectrum\nN = 4\n")
    out = tmp_path / "s.csv"
    assert cli.main(["spectrum", "--config", str(cfg), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("N,K,Delta") and len(lines) == 2


def test_cli_escape_runs_out(tmp_path):
    cfg = tmp_path / "e.ini"
    cfg.write_text("[experiment]\nkind = escape-scaling\nK = 1\nruns = 3\n")
    runs = tmp_path / "runs.csv"
    assert cli.main(["escape", "--config", str(cfg), "--runs-out", str(runs), "--seed", "4",
                     "--out", str(tmp_path / "x.csv")]) == 0
    assert runs.read_text().splitlines()[0] == "N,K,chain,sweeps_to_passage,timeout_flag"
    assert len(runs.read_text().splitlines()) == 4


def test_cli_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[experiment]\nkind = profiles\n")
    assert cli.main(["spectrum", "--config", str(cfg)]) == 2
    cfg.write_text("[experiment]\nkind = spectrum\nwat = 1\n")
    assert cli.main(["spectrum", "--config", str(cfg)]) == 2
    assert "line 3" in capsys.readouterr().err
