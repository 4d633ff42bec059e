import csv
import json

import numpy as np
import pytest

from glarmasel.cli import run_command
from glarmasel.io import load_counts
from glarmasel.simulate import PRESET_SCENARIOS, gen_eta_star, replicate_seeds

FIT_FILES = ("gamma_trace.csv", "frequencies.csv", "eta_hat.csv", "support.csv", "summary.json")


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


@pytest.fixture(scope="module")
def panels(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run_command(["simulate", "--scenario", "T=15,J=6,I=2,qstar=1,gamma=0.5,nonnull=4",
                        "--reps", "2", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_simulate_writes_panels_and_truth(tmp_path):
    assert run_command(["simulate", "--scenario", "table1-row1", "--reps", "2",
                        "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["panel_rep000.csv", "panel_rep001.csv", "summary.json",
                     "truth_rep000.csv", "truth_rep001.csv"]
    table = load_counts(tmp_path / "panel_rep001.csv")
    assert (table.data.I, table.data.T) == (3, 50) and set(table.data.rep_counts) == {10}
    truth = np.array([float(r["eta_star"]) for r in _rows(tmp_path / "truth_rep001.csv")])
    expected = gen_eta_star(PRESET_SCENARIOS["table1-row1"], replicate_seeds(PRESET_SCENARIOS["table1-row1"], 1)[0])
    np.testing.assert_allclose(truth, expected.ravel(), rtol=1e-8)
    head = (tmp_path / "panel_rep000.csv").read_text().splitlines()[:12]
    assert "# scenario.sign_policy = all-positive" in head


def test_fit_outputs(panels, tmp_path):
    counts = panels / "panel_rep000.csv"
    assert run_command(["fit", str(counts), "--q", "1", "--threshold", "0.6", "--seed", "7",
                        "--subsamples", "50", "--out", str(tmp_path)]) == 0
    for name in FIT_FILES:
        assert (tmp_path / name).exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["run.seed"] == 7 and len(summary["gamma_hat"]) == 1
    trace = _rows(tmp_path / "gamma_trace.csv")
    assert len(trace) == summary["outer_iterations"]
    freq = _rows(tmp_path / "frequencies.csv")
    eta = _rows(tmp_path / "eta_hat.csv")
    assert len(freq) == len(eta) == 30
    for f, e in zip(freq, eta):
        assert (float(f["frequency"]) > 0.6) == (float(e["eta_hat"]) != 0.0)
    lines = (tmp_path / "eta_hat.csv").read_text().splitlines()
    assert lines[0].startswith("# input = panel_rep000.csv")
    assert any(ln == "# fit.q = 1" for ln in lines)
    support = _rows(tmp_path / "support.csv")
    assert {r["threshold"] for r in support} <= {f"{t / 10:.9g}" for t in range(1, 10)}


def test_fit_is_byte_identical(panels, tmp_path):
    counts = str(panels / "panel_rep001.csv")
    args = ["fit", counts, "--q", "1", "--threshold", "0.6", "--seed", "7", "--subsamples", "40"]
    assert run_command(args + ["--out", str(tmp_path / "a")]) == 0
    assert run_command(args + ["--out", str(tmp_path / "b"), "--workers", "3"]) == 0
    for name in FIT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_with_config_file(panels, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("fit.q = 0\nfit.n_subsamples = 30\nrun.seed = 2\n")
    assert run_command(["fit", str(panels / "panel_rep000.csv"), "--config", str(cfg),
                        "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["config"]["fit.q"] == 0 and summary["config"]["run.seed"] == 2
    assert summary["gamma_hat"] == []


def test_oracle_gamma_flag(panels, tmp_path):
    assert run_command(["fit", str(panels / "panel_rep000.csv"), "--oracle-gamma", "0.5",
                        "--subsamples", "30", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["gamma_hat"] == [0.5] and summary["config"]["fit.q"] == 1


def test_benchmark_row_count_and_plot_data(tmp_path):
    out = tmp_path / "bench"
    assert run_command(["benchmark", "--scenario", "T=50,J=100,I=3,qstar=1,gamma=0.5",
                        "--methods", "q0,q1,classical", "--reps", "20", "--subsamples", "20",
                        "--max-outer", "2", "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert len(rows) == 20 * 3 * 9
    assert "wall_time" not in rows[0]
    assert run_command(["export-plot-data", str(out / "metrics.csv"),
                        "--out", str(tmp_path / "plot")]) == 0
    tidy = _rows(tmp_path / "plot" / "plot_data.csv")
    assert len(tidy) == 3 * 9 * 4
    assert {r["metric"] for r in tidy} == {"tpr", "fpr", "max_diff", "sign_tpr"}
    samples = _rows(out / "gamma_samples.csv")
    assert {r["method"] for r in samples} == {"q1"}


def test_benchmark_timings_opt_in(tmp_path):
    assert run_command(["benchmark", "--scenario", "T=8,J=5,I=2,qstar=1,gamma=0.5,nonnull=2",
                        "--methods", "q1", "--reps", "1", "--subsamples", "10",
                        "--record-timings", "--out", str(tmp_path)]) == 0
    assert "wall_time" in _rows(tmp_path / "metrics.csv")[0]


def test_filter_command(panels, tmp_path):
    assert run_command(["filter", str(panels / "panel_rep000.csv"), "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "filter.csv")
    assert len(rows) == 15
    kept = [r["series"] for r in rows if r["kept"] == "1"]
    assert all(float(r["pvalue"]) < 1 / 15 for r in rows if r["kept"] == "1")
    if kept:
        assert load_counts(tmp_path / "kept_counts.csv").series == kept
    assert "# filter.method = lrt" in (tmp_path / "filter.csv").read_text()


@pytest.mark.parametrize("argv, needle", [
    (["fit", "missing.csv"], "No such file"),
    (["fit"], "required"),
    (["simulate", "--scenario", "T=5"], "missing"),
    (["benchmark", "--methods", "q1,bogus", "--reps", "1"], "unknown methods"),
    (["fit", "x.csv", "--threshold", "0.65"], "not one of the thresholds"),
    (["nonsense"], "invalid choice"),
])
def test_errors_are_single_line(argv, needle, tmp_path, capsys):
    code = run_command(argv + ["--out", str(tmp_path)] if argv[0] != "nonsense" else argv)
    err = capsys.readouterr().err
    assert code != 0
    assert err.count("\n") == 1 and needle in err


def test_unknown_config_key(panels, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("fit.lag = 2\n")
    code = run_command(["fit", str(panels / "panel_rep000.csv"), "--config", str(cfg)])
    err = capsys.readouterr().err
    assert code == 1 and "unknown key 'fit.lag'" in err and "fit.q" in err


def test_malformed_counts(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("series,condition,replicate,count\ns1,a,1,3\ns1,a,1,4\n")
    assert run_command(["filter", str(path), "--out", str(tmp_path)]) == 1
    assert "line 3: duplicate" in capsys.readouterr().err
