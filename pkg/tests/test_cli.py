import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from basil.cli import main, read_expression
from basil.covariance import LowRankCovariance
from basil.errors import ParseError
from basil.posterior import covariance_posterior_mean, load_fit
from basil.simbench import oos_loglik

FIXTURES = Path(__file__).parent / "fixtures"
HIGH_SIGNAL_Y = FIXTURES / "high_signal_expression.csv.gz"
HIGH_SIGNAL_C = FIXTURES / "high_signal_genesets.csv.gz"

SMALL_DESIGN = ["--n", "80", "--p", "120", "--k", "3", "--q", "10", "--density", "0.15",
                "--min-genes", "5", "--sigma-sq", "2"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run("--output-dir", out, "--seed", 3, "simulate", "--preset", "low-signal", *SMALL_DESIGN,
               "--n-test", 20) == 0
    return out


@pytest.fixture(scope="module")
def fitted(simulated, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = run("--output-dir", out, "fit", simulated / "expression.csv", simulated / "genesets.csv",
               "--k-max", 8, "--min-genes", 5)
    assert code == 0
    return out


def test_read_expression_layouts(tmp_path):
    (tmp_path / "a.csv").write_text("g1,g2\n1,2\n3,4.5\n")
    Y = read_expression(tmp_path / "a.csv")
    assert Y.gene_ids == ("g1", "g2") and Y.sample_ids is None
    (tmp_path / "b.csv").write_text("sample,g1,g2\ns1,1,2\ns2,3,4\n")
    Y = read_expression(tmp_path / "b.csv")
    assert Y.sample_ids == ("s1", "s2") and Y.values[1, 1] == 4.0
    (tmp_path / "c.csv").write_text(",g1,g2\n0,1,2\n1,3,4\n")
    assert read_expression(tmp_path / "c.csv").gene_ids == ("g1", "g2")


def test_read_expression_bad_cell(tmp_path):
    (tmp_path / "bad.csv").write_text("sample,g1,g2\ns1,1,2\ns2,3,oops\n")
    with pytest.raises(ParseError, match="line 3, column 3"):
        read_expression(tmp_path / "bad.csv")


def test_select_k_on_shipped_fixture(tmp_path, capsys):
    assert run("--output-dir", tmp_path, "select-k", HIGH_SIGNAL_Y, "--k-max", 30) == 0
    assert json.loads((tmp_path / "select_k.json").read_text()) == {"k_selected": 10}
    profile = pd.read_csv(tmp_path / "jic_profile.csv")
    assert list(profile.columns) == ["k", "jic", "loglik_hat", "penalty"]
    assert capsys.readouterr().out.strip() == "10"


def test_select_k_single(tmp_path, simulated):
    assert run("--output-dir", tmp_path, "select-k", simulated / "expression.csv", "--k-max", 1) == 0
    assert len(pd.read_csv(tmp_path / "jic_profile.csv")) == 1
    assert json.loads((tmp_path / "select_k.json").read_text())["k_selected"] == 1


def test_malformed_csv_exit_code(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("g1,g2,g3\n1,2,3\n4,x5,6\n")
    assert run("--output-dir", tmp_path, "select-k", tmp_path / "bad.csv") == 2
    err = capsys.readouterr().err
    assert "bad.csv" in err and "line 3" in err and "column 2" in err
    (tmp_path / "ragged.csv").write_text("g1,g2\n1,2\n3,4,5\n")
    assert run("--output-dir", tmp_path, "select-k", tmp_path / "ragged.csv") == 2
    assert "line 3" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, capsys):
    rng = np.random.default_rng(0)
    Y = np.outer(rng.standard_normal(10), rng.standard_normal(6))
    pd.DataFrame(Y, columns=[f"g{j}" for j in range(6)]).to_csv(tmp_path / "rank1.csv", index=False)
    assert run("--output-dir", tmp_path, "select-k", tmp_path / "rank1.csv", "--k-max", 3) == 3
    assert "numerical" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run("--output-dir", tmp_path) == 2
    assert run("--output-dir", tmp_path, "simulate", "--preset", "bogus") == 2
    assert "high-signal, low-signal" in capsys.readouterr().err
    assert run("--output-dir", tmp_path, "nonsense") == 2


def test_simulate_preset_expansion(simulated):
    design = json.loads((simulated / "design.json").read_text())
    assert (design["tau_gamma_sq"], design["tau_psi_sq"]) == (0.4, 0.7)
    assert design["sigma_sq"] == 2.0 and design["n"] == 80 and design["seed"] == 3
    Y = read_expression(simulated / "expression.csv")
    assert Y.shape == (80, 120)
    assert read_expression(simulated / "test.csv").shape == (20, 120)


def test_simulate_high_signal_defaults(tmp_path):
    assert run("--output-dir", tmp_path, "simulate", "--preset", "high-signal", "--p", 200, "--q", 20,
               "--n", 50) == 0
    design = json.loads((tmp_path / "design.json").read_text())
    assert (design["tau_gamma_sq"], design["tau_psi_sq"], design["sigma_sq"], design["k"]) == (0.7, 0.1, 15.0, 10)


def test_fit_artifacts(fitted):
    for name in ("lambda_bar.csv", "gamma_bar.csv", "psi_bar.csv", "fit.json", "timings.json",
                 "resolved-config.json", "fit.npz"):
        assert (fitted / name).exists(), name
    summary = json.loads((fitted / "fit.json").read_text())
    for key in ("k", "tau_gamma_sq", "tau_psi_sq", "sigma_hat_sq", "rho", "v_n", "sigma_n_sq"):
        assert key in summary
    assert summary["max_abs_Ct_psi"] < 1e-6
    lam = pd.read_csv(fitted / "lambda_bar.csv", index_col=0, float_precision="round_trip")
    result = load_fit(fitted / "fit.npz")
    # 17 significant digits round-trip exactly
    np.testing.assert_array_equal(lam.to_numpy(), result.lambda_bar)


def test_fit_rerun_from_resolved_config(fitted, tmp_path):
    assert run("--config", fitted / "resolved-config.json", "--output-dir", tmp_path) == 0
    for name in ("lambda_bar.csv", "gamma_bar.csv", "psi_bar.csv", "fit.json", "resolved-config.json",
                 "fit.npz"):
        assert (tmp_path / name).read_bytes() == (fitted / name).read_bytes(), name


def test_fit_conflicting_k_options(simulated, tmp_path):
    assert run("--output-dir", tmp_path, "fit", simulated / "expression.csv", simulated / "genesets.csv",
               "--k", 2, "--k-max", 5) == 2


def test_sample_outputs(fitted, tmp_path):
    out = tmp_path / "s"
    assert run("--output-dir", out, "--seed", 5, "sample", fitted, "--n-draws", 150, "--n-genes", 12,
               "--densify") == 0
    meta = json.loads((out / "draws.json").read_text())
    assert meta["n_draws"] == 150 and meta["seed"] == 5
    assert np.load(out / "sigma_sq.npy").shape == (150,)
    corr = pd.read_csv(out / "correlation.csv")
    assert list(corr.columns) == ["gene_a", "gene_b", "mean", "lo", "hi", "masked"]
    assert len(corr) == 12 * 11 // 2
    straddle = (corr["lo"] <= 0) & (corr["hi"] >= 0)
    assert np.all(corr.loc[straddle, "masked"] == 0)
    np.testing.assert_array_equal(corr.loc[~straddle, "masked"], corr.loc[~straddle, "mean"])
    dense = pd.read_csv(out / "lambda_draws.csv")
    assert len(dense) == 150 * 12 and "sigma_sq" in dense.columns


def test_sample_zero_draws(fitted, tmp_path):
    assert run("--output-dir", tmp_path, "sample", fitted, "--n-draws", 0) == 2


def test_sample_thread_counts_agree(fitted, tmp_path, monkeypatch):
    assert run("--output-dir", tmp_path / "t1", "--threads", 1, "sample", fitted, "--n-draws", 120) == 0
    monkeypatch.setenv("BASIL_THREADS", "3")
    assert run("--output-dir", tmp_path / "t3", "sample", fitted, "--n-draws", 120) == 0
    cfg = json.loads((tmp_path / "t3" / "resolved-config.json").read_text())
    assert cfg["threads"] == 3
    a = pd.read_csv(tmp_path / "t1" / "correlation.csv")
    b = pd.read_csv(tmp_path / "t3" / "correlation.csv")
    np.testing.assert_allclose(a[["mean", "lo", "hi"]], b[["mean", "lo", "hi"]], atol=1e-12, rtol=0)


def test_loglik_matches_library(fitted, simulated, tmp_path, capsys):
    assert run("--output-dir", tmp_path, "loglik", fitted, simulated / "test.csv") == 0
    value = json.loads((tmp_path / "loglik.json").read_text())["oos_loglik"]
    result = load_fit(fitted / "fit.npz")
    test = read_expression(simulated / "test.csv").select_genes(result.gene_ids)
    assert value == oos_loglik(covariance_posterior_mean(result), test)


def test_loglik_gene_mismatch(fitted, tmp_path, capsys):
    pd.DataFrame(np.ones((2, 3)), columns=["a", "b", "c"]).to_csv(tmp_path / "t.csv", index=False)
    assert run("--output-dir", tmp_path, "loglik", fitted, tmp_path / "t.csv") == 2
    assert "3 genes" in capsys.readouterr().err


def test_loglik_identity_example():
    cov = LowRankCovariance(np.zeros((3, 0)), 1.0)
    assert oos_loglik(cov, np.zeros((1, 3))) == pytest.approx(-1.5 * np.log(2 * np.pi))


def test_study_deterministic(tmp_path):
    args = ["study", "--preset", "high-signal", *SMALL_DESIGN, "--replications", 2, "--n-draws", 100,
            "--submatrix-size", 20, "--k-max", 6]
    assert run("--output-dir", tmp_path / "a", *args) == 0
    assert run("--output-dir", tmp_path / "b", *args) == 0
    assert (tmp_path / "a" / "study.csv").read_bytes() == (tmp_path / "b" / "study.csv").read_bytes()
    assert (tmp_path / "a" / "study.json").read_bytes() == (tmp_path / "b" / "study.json").read_bytes()
    frame = pd.read_csv(tmp_path / "a" / "study.csv")
    assert list(frame.columns) == ["replication", "estimator", "metric", "value"]


def test_study_real_data_mode(simulated, tmp_path):
    assert run("--output-dir", tmp_path, "study", "--expression", simulated / "expression.csv",
               "--genesets", simulated / "genesets.csv", "--min-genes", 5, "--splits", 2,
               "--estimators", "basil,diagonal") == 0
    frame = pd.read_csv(tmp_path / "study.csv")
    assert set(frame["estimator"]) == {"basil", "diagonal"}
    assert run("--output-dir", tmp_path, "study", "--estimators", "plier") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "basil", "--output-dir", str(tmp_path), "simulate",
                           "--preset", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "valid presets" in proc.stderr


def test_sample_masks_truly_null_pairs(tmp_path):
    # without a residual block, genes outside every set have zero loadings,
    # so every pair involving one of them is truly uncorrelated
    assert run("--output-dir", tmp_path / "sim", "--seed", 11, "simulate", "--preset", "high-signal",
               "--n", 300, "--p", 400, "--q", 10, "--tau-psi-sq", 0) == 0
    assert run("--output-dir", tmp_path / "fit", "fit", tmp_path / "sim" / "expression.csv",
               tmp_path / "sim" / "genesets.csv", "--k-max", 15) == 0
    assert run("--output-dir", tmp_path / "s", "sample", tmp_path / "fit", "--n-draws", 1000,
               "--n-genes", 100, "--level", 0.95) == 0
    truth = pd.read_csv(tmp_path / "sim" / "truth_lambda.csv", index_col=0)
    silent = set(truth.index[(truth.to_numpy() == 0).all(axis=1)])
    corr = pd.read_csv(tmp_path / "s" / "correlation.csv", dtype={"gene_a": str, "gene_b": str})
    null = corr["gene_a"].isin(silent) | corr["gene_b"].isin(silent)
    assert null.sum() > 1000
    assert (corr.loc[null, "masked"] == 0).mean() >= 0.95
