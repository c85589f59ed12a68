import csv
import json
import time

import numpy as np
import pytest

from varipred.cli import main, read_draws
from varipred.csvio import ingest, write_dataset
from varipred.errors import DataError
from varipred.inference import summarize

FAST = ["--chains", "2", "--warmup", "300", "--iter", "800", "--seed", "7"]


def write_synthetic(tmp_path, n=25, k=6, seed=0, mediation=False):
    rng = np.random.default_rng(seed)
    mu = rng.normal(5, 1, n)
    sig = rng.gamma(4, 0.5, n)
    y = 1 + 0.8 * sig + 0.3 * mu + rng.normal(0, 1, n)
    within = tmp_path / "within.csv"
    between = tmp_path / "between.csv"
    with open(within, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "mood"])
        for j in range(n):
            for v in rng.normal(mu[j], sig[j], k):
                w.writerow([f"p{j:02d}", repr(float(v))])
    with open(between, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "sleep", "stress"] if mediation else ["id", "sleep"])
        for j in range(n):
            m = y[j] + rng.normal()
            w.writerow([f"p{j:02d}", repr(float(2 + 0.5 * m - 0.3 * sig[j])), repr(float(m))]
                       if mediation else [f"p{j:02d}", repr(float(y[j]))])
    return within, between


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys else ""
    return code, err


def test_ingest_three_subject(three_subject):
    rep, bet = three_subject.repeated, three_subject.between
    assert rep.n_subjects == 3 and rep.n_obs == 9
    assert np.bincount(rep.subject).tolist() == [3, 2, 4]
    assert rep.covariate_names == ("day",) and bet.covariate_names == ("sex",)
    assert rep.subject_labels == ("a", "b", "c")


def test_ingest_mediation(three_subject_mediation):
    assert three_subject_mediation.between.mediator is not None


def test_ingest_errors(tmp_path):
    w = tmp_path / "w.csv"
    b = tmp_path / "b.csv"
    w.write_text("id,value\na,1\na,2\nz,3\n")
    b.write_text("id,outcome\na,1\n")
    with pytest.raises(DataError, match="z"):
        ingest(w, b)
    w.write_text("id,value\na,1\na,2\n")
    b.write_text("id,outcome\na,1\nq,2\n")
    with pytest.raises(DataError, match="q"):
        ingest(w, b)
    b.write_text("id,outcome\na,1\na,2\n")
    with pytest.raises(DataError, match="duplicated"):
        ingest(w, b)
    b.write_text("id,outcome\na,oops\n")
    with pytest.raises(DataError, match="oops"):
        ingest(w, b)


def test_dataset_round_trip(tmp_path, three_subject):
    write_dataset(tmp_path / "w.csv", tmp_path / "b.csv", three_subject)
    again = ingest(tmp_path / "w.csv", tmp_path / "b.csv")
    np.testing.assert_array_equal(again.repeated.value, three_subject.repeated.value)
    np.testing.assert_array_equal(again.repeated.subject, three_subject.repeated.subject)
    np.testing.assert_array_equal(again.between.outcome, three_subject.between.outcome)
    np.testing.assert_array_equal(again.between.covariates, three_subject.between.covariates)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("fit")
    within, between = write_synthetic(tmp)
    out = tmp / "out"
    code = main(["fit", str(within), str(between), "--out", str(out), "--draws", *FAST])
    return code, out, within, between


def test_fit_outputs(fitted):
    code, out, *_ = fitted
    assert code in (0, 2)
    for name in ("summary.json", "diagnostics.csv", "sampler.csv", "draws.csv",
                 "plot_rhat_hist.csv", "plot_ess_hist.csv", "plot_latent_sigma.csv",
                 "plot_latent_mu.csv", "plot_alpha_pairs.csv"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert {"model", "design", "converged", "n_subjects", "n_observations", "parameters",
            "diagnostics"} <= summary.keys()
    assert "indirect_effects" not in summary
    assert summary["n_subjects"] == 25 and summary["n_observations"] == 150
    assert code == (0 if summary["converged"] else 2)
    labels = {p["name"]: p["label"] for p in summary["parameters"]}
    assert labels["Yalpha[1]"] == "vmood"


def test_summary_rederivable_from_draws(fitted):
    _, out, *_ = fitted
    draws = read_draws(out / "draws.csv")
    summary = json.loads((out / "summary.json").read_text())
    for p in summary["parameters"]:
        s = summarize(draws.pooled(p["name"]))
        for key in ("mean", "median", "sd", "ci_low", "ci_high", "p_value"):
            assert p[key] == pytest.approx(getattr(s, key), rel=1e-12, abs=1e-300), (p["name"], key)


def test_diagnose_matches_fit(fitted, tmp_path):
    _, out, *_ = fitted
    code = main(["diagnose", str(out / "draws.csv"), "--out", str(tmp_path)])
    assert code in (0, 2)
    assert (tmp_path / "diagnostics.csv").read_bytes() == (out / "diagnostics.csv").read_bytes()


def test_fit_rerun_byte_identical(fitted, tmp_path):
    code, out, within, between = fitted
    again = tmp_path / "again"
    assert main(["fit", str(within), str(between), "--out", str(again), "--draws", *FAST,
                 "--jobs", "2"]) == code
    for f in sorted(out.iterdir()):
        assert (again / f.name).read_bytes() == f.read_bytes(), f.name


def test_fit_figures_deterministic(tmp_path):
    within, between = write_synthetic(tmp_path, n=15, k=5)
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        main(["fit", str(within), str(between), "--out", str(out), "--figures", "svg", *FAST])
        outs.append(out)
    for name in ("diagnostics.svg", "alpha_pairs.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_mediate_reports_indirect_effects(tmp_path):
    within, between = write_synthetic(tmp_path, mediation=True)
    out = tmp_path / "med"
    code = main(["mediate", str(within), str(between), "--out", str(out), *FAST])
    assert code in (0, 2)
    summary = json.loads((out / "summary.json").read_text())
    names = [r["name"] for r in summary["indirect_effects"]]
    assert names == ["vmood -> stress -> sleep", "mmood -> stress -> sleep"]
    assert summary["design"]["kind"] == "v2m2y"


def test_csv_format(tmp_path):
    within, between = write_synthetic(tmp_path, n=15, k=5)
    out = tmp_path / "o"
    main(["fit", str(within), str(between), "--out", str(out), "--format", "csv", *FAST])
    head = (out / "summary.csv").read_text().splitlines()[0]
    assert head.startswith("name,block,label,mean")


def test_non_convergence_exit_code(tmp_path, capsys):
    within, between = write_synthetic(tmp_path, n=15, k=5)
    out = tmp_path / "o"
    code = main(["fit", str(within), str(between), "--out", str(out), "--warmup", "10",
                 "--iter", "40", "--chains", "4"])
    assert code == 2
    assert json.loads((out / "summary.json").read_text())["converged"] is False


def test_baseline(tmp_path):
    within, between = write_synthetic(tmp_path)
    out = tmp_path / "b"
    assert main(["baseline", str(within), str(between), "--out", str(out)]) == 0
    res = json.loads((out / "baseline.json").read_text())
    assert [p["name"] for p in res["parameters"]] == ["(Intercept)", "ISD", "mean"]
    assert len((out / "subject_stats.csv").read_text().splitlines()) == 26


def test_baseline_too_few_subjects(tmp_path, capsys, fixtures_dir):
    code, err = run(["baseline", fixtures_dir / "within3.csv", fixtures_dir / "between3.csv",
                     "--out", tmp_path], capsys)
    assert code == 1 and err.startswith("error[")


@pytest.mark.parametrize("argv", [
    ["simulate", "bogus", "--replications", "1"],
    ["fit", "missing.csv", "nothing.csv"],
    ["fit", "--chains"],
    ["simulate", "g4-1_N80_k5_a0.5", "--estimator", "magic"],
    ["nonsense"],
])
def test_errors_exit_one(argv, capsys, tmp_path):
    code, err = run(argv, capsys)
    assert code == 1
    assert err.startswith("error[")


def test_bad_focal(tmp_path, capsys):
    within, between = write_synthetic(tmp_path, n=10, k=3)
    code, err = run(["fit", within, between, "--focal", "nope", "--out", tmp_path / "o"], capsys)
    assert code == 1 and "nope" in err


def test_simulate_study_grid_isdm(tmp_path):
    t = time.time()
    out = tmp_path / "sim"
    assert main(["simulate", "full-grid", "--replications", "2", "--out", str(out)]) == 0
    assert time.time() - t < 60
    assert len((out / "convergence.csv").read_text().splitlines()) == 17
    records = (out / "records.csv").read_text().splitlines()
    assert len(records) == 1 + 16 * 2 * 3
    again = tmp_path / "sim2"
    main(["simulate", "full-grid", "--replications", "2", "--out", str(again), "--jobs", "2"])
    for f in out.iterdir():
        assert (again / f.name).read_bytes() == f.read_bytes()
