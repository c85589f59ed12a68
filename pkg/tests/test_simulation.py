import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from varipred.errors import ConfigError
from varipred.simulation import (RECORD_COLUMNS, SimCondition, aggregate, bias, coverage_and_power,
                                 generate_dataset, metric_tables, study_grid, parse_condition,
                                 read_records, relative_bias_pct, run_study, unstandardize,
                                 write_records)


def standardized_by_brute_force(cond, n, seed):
    """OLS of Y on the true sigma_j and mu_j, rescaled to standardized coefficients."""
    cond = SimCondition(k=1, n_subjects=n, alpha1_std=cond.alpha1_std,
                        gamma_shape=cond.gamma_shape, gamma_rate=cond.gamma_rate)
    _, between, truth = generate_dataset(cond, np.random.default_rng(seed))
    y = between.outcome
    x = np.column_stack([np.ones(n), truth.sigma_j, truth.mu_j])
    coef = np.linalg.lstsq(x, y, rcond=None)[0]
    sd_y = y.std()
    return coef[1] * truth.sigma_j.std() / sd_y, coef[2] * truth.mu_j.std() / sd_y


def test_unstandardize_null():
    assert unstandardize(0, 0, 4) == (0.0, 0.0)


def test_unstandardize_closed_form():
    a1, a2 = unstandardize(0.5, 0.3, 4.0)
    assert a1 == pytest.approx(0.5 / math.sqrt(0.66) / 4, rel=1e-14)
    assert a1 == pytest.approx(0.1539, abs=5e-5)
    assert a2 == pytest.approx(0.3693, abs=5e-5)
    assert unstandardize(0.2, 0.3, 2.0)[0] == pytest.approx(0.2 / math.sqrt(0.87) / 2, rel=1e-14)


def test_unstandardize_rejects_impossible_effects():
    with pytest.raises(ConfigError):
        unstandardize(0.9, 0.5, 1.0)


@pytest.mark.parametrize("alpha1", [0.5, 0.2])
@pytest.mark.parametrize("gamma", [(4.0, 1.0), (1.0, 0.25)])
def test_unstandardize_brute_force(alpha1, gamma):
    cond = SimCondition(k=5, n_subjects=80, alpha1_std=alpha1, gamma_shape=gamma[0],
                        gamma_rate=gamma[1])
    s1, s2 = standardized_by_brute_force(cond, 1_000_000, 11)
    assert abs(s1 - alpha1) < 0.01
    assert abs(s2 - 0.3) < 0.01


def test_generated_moments():
    cond = SimCondition(k=5, n_subjects=100_000, alpha1_std=0.5, gamma_shape=1.0, gamma_rate=0.25)
    rep, _, truth = generate_dataset(cond, np.random.default_rng(0))
    n = cond.n_subjects
    assert abs(truth.sigma_j.mean() - 4) < 0.05
    assert abs(truth.sigma_j.std() - 4) < 0.1
    assert abs(truth.mu_j.mean()) < 3 / math.sqrt(n)
    assert abs(truth.mu_j.std() - 1) < 3 / math.sqrt(2 * n)
    # within-subject standardized residuals are unit normal
    z = (rep.value - truth.mu_j[rep.subject]) / truth.sigma_j[rep.subject]
    assert abs(z.std() - 1) < 3 / math.sqrt(2 * z.size)
    assert np.bincount(rep.subject).tolist() == [5] * n


def test_null_outcome_independent_of_sigma():
    cond = SimCondition(k=1, n_subjects=100_000, alpha1_std=0.0, alpha2_std=0.0,
                        gamma_shape=4.0, gamma_rate=1.0)
    _, between, truth = generate_dataset(cond, np.random.default_rng(1))
    assert abs(np.corrcoef(between.outcome, truth.sigma_j)[0, 1]) < 0.01


def test_generation_deterministic():
    cond = parse_condition("g4-1_N80_k5_a0.5")
    a = generate_dataset(cond, np.random.default_rng(5))
    b = generate_dataset(cond, np.random.default_rng(5))
    assert a[0].value.tobytes() == b[0].value.tobytes()
    assert a[1].outcome.tobytes() == b[1].outcome.tobytes()


def test_relative_bias_examples():
    assert relative_bias_pct([2.0, 2.0], 2.0) == 0
    assert relative_bias_pct([1.2 * 0.7] * 3, 0.7) == pytest.approx(20)
    with pytest.raises(ValueError, match="plain bias"):
        relative_bias_pct([1.0], 0.0)
    assert bias([1.0, 3.0], 1.0) == 1.0


def test_coverage_and_power_examples():
    assert coverage_and_power([-1, 2], [1, 3], 2.5) == (0.5, 0.5)
    assert coverage_and_power([0, 1], [1, 2], 1.0) == (1.0, 0.5)
    with pytest.raises(ValueError):
        coverage_and_power([1.0], [0.0], 0.5)


def test_coverage_calibration():
    rng = np.random.default_rng(4)
    est = rng.normal(1.0, 0.5, 5000)
    cover, _ = coverage_and_power(est - 1.959964 * 0.5, est + 1.959964 * 0.5, 1.0)
    assert abs(cover - 0.95) <= 0.01


def test_study_grid():
    grid = study_grid()
    assert len(grid) == 16 and len({c.key for c in grid}) == 16
    thins = {(c.gamma_shape, c.k): c.thin for c in grid}
    assert thins == {(1.0, 5): 4, (1.0, 14): 2, (4.0, 5): 10, (4.0, 14): 10}
    for c in grid:
        assert parse_condition(c.key) == c
        cfg = c.chain_config(0)
        assert cfg.total_post_warmup // cfg.thin // cfg.chains == 250


def test_parse_condition_rejects_garbage():
    for key in ("bogus", "g4-1_N80_k5", "x4-1_N80_k5_a0.5", "g4-1_N80_kfive_a0.5"):
        with pytest.raises(ConfigError, match="unknown condition key"):
            parse_condition(key)


def test_gamma_moment_check():
    c = parse_condition("g1-0.25_N80_k5_a0.2")
    assert c.sd_sigma == 4.0 and c.variability == "high"


SMALL = [parse_condition("g4-1_N80_k5_a0.5"), parse_condition("g1-0.25_N250_k14_a0.2")]


def test_isdm_study_prefix_property():
    short = run_study(SMALL, "isdm", seed=3, replications=4)
    long = run_study(SMALL, "isdm", seed=3, replications=7)
    keep = [r for r in long if r["replication"] < 4]
    assert keep == short


def test_parallel_study_matches_sequential(tmp_path):
    a = run_study(SMALL, "isdm", seed=9, replications=5)
    b = run_study(SMALL, "isdm", seed=9, replications=5, n_jobs=2)
    write_records(tmp_path / "a.csv", a)
    write_records(tmp_path / "b.csv", b)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_records_round_trip_and_rederivable_metrics(tmp_path):
    rec = run_study(SMALL, "isdm", seed=1, replications=20)
    path = tmp_path / "records.csv"
    write_records(path, rec)
    assert path.read_text().splitlines()[0] == ",".join(RECORD_COLUMNS)
    back = read_records(path)
    assert aggregate(back) == aggregate(rec)
    m = aggregate(back)[0]
    rows = [r for r in back if r["condition"] == SMALL[0].key and r["parameter"] == "alpha1"]
    truth = rows[0]["truth"]
    assert m.parameters["alpha1"].relative_bias_pct == relative_bias_pct(
        [r["estimate"] for r in rows], truth)
    assert m.convergence_rate == 1.0


def test_bayes_filter_and_rates():
    def rows(rep, conv, ess):
        return [dict(condition="c", estimator="bayes", replication=rep, parameter=p, estimate=1.1,
                     ci_low=0.5, ci_high=1.5, converged=conv, ess_focal=ess, truth=1.0)
                for p in ("alpha1", "alpha2", "intercept")]
    rec = rows(0, True, 500) + rows(1, False, 500) + rows(2, True, 150) + rows(3, True, 900)
    m = aggregate(rec)[0]
    assert m.convergence_rate == 0.75 and m.sufficient_ess_rate == 0.75
    assert m.parameters["alpha1"].n_used == 2
    assert m.parameters["alpha1"].relative_bias_pct == pytest.approx(10)


def test_metric_table_layout():
    rec = run_study(SMALL, "isdm", seed=2, replications=3)
    tables = metric_tables(aggregate(rec))
    header, rows = tables["relative_bias"]
    assert header[:3] == ["condition", "estimator", "parameter"]
    assert [(r[0], r[2]) for r in rows] == [(SMALL[0].key, "alpha1"), (SMALL[0].key, "alpha2"),
                                            (SMALL[1].key, "alpha1"), (SMALL[1].key, "alpha2")]
    assert len(tables["convergence"][1]) == 2


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-0.6, 0.6), b=st.floats(-0.6, 0.6), s=st.floats(0.1, 10))
def test_unstandardize_consistent_with_variance_identity(a, b, s):
    a1, a2 = unstandardize(a, b, s)
    var_y = (a1 * s) ** 2 + a2**2 + 1.0
    assert a1 * s / math.sqrt(var_y) == pytest.approx(a, abs=1e-12)
    assert a2 / math.sqrt(var_y) == pytest.approx(b, abs=1e-12)
