import math
import pickle

import numpy as np
import pytest
from scipy import stats

from varipred.errors import ConfigError, SamplerError
from varipred.sampler import (ChainConfig, DualAveraging, PosteriorDraws, _Kernel, leapfrog,
                              nuts_transition, regularized_variance, run_chains, window_schedule)
from varipred.diagnostics import ess

from targets import ar1_cov, gaussian, python_gaussian


def neg_q(q):
    return -np.asarray(q, dtype=float)


def test_leapfrog_hand_arithmetic():
    q, p = leapfrog(np.array([0.0]), np.array([1.0]), 0.1, neg_q)
    assert q[0] == pytest.approx(0.1, abs=1e-15)
    assert p[0] == pytest.approx(0.995, abs=1e-15)


def test_leapfrog_conserves_energy():
    q, p = np.array([1.0]), np.array([0.5])
    h0 = 0.5 * q[0] ** 2 + 0.5 * p[0] ** 2
    for _ in range(1000):
        q, p = leapfrog(q, p, 0.01, neg_q)
    assert abs(0.5 * q[0] ** 2 + 0.5 * p[0] ** 2 - h0) < 1e-3


def test_leapfrog_fixed_point():
    q, p = leapfrog(np.zeros(3), np.zeros(3), 0.3, neg_q)
    assert np.all(q == 0) and np.all(p == 0)


def test_leapfrog_with_metric_scales_position_update():
    q, _ = leapfrog(np.array([0.0]), np.array([1.0]), 0.1, lambda x: np.zeros(1),
                    inv_metric=np.array([4.0]))
    assert q[0] == pytest.approx(0.4)


def test_transition_with_huge_step_never_moves():
    target = gaussian([0.0, 0.0], np.eye(2))
    config = ChainConfig(chains=1, warmup=0, total_post_warmup=50, step_size=1e6, adapt=False)
    draws = run_chains(target, config, [np.array([0.3, -0.2])])
    assert np.all(draws.draws[0] == np.array([0.3, -0.2]))
    assert draws.divergence_count[0] == 50


def test_compiled_and_python_kernels_take_the_same_path():
    # same random-number use and tree decisions; positions may differ in the
    # last bits because the compiled loops order float operations differently
    cov = ar1_cov(6, 0.9)
    compiled = gaussian(np.zeros(6), cov)

    def plain(q):  # same density arithmetic, but no compiled hooks -> Python kernel
        return compiled(q)

    inv = np.linspace(0.5, 2.0, 6)
    q1 = q2 = np.full(6, 0.5)
    lp1, g1 = compiled(q1)
    lp2, g2 = plain(q2)
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    for _ in range(100):
        a = _Kernel(compiled, 0.4, inv, r1, 10).transition(q1, lp1, g1)
        b = _Kernel(plain, 0.4, inv, r2, 10).python_transition(q2, lp2, g2)
        assert (a.depth, a.n_leapfrog, a.divergent) == (b.depth, b.n_leapfrog, b.divergent)
        np.testing.assert_allclose(a.position, b.position, rtol=0, atol=1e-8)
        assert a.accept_stat == pytest.approx(b.accept_stat, abs=1e-8)
        q1, lp1, g1 = a.position, a.log_density, a.gradient
        q2, lp2, g2 = b.position, b.log_density, b.gradient


def test_nuts_transition_reports_statistics():
    tr = nuts_transition(np.zeros(2), 0.5, np.ones(2), np.random.default_rng(0),
                         python_gaussian(np.zeros(2), np.eye(2)))
    assert 0.0 <= tr.accept_stat <= 1.0
    assert 1 <= tr.depth <= 10 and tr.n_leapfrog >= 1
    assert not tr.divergent


def test_max_tree_depth_caps_trajectory():
    # tiny step on a wide target: the U-turn is never reached within depth 3
    tr = nuts_transition(np.zeros(1), 1e-4, np.ones(1), np.random.default_rng(0),
                         python_gaussian(np.zeros(1), np.eye(1)), max_tree_depth=3)
    assert tr.depth == 3 and tr.n_leapfrog == 7


def run_normal(mean, cov, seed=1, **kw):
    dim = len(mean)
    config = ChainConfig(chains=4, warmup=1000, total_post_warmup=8000, seed=seed, **kw)
    inits = [np.random.default_rng(100 + c).uniform(-2, 2, dim) for c in range(4)]
    return run_chains(gaussian(mean, cov), config, inits)


def test_standard_normal_calibration():
    d = run_normal([0.0], [[1.0]])
    x = d.draws[:, :, 0]
    assert abs(x.mean()) < 0.05
    assert 0.95 <= x.std() <= 1.05
    assert stats.kstest(x.ravel(), "norm").statistic < 0.03
    assert np.all((d.inv_metric > 0.5) & (d.inv_metric < 2.0))
    assert 0.7 <= d.accept_stat.mean() <= 0.95
    assert d.divergence_count.sum() < 0.01 * x.size


def test_correlated_normal_means_within_mcse():
    cov = ar1_cov(10, 0.9)
    d = run_normal(np.zeros(10), cov, seed=3)
    for i in range(10):
        x = d.draws[:, :, i]
        mcse = x.std() / math.sqrt(ess(x))
        assert abs(x.mean()) < 3 * mcse
    assert d.divergence_count.sum() < 0.01 * d.draws.shape[0] * d.draws.shape[1]


def test_metric_adapts_to_scales():
    d = run_normal([0.0, 0.0], np.diag([100.0, 1.0]), seed=5)
    ratio = d.inv_metric[:, 0] / d.inv_metric[:, 1]
    assert np.all((ratio > 25) & (ratio < 400))


def test_determinism_and_chain_independence():
    target = gaussian(np.zeros(3), ar1_cov(3, 0.5))
    inits = [np.full(3, 0.1 * c) for c in range(4)]
    cfg = ChainConfig(chains=4, warmup=200, total_post_warmup=400, seed=9)
    a = run_chains(target, cfg, inits)
    b = run_chains(target, cfg, inits)
    assert np.array_equal(a.draws, b.draws)
    # a chain's output depends only on the seed, its index and its start
    two = run_chains(target, ChainConfig(chains=2, warmup=200, total_post_warmup=200, seed=9),
                     inits[:2])
    assert np.array_equal(two.draws, a.draws[:2])
    c = run_chains(target, ChainConfig(chains=4, warmup=200, total_post_warmup=400, seed=10), inits)
    assert not np.array_equal(a.draws, c.draws)


def test_process_pool_matches_sequential(three_subject):
    from varipred.model import VariabilityModel, initialize

    model = VariabilityModel(three_subject.repeated, three_subject.between)
    pickle.dumps(model)
    inits = [model.layout.unconstrain(initialize(model.repeated, model.between,
                                                 rng=np.random.default_rng(c)))
             for c in range(2)]
    cfg = ChainConfig(chains=2, warmup=150, total_post_warmup=200, seed=4)
    seq = run_chains(model, cfg, inits, transform=model.constrain_draws)
    par = run_chains(model, cfg, inits, transform=model.constrain_draws, n_jobs=2)
    assert np.array_equal(seq.draws, par.draws)


def test_thinning_halves_retained_draws():
    target = gaussian(np.zeros(1), np.eye(1))
    a = run_chains(target, ChainConfig(chains=2, warmup=200, total_post_warmup=400, thin=1),
                   [np.zeros(1)] * 2)
    b = run_chains(target, ChainConfig(chains=2, warmup=200, total_post_warmup=400, thin=2),
                   [np.zeros(1)] * 2)
    assert a.n_iterations == 200 and b.n_iterations == 100
    # same underlying chain: thinned draws are every second unthinned draw
    assert np.array_equal(b.draws, a.draws[:, 1::2])


def test_study_simulation_schedule():
    cfg = ChainConfig(chains=4, warmup=500, total_post_warmup=4000, thin=4)
    assert cfg.retained_per_chain == 250
    assert cfg.retained_per_chain * cfg.chains == 1000


def test_config_validation():
    with pytest.raises(ConfigError):
        ChainConfig(chains=3, total_post_warmup=1000)
    with pytest.raises(ConfigError):
        ChainConfig(chains=4, total_post_warmup=1000, thin=3)
    with pytest.raises(ConfigError):
        ChainConfig(target_accept=1.0)
    with pytest.raises(ConfigError):
        ChainConfig(seed=-1)
    with pytest.raises(ConfigError):
        ChainConfig(warmup=100, adapt_metric=True)
    # short warmups still run with step-size-only adaptation
    assert not ChainConfig(warmup=10).metric_adaptation


def test_window_schedule():
    assert window_schedule(1000) == [(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)]
    assert window_schedule(500) == [(75, 100), (100, 150), (150, 250), (250, 450)]
    assert window_schedule(150) == [(75, 100)]
    with pytest.raises(ConfigError):
        window_schedule(149)


def test_regularized_variance():
    x = np.random.default_rng(0).normal(0, 3, (95, 2))
    v = regularized_variance(x)
    expect = 95 / 100 * x.var(axis=0, ddof=1) + 1e-3 * 5 / 100
    np.testing.assert_allclose(v, expect)


def test_dual_averaging_moves_toward_target():
    da = DualAveraging(1.0, 0.8)
    for _ in range(50):
        step = da.update(0.2)
    assert step < 1.0
    da = DualAveraging(1.0, 0.8)
    for _ in range(50):
        step = da.update(1.0)
    assert step > 1.0


def test_init_failure_raises_after_reinit_attempts():
    def bad(q):
        return -np.inf, np.zeros_like(q)

    calls = []

    def reinit(rng):
        calls.append(1)
        return rng.normal(size=1)

    cfg = ChainConfig(chains=1, warmup=200, total_post_warmup=10, init_attempts=100)
    with pytest.raises(SamplerError):
        run_chains(bad, cfg, [np.zeros(1)], reinit=reinit)
    assert len(calls) == 100


def test_posterior_draws_accessors():
    arr = np.arange(24, dtype=float).reshape(2, 3, 4)
    d = PosteriorDraws(["a", "b", "c", "d"], arr, np.zeros(2, dtype=int))
    assert d.n_chains == 2 and d.n_iterations == 3
    assert "c" in d and "z" not in d
    np.testing.assert_array_equal(d.chains_of("b"), arr[:, :, 1])
    np.testing.assert_array_equal(d.pooled("b"), arr[:, :, 1].ravel())
