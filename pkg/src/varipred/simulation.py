"""Monte Carlo study: data generation, estimators, per-replication records and metrics."""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baseline import isd_model
from .csvio import write_rows
from .data import BetweenData, Design, RepeatedData
from .errors import ConfigError, VariError
from .fit import fit
from .sampler import ChainConfig

PARAMETERS = ("alpha1", "alpha2", "intercept")
RECORD_COLUMNS = ("condition", "estimator", "replication", "parameter", "estimate", "ci_low",
                  "ci_high", "converged", "ess_focal", "truth")
ESTIMATORS = ("isdm", "bayes")
ESS_FILTER = 200.0


def gamma_moments(shape: float, rate: float) -> tuple[float, float]:
    """Mean and SD of a gamma distribution with the given shape and rate."""
    return shape / rate, math.sqrt(shape) / rate


def default_thin(k: int, gamma_shape: float, gamma_rate: float) -> int:
    """Thinning used for each cell of the factorial design."""
    if (gamma_shape, gamma_rate) == (1.0, 0.25):
        return 4 if k == 5 else 2
    return 10


@dataclass(frozen=True)
class SimCondition:
    k: int
    n_subjects: int
    alpha1_std: float
    gamma_shape: float
    gamma_rate: float
    alpha2_std: float = 0.3
    thin: int | None = None
    warmup: int = 500
    retained_per_chain: int = 250
    chains: int = 4

    def __post_init__(self):
        if self.k < 1 or self.n_subjects < 3:
            raise ConfigError("condition needs k >= 1 and at least 3 subjects",
                              k=self.k, n_subjects=self.n_subjects)
        if self.gamma_shape <= 0 or self.gamma_rate <= 0:
            raise ConfigError("gamma shape and rate must be positive")
        if self.alpha1_std**2 + self.alpha2_std**2 >= 1.0:
            raise ConfigError("standardized effects imply non-positive residual variance")
        if self.thin is None:
            object.__setattr__(self, "thin", default_thin(self.k, self.gamma_shape, self.gamma_rate))
        # the grid's gamma pairs are documented by their moments; keep them in sync
        mean, sd = gamma_moments(self.gamma_shape, self.gamma_rate)
        known = {(1.0, 0.25): (4.0, 4.0), (4.0, 1.0): (4.0, 2.0)}
        expect = known.get((self.gamma_shape, self.gamma_rate))
        if expect is not None and not (math.isclose(mean, expect[0]) and math.isclose(sd, expect[1])):
            raise ConfigError("gamma moments inconsistent with the rate parameterization")

    @property
    def key(self) -> str:
        return (f"g{self.gamma_shape:g}-{self.gamma_rate:g}_N{self.n_subjects}"
                f"_k{self.k}_a{self.alpha1_std:g}")

    @property
    def variability(self) -> str:
        mean, sd = gamma_moments(self.gamma_shape, self.gamma_rate)
        return "high" if sd > 3.0 else "low"

    @property
    def sd_sigma(self) -> float:
        return gamma_moments(self.gamma_shape, self.gamma_rate)[1]

    def chain_config(self, seed: int) -> ChainConfig:
        total = self.chains * self.retained_per_chain * self.thin
        return ChainConfig(chains=self.chains, warmup=self.warmup, total_post_warmup=total,
                           thin=self.thin, seed=seed)


def study_grid(**overrides) -> list[SimCondition]:
    """The 16 cells: gamma pair x N x k x alpha1, ordered as in the tables."""
    out = []
    for alpha1 in (0.2, 0.5):
        for shape, rate in ((4.0, 1.0), (1.0, 0.25)):
            for n in (80, 250):
                for k in (5, 14):
                    out.append(SimCondition(k=k, n_subjects=n, alpha1_std=alpha1,
                                            gamma_shape=shape, gamma_rate=rate, **overrides))
    return out


def parse_condition(key: str) -> SimCondition:
    """Inverse of :attr:`SimCondition.key`."""
    try:
        g, n, k, a = key.split("_")
        shape, rate = (float(s) for s in g[1:].split("-"))
        if g[0] != "g" or n[0] != "N" or k[0] != "k" or a[0] != "a":
            raise ValueError
        return SimCondition(k=int(k[1:]), n_subjects=int(n[1:]), alpha1_std=float(a[1:]),
                            gamma_shape=shape, gamma_rate=rate)
    except (ValueError, IndexError):
        raise ConfigError(f"unknown condition key {key!r}; expected e.g. g4-1_N80_k5_a0.5") from None


def unstandardize(alpha1_std: float, alpha2_std: float, sd_sigma: float,
                  sd_mu: float = 1.0) -> tuple[float, float]:
    """Raw-scale coefficients giving the requested standardized effects.

    Assumes independent predictors and unit residual SD, so
    ``Var(Y) = 1 / (1 - a^2 - b^2)``.
    """
    resid_share = 1.0 - alpha1_std**2 - alpha2_std**2
    if resid_share <= 0.0:
        raise ConfigError("standardized effects imply non-positive residual variance",
                          alpha1=alpha1_std, alpha2=alpha2_std)
    if sd_sigma <= 0.0 or sd_mu <= 0.0:
        raise ConfigError("predictor SDs must be positive")
    sd_y = 1.0 / math.sqrt(resid_share)
    return alpha1_std * sd_y / sd_sigma, alpha2_std * sd_y / sd_mu


@dataclass(frozen=True)
class TrueParameters:
    alpha1: float
    alpha2: float
    intercept: float = 0.0
    mu_j: np.ndarray = field(default=None, repr=False)
    sigma_j: np.ndarray = field(default=None, repr=False)

    def value(self, name: str) -> float:
        return float(getattr(self, name))


def generate_dataset(cond: SimCondition, rng: np.random.Generator):
    """Simulate one dataset in four steps: means, SDs, repeated measures, outcome."""
    n, k = cond.n_subjects, cond.k
    a1, a2 = unstandardize(cond.alpha1_std, cond.alpha2_std, cond.sd_sigma, 1.0)
    mu = rng.normal(0.0, 1.0, n)
    sigma = rng.gamma(cond.gamma_shape, 1.0 / cond.gamma_rate, n)
    subject = np.repeat(np.arange(n), k)
    value = rng.normal(mu[subject], sigma[subject])
    y = rng.normal(a1 * sigma + a2 * mu, 1.0)
    truth = TrueParameters(alpha1=a1, alpha2=a2, intercept=0.0, mu_j=mu, sigma_j=sigma)
    return RepeatedData(subject, value), BetweenData(y), truth


@dataclass(frozen=True)
class Estimate:
    parameter: str
    estimate: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class ReplicationResult:
    converged: bool
    ess_focal: float
    estimates: tuple


class IsdmEstimator:
    name = "isdm"

    def __init__(self, ci_level: float = 0.95):
        self.ci_level = ci_level

    def __call__(self, repeated, between, cond, seed) -> ReplicationResult:
        f = isd_model(repeated, between, ci_level=self.ci_level)
        rows = []
        for par, col in (("alpha1", "ISD"), ("alpha2", "mean"), ("intercept", "(Intercept)")):
            i = f.index(col)
            rows.append(Estimate(par, float(f.coefs[i]), float(f.ci_low[i]), float(f.ci_high[i])))
        return ReplicationResult(True, math.nan, tuple(rows))


class BayesEstimator:
    name = "bayes"

    def __init__(self, ci_level: float = 0.95, warmup: int | None = None):
        self.ci_level = ci_level
        self.warmup = warmup

    def __call__(self, repeated, between, cond, seed) -> ReplicationResult:
        config = cond.chain_config(seed)
        if self.warmup is not None:
            config = ChainConfig(chains=config.chains, warmup=self.warmup,
                                 total_post_warmup=config.total_post_warmup, thin=config.thin,
                                 seed=seed)
        res = fit(repeated, between, Design(), config, ci_level=self.ci_level)
        rows = []
        for par, col in (("alpha1", "Yalpha[1]"), ("alpha2", "Yalpha[2]"), ("intercept", "YB[1]")):
            s = res.summary(col)
            rows.append(Estimate(par, s.mean, s.ci_low, s.ci_high))
        return ReplicationResult(res.report.converged, res.report.focal_ess, tuple(rows))


def make_estimator(name: str, ci_level: float = 0.95):
    if name == "isdm":
        return IsdmEstimator(ci_level)
    if name == "bayes":
        return BayesEstimator(ci_level)
    raise ConfigError(f"unknown estimator {name!r}", choices=",".join(ESTIMATORS))


def replication_seeds(study_seed: int, cond: SimCondition, rep: int) -> tuple[np.random.Generator, int]:
    """Data generator and sampler seed for one replication.

    Derived only from (study seed, condition key, replication index), so any
    cell or replication can be rerun on its own.
    """
    base = [int(study_seed), zlib.crc32(cond.key.encode("utf-8")), int(rep)]
    data_rng = np.random.default_rng(np.random.SeedSequence(base + [0]))
    sampler_seed = int(np.random.SeedSequence(base + [1]).generate_state(1, np.uint64)[0])
    return data_rng, sampler_seed


def run_replication(cond: SimCondition, estimator, study_seed: int, rep: int) -> list[dict]:
    data_rng, sampler_seed = replication_seeds(study_seed, cond, rep)
    repeated, between, truth = generate_dataset(cond, data_rng)
    try:
        result = estimator(repeated, between, cond, sampler_seed)
    except (VariError, ArithmeticError, np.linalg.LinAlgError):
        result = ReplicationResult(False, math.nan,
                                   tuple(Estimate(p, math.nan, math.nan, math.nan) for p in PARAMETERS))
    return [
        {
            "condition": cond.key,
            "estimator": estimator.name,
            "replication": rep,
            "parameter": e.parameter,
            "estimate": e.estimate,
            "ci_low": e.ci_low,
            "ci_high": e.ci_high,
            "converged": bool(result.converged),
            "ess_focal": float(result.ess_focal),
            "truth": truth.value(e.parameter),
        }
        for e in result.estimates
    ]


def _replication_task(args):
    return run_replication(*args)


def run_study(conditions, estimator, seed: int = 0, replications: int = 100,
              n_jobs: int = 1, progress=None) -> list[dict]:
    """Per-replication records for every condition, ordered by (condition, replication).

    Failures inside an estimator are recorded as non-converged rather than
    raised. ``n_jobs > 1`` distributes replications over processes; output
    order and content do not depend on it.
    """
    if isinstance(estimator, str):
        estimator = make_estimator(estimator)
    if replications < 1:
        raise ConfigError("replications must be positive", replications=replications)
    tasks = [(c, estimator, seed, r) for c in conditions for r in range(replications)]
    records = []
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for i, rows in enumerate(pool.map(_replication_task, tasks)):
                records.extend(rows)
                if progress:
                    progress(i + 1, len(tasks))
    else:
        for i, task in enumerate(tasks):
            records.extend(_replication_task(task))
            if progress:
                progress(i + 1, len(tasks))
    return records


def relative_bias_pct(estimates, truth: float) -> float:
    """Mean of ``(estimate - truth) / truth`` in percent."""
    if truth == 0:
        raise ValueError("relative bias undefined for a true value of 0; report plain bias instead")
    x = np.asarray(estimates, dtype=float)
    return float(np.mean((x - truth) / truth) * 100.0)


def bias(estimates, truth: float) -> float:
    return float(np.mean(np.asarray(estimates, dtype=float) - truth))


def coverage_and_power(ci_lows, ci_highs, truth: float) -> tuple[float, float]:
    """Share of closed intervals containing ``truth`` and share excluding 0."""
    lo = np.asarray(ci_lows, dtype=float)
    hi = np.asarray(ci_highs, dtype=float)
    if lo.shape != hi.shape:
        raise ValueError("interval bound vectors differ in length")
    if np.any(lo > hi):
        raise ValueError("interval with lower bound above upper bound")
    if lo.size == 0:
        return math.nan, math.nan
    cover = np.mean((lo <= truth) & (truth <= hi))
    power = np.mean((lo > 0.0) | (hi < 0.0))
    return float(cover), float(power)


@dataclass
class ParameterMetrics:
    relative_bias_pct: float
    bias: float
    coverage: float
    power: float
    n_used: int


@dataclass
class SimMetrics:
    condition: str
    estimator: str
    replications: int
    convergence_rate: float
    sufficient_ess_rate: float
    parameters: dict

    @property
    def intercept_bias(self) -> float:
        return self.parameters["intercept"].bias

    @property
    def intercept_coverage(self) -> float:
        return self.parameters["intercept"].coverage


def _included(row: dict) -> bool:
    if row["estimator"] != "bayes":
        return bool(row["converged"])
    return bool(row["converged"]) and float(row["ess_focal"]) >= ESS_FILTER


def aggregate(records) -> list[SimMetrics]:
    """Metrics per (condition, estimator), in first-seen order.

    The Bayesian arm keeps only replications that converged and have focal
    ESS of at least 200; the ISD model keeps every replication.
    """
    groups: dict = {}
    for row in records:
        groups.setdefault((row["condition"], row["estimator"]), []).append(row)
    out = []
    for (cond, est), rows in groups.items():
        reps = {}
        for r in rows:
            reps.setdefault(int(r["replication"]), r)
        n_rep = len(reps)
        conv = sum(bool(r["converged"]) for r in reps.values())
        if est == "bayes":
            ss = sum(float(r["ess_focal"]) >= ESS_FILTER for r in reps.values())
        else:
            ss = n_rep
        params = {}
        for par in PARAMETERS:
            used = [r for r in rows if r["parameter"] == par and _included(r)]
            if not used:
                params[par] = ParameterMetrics(math.nan, math.nan, math.nan, math.nan, 0)
                continue
            truth = float(used[0]["truth"])
            est_v = [float(r["estimate"]) for r in used]
            cov, pw = coverage_and_power([float(r["ci_low"]) for r in used],
                                         [float(r["ci_high"]) for r in used], truth)
            rb = relative_bias_pct(est_v, truth) if truth != 0 else math.nan
            params[par] = ParameterMetrics(rb, bias(est_v, truth), cov, pw, len(used))
        out.append(SimMetrics(cond, est, n_rep, conv / n_rep, ss / n_rep, params))
    return out


def write_records(path, records) -> None:
    write_rows(path, RECORD_COLUMNS, ([r[c] for c in RECORD_COLUMNS] for r in records))


def read_records(path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            r = dict(r)
            r["replication"] = int(r["replication"])
            for c in ("estimate", "ci_low", "ci_high", "ess_focal", "truth"):
                r[c] = float(r[c])
            r["converged"] = r["converged"] == "true"
            out.append(r)
    return out


def metric_tables(metrics: list[SimMetrics]) -> dict[str, tuple[list, list]]:
    """Rows for the convergence, bias, coverage, power and intercept tables.

    Each value is ``(header, rows)``; rows are condition-major and
    parameter-minor.
    """
    cond_cols = ["condition", "estimator"]
    t1 = (cond_cols + ["replications", "converged", "sufficient_ess"], [])
    t2 = (cond_cols + ["parameter", "relative_bias_pct", "n_used"], [])
    t3 = (cond_cols + ["parameter", "coverage", "n_used"], [])
    t4 = (cond_cols + ["parameter", "power", "n_used"], [])
    supp = (cond_cols + ["intercept_bias", "intercept_coverage", "n_used"], [])
    for m in metrics:
        base = [m.condition, m.estimator]
        t1[1].append(base + [m.replications, m.convergence_rate, m.sufficient_ess_rate])
        for par in ("alpha1", "alpha2"):
            p = m.parameters[par]
            t2[1].append(base + [par, p.relative_bias_pct, p.n_used])
            t3[1].append(base + [par, p.coverage, p.n_used])
            t4[1].append(base + [par, p.power, p.n_used])
        ic = m.parameters["intercept"]
        supp[1].append(base + [ic.bias, ic.coverage, ic.n_used])
    return {
        "convergence": t1,
        "relative_bias": t2,
        "coverage": t3,
        "power": t4,
        "intercept_metrics": supp,
    }


@dataclass(frozen=True)
class SleepLikeTruth:
    """Generating values for :func:`sleep_like_dataset`."""

    tib_mean: float = 9.04
    sigma_mu: float = 0.70
    gamma_shape: float = 11.21
    gamma_rate: float = 8.03
    ssq_intercept: float = -4.21
    ssq_sex: float = 0.86
    ssq_on_sigma: float = 2.06
    ssq_on_mu: float = 1.13
    ssq_residual: float = 2.53
    cesd_intercept: float = 13.46
    cesd_sex: float = 2.97
    cesd_on_ssq: float = 1.42
    cesd_on_sigma: float = -5.00
    cesd_on_mu: float = -1.76
    cesd_residual: float = 7.14

    @property
    def indirect_sigma(self) -> float:
        return self.ssq_on_sigma * self.cesd_on_ssq

    @property
    def indirect_mu(self) -> float:
        return self.ssq_on_mu * self.cesd_on_ssq


def sleep_like_dataset(rng: np.random.Generator, n_subjects: int = 140, max_days: int = 14,
                       truth: SleepLikeTruth = SleepLikeTruth()):
    """Synthetic diary data shaped like a two-week sleep study.

    Each subject has between 1 and ``max_days`` nightly time-in-bed values
    (most subjects near the full two weeks), a sex code (1/2), a sleep
    quality score that depends on latent TIB variability and mean, and a
    depression score that depends on sleep quality and the latent terms.
    Returns ``(repeated, between_fit, between_mediation, truth)``; the first
    between table holds sleep quality as the outcome, the second holds
    depression as the outcome and sleep quality as the mediator.
    """
    n = n_subjects
    # per-subject missingness propensity; skewed so most diaries are near complete
    missed = rng.binomial(max_days - 1, rng.beta(0.6, 4.0, n))
    days = max_days - missed
    days[0], days[1] = 1, max_days  # pin the extremes of the 1..max_days range
    mu = rng.normal(truth.tib_mean, truth.sigma_mu, n)
    sigma = rng.gamma(truth.gamma_shape, 1.0 / truth.gamma_rate, n)
    subject = np.repeat(np.arange(n), days)
    tib = rng.normal(mu[subject], sigma[subject])
    sex = rng.integers(1, 3, n).astype(float)
    ssq = rng.normal(truth.ssq_intercept + truth.ssq_sex * sex + truth.ssq_on_sigma * sigma
                     + truth.ssq_on_mu * mu, truth.ssq_residual)
    cesd = rng.normal(truth.cesd_intercept + truth.cesd_sex * sex + truth.cesd_on_ssq * ssq
                      + truth.cesd_on_sigma * sigma + truth.cesd_on_mu * mu, truth.cesd_residual)
    labels = tuple(f"s{j + 1:03d}" for j in range(n))
    repeated = RepeatedData(subject, tib, subject_labels=labels)
    fit_between = BetweenData(ssq, None, sex[:, None], covariate_names=("sex",))
    med_between = BetweenData(cesd, ssq, sex[:, None], covariate_names=("sex",))
    return repeated, fit_between, med_between, truth
