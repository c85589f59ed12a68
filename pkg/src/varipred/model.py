"""Hierarchical location-scale model with latent subject SDs as predictors.

Within person::

    V_ij  ~ N(mu_j + x_ij' gamma, sigma_j)
    mu_j  ~ N(mu_mu, sigma_mu)
    sigma_j ~ Gamma(shape, rate)          # mean = shape / rate

Between person (``v2y``)::

    Y_j ~ N(z_j' beta + a1 * sigma_j + a2 * mu_j, sigma_y)

and for ``v2m2y`` additionally::

    M_j ~ N(z_j' beta_m + am1 * sigma_j + am2 * mu_j, sigma_m)
    Y_j ~ N(z_j' beta + b * M_j + a1 * sigma_j + a2 * mu_j, sigma_y)

Every positive parameter is sampled as its natural log; the log-Jacobian is
part of the density so that draws of the constrained values follow the
posterior under the stated priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import digamma

from . import _model_kernel
from .data import (
    BetweenData,
    Design,
    PriorConfig,
    RepeatedData,
    check_compatible,
    subject_moments,
)
from .errors import DegenerateDataError, DimensionError, NonFiniteError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ParameterState:
    """All model parameters on the constrained scale."""

    mu_mu: float
    sigma_mu: float
    gamma_shape: float
    gamma_rate: float
    mu_j: np.ndarray
    sigma_j: np.ndarray
    v_covariate_coefs: np.ndarray
    y_coefs: np.ndarray
    y_alpha: np.ndarray
    sigma_y: float
    m_coefs: np.ndarray | None = None
    m_alpha: np.ndarray | None = None
    sigma_m: float | None = None
    y_on_m: float | None = None

    def copy(self) -> "ParameterState":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = np.array(v, dtype=float) if isinstance(v, np.ndarray) else v
        return ParameterState(**kw)


@dataclass(frozen=True)
class ParameterLayout:
    """Positions of every block in the flat unconstrained vector."""

    n_subjects: int
    n_within: int
    n_between: int
    design: Design = field(default_factory=Design)

    def __post_init__(self):
        n, p, k = self.n_subjects, self.n_within, self.n_between
        na = self.design.n_alpha
        sizes = [
            ("mu_mu", 1),
            ("log_sigma_mu", 1),
            ("log_shape", 1),
            ("log_rate", 1),
            ("mu_j", n),
            ("log_sigma_j", n),
            ("v_coefs", p),
            ("y_coefs", 1 + k),
        ]
        if self.design.mediation:
            sizes.append(("y_on_m", 1))
        sizes += [("y_alpha", na), ("log_sigma_y", 1)]
        if self.design.mediation:
            sizes += [("m_coefs", 1 + k), ("m_alpha", na), ("log_sigma_m", 1)]
        slices, start = {}, 0
        for name, size in sizes:
            slices[name] = slice(start, start + size)
            start += size
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "size", start)
        logs = [s for name, s in slices.items() if name.startswith("log_")]
        mask = np.zeros(start, dtype=bool)
        for s in logs:
            mask[s] = True
        mask.setflags(write=False)
        object.__setattr__(self, "log_mask", mask)

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def has(self, name: str) -> bool:
        return name in self.slices

    def names(self, within_names=(), between_names=()) -> list[str]:
        """Parameter labels for the constrained vector, in flat order."""
        n, p, k = self.n_subjects, self.n_within, self.n_between
        out = ["VB[1]", "sigma_U", "shape", "rate"]
        out += [f"Est_U[{j + 1}]" for j in range(n)]
        out += [f"Est_Sigma[{j + 1}]" for j in range(n)]
        out += [f"VB[{i + 2}]" for i in range(p)]
        out += [f"YB[{i + 1}]" for i in range(1 + k)]
        if self.design.mediation:
            out.append("YM")
        out += [f"Yalpha[{i + 1}]" for i in range(self.design.n_alpha)]
        out.append("sigma_Y")
        if self.design.mediation:
            out += [f"MB[{i + 1}]" for i in range(1 + k)]
            out += [f"Malpha[{i + 1}]" for i in range(self.design.n_alpha)]
            out.append("sigma_M")
        return out

    def constrain_flat(self, theta: np.ndarray) -> np.ndarray:
        """Exponentiate log coordinates; works on ``(..., size)`` arrays."""
        out = np.array(theta, dtype=float, copy=True)
        out[..., self.log_mask] = np.exp(out[..., self.log_mask])
        return out

    def unconstrain(self, state: ParameterState) -> np.ndarray:
        s = self.slices
        theta = np.empty(self.size)
        theta[s["mu_mu"]] = state.mu_mu
        theta[s["log_sigma_mu"]] = math.log(state.sigma_mu)
        theta[s["log_shape"]] = math.log(state.gamma_shape)
        theta[s["log_rate"]] = math.log(state.gamma_rate)
        theta[s["mu_j"]] = _vec(state.mu_j, self.n_subjects, "mu_j")
        theta[s["log_sigma_j"]] = np.log(_vec(state.sigma_j, self.n_subjects, "sigma_j"))
        theta[s["v_coefs"]] = _vec(state.v_covariate_coefs, self.n_within, "v_covariate_coefs")
        theta[s["y_coefs"]] = _vec(state.y_coefs, 1 + self.n_between, "y_coefs")
        theta[s["y_alpha"]] = _vec(state.y_alpha, self.design.n_alpha, "y_alpha")
        theta[s["log_sigma_y"]] = math.log(state.sigma_y)
        if self.design.mediation:
            if state.m_coefs is None or state.sigma_m is None or state.y_on_m is None:
                raise DimensionError("mediation design requires mediation parameters")
            theta[s["y_on_m"]] = state.y_on_m
            theta[s["m_coefs"]] = _vec(state.m_coefs, 1 + self.n_between, "m_coefs")
            theta[s["m_alpha"]] = _vec(state.m_alpha, self.design.n_alpha, "m_alpha")
            theta[s["log_sigma_m"]] = math.log(state.sigma_m)
        return theta

    def constrain(self, theta: np.ndarray) -> ParameterState:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise DimensionError("unconstrained vector has wrong length",
                                 expected=self.size, got=theta.shape)
        s = self.slices
        kw = dict(
            mu_mu=float(theta[0]),
            sigma_mu=math.exp(theta[1]),
            gamma_shape=math.exp(theta[2]),
            gamma_rate=math.exp(theta[3]),
            mu_j=theta[s["mu_j"]].copy(),
            sigma_j=np.exp(theta[s["log_sigma_j"]]),
            v_covariate_coefs=theta[s["v_coefs"]].copy(),
            y_coefs=theta[s["y_coefs"]].copy(),
            y_alpha=theta[s["y_alpha"]].copy(),
            sigma_y=math.exp(theta[s["log_sigma_y"]][0]),
        )
        if self.design.mediation:
            kw.update(
                y_on_m=float(theta[s["y_on_m"]][0]),
                m_coefs=theta[s["m_coefs"]].copy(),
                m_alpha=theta[s["m_alpha"]].copy(),
                sigma_m=math.exp(theta[s["log_sigma_m"]][0]),
            )
        return ParameterState(**kw)


def _vec(x, n: int, what: str) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (n,):
        raise DimensionError(f"{what} has wrong length", expected=n, got=x.shape)
    return x


def _normal_prior(x, mean, sd):
    z = (x - mean) / sd
    lp = -0.5 * LOG_2PI * z.size - z.size * math.log(sd) - 0.5 * float(z @ z)
    return lp, -z / sd


def _half_cauchy(x: float, loc: float, scale: float, log_norm: float):
    """Log density of a Cauchy(loc, scale) truncated to x > 0, and d/dx."""
    z = (x - loc) / scale
    lp = log_norm - math.log(math.pi * scale) - math.log1p(z * z)
    return lp, -2.0 * z / (scale * (1.0 + z * z))


class VariabilityModel:
    """Log posterior and gradient in unconstrained coordinates.

    Instances are immutable after construction and safe to share between
    threads. ``log_density_and_grad`` is the hot path used by the sampler; it
    does not validate its input and returns ``-inf`` for states where the
    density overflows.
    """

    def __init__(
        self,
        repeated: RepeatedData,
        between: BetweenData,
        design: Design | None = None,
        priors: PriorConfig | None = None,
    ):
        design = design or Design()
        priors = priors or PriorConfig()
        check_compatible(repeated, between, design)
        self.repeated = repeated
        self.between = between
        self.design = design
        self.priors = priors
        self.layout = ParameterLayout(
            repeated.n_subjects, repeated.n_covariates, between.n_covariates, design
        )
        n = repeated.n_subjects
        self._subj = repeated.subject
        self._v = repeated.value
        self._x = repeated.covariates
        self._has_x = repeated.n_covariates > 0
        stats = subject_moments(repeated.subject, repeated.value, n)
        self._counts = stats.counts
        self._vbar = stats.means
        # centred sum of squares per subject: sum_i (V_ij - mean_j)^2
        self._ss = np.bincount(
            repeated.subject, weights=(repeated.value - stats.means[repeated.subject]) ** 2,
            minlength=n,
        )
        self._n_obs = repeated.n_obs
        self._z = between.design_matrix()
        self._y = between.outcome
        self._m = between.mediator
        loc, scale = priors.scale_prior_location, priors.scale_prior_scale
        # truncation constant: -log P(Cauchy(loc, scale) > 0)
        self._hc_norm = -math.log(0.5 + math.atan(loc / scale) / math.pi)
        self._names = self.layout.names(repeated.covariate_names, between.covariate_names)
        self.jit_fn = _model_kernel.log_density_and_grad
        self.jit_data = (
            np.ascontiguousarray(self._subj, dtype=np.int64),
            np.ascontiguousarray(self._v),
            np.ascontiguousarray(self._x, dtype=float),
            np.ascontiguousarray(self._counts),
            np.ascontiguousarray(self._vbar),
            np.ascontiguousarray(self._ss),
            np.ascontiguousarray(self._z),
            np.ascontiguousarray(self._y),
            np.ascontiguousarray(self._m if self._m is not None else np.zeros(n)),
            np.array([n, repeated.n_covariates, self._z.shape[1], design.n_alpha,
                      int(design.mediation)], dtype=np.int64),
            np.array([priors.coef_mean, priors.coef_sd, loc, scale, self._hc_norm]),
        )

    @property
    def dim(self) -> int:
        return self.layout.size

    @property
    def param_names(self) -> list[str]:
        return list(self._names)

    def __call__(self, theta):
        return self.jit_fn(theta, self.jit_data)

    def log_density(self, theta: np.ndarray) -> float:
        return self.jit_fn(np.asarray(theta, dtype=float), self.jit_data)[0]

    def log_density_and_grad(self, theta: np.ndarray):
        return self.jit_fn(np.asarray(theta, dtype=float), self.jit_data)

    def reference_log_density_and_grad(self, theta: np.ndarray):
        """Plain numpy evaluation; slower, kept as the readable reference."""
        return self._evaluate(np.asarray(theta, dtype=float), need_grad=True)[:2]

    def terms(self, theta: np.ndarray) -> dict:
        """Individual additive components of the log posterior."""
        return self._evaluate(theta, need_grad=False, with_terms=True)[2]

    def _evaluate(self, theta, need_grad=True, with_terms=False):
        L = self.layout.slices
        pr = self.priors
        n = self.layout.n_subjects
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            grad = np.zeros_like(theta) if need_grad else None
            terms = {}

            mu_mu = theta[0]
            sig_mu = math.exp(theta[1]) if theta[1] < 700 else math.inf
            shape = math.exp(theta[2]) if theta[2] < 700 else math.inf
            rate = math.exp(theta[3]) if theta[3] < 700 else math.inf
            mu = theta[L["mu_j"]]
            lsig = theta[L["log_sigma_j"]]
            sig = np.exp(lsig)
            inv_var = np.exp(-2.0 * lsig)

            # (a) observations
            counts = self._counts
            if self._has_x:
                gam = theta[L["v_coefs"]]
                r = self._v - mu[self._subj] - self._x @ gam
                q = np.bincount(self._subj, weights=r * r, minlength=n)
                if need_grad:
                    w = r * inv_var[self._subj]
                    grad[L["mu_j"]] += np.bincount(self._subj, weights=w, minlength=n)
                    grad[L["v_coefs"]] += self._x.T @ w
            else:
                d = self._vbar - mu
                q = self._ss + counts * d * d
                if need_grad:
                    grad[L["mu_j"]] += counts * d * inv_var
            lp_obs = -0.5 * LOG_2PI * self._n_obs - float(counts @ lsig) - 0.5 * float(q @ inv_var)
            if need_grad:
                grad[L["log_sigma_j"]] += -counts + q * inv_var
            terms["observation"] = lp_obs

            # (b) subject means
            z = (mu - mu_mu) / sig_mu
            lp_mu = -0.5 * LOG_2PI * n - n * theta[1] - 0.5 * float(z @ z)
            if need_grad:
                grad[L["mu_j"]] -= z / sig_mu
                grad[0] += z.sum() / sig_mu
                grad[1] += -n + float(z @ z)
            terms["subject_means"] = lp_mu

            # (c) subject SDs ~ Gamma(shape, rate)
            sum_lsig = float(lsig.sum())
            sum_sig = float(sig.sum())
            log_rate = theta[3]
            lp_gam = n * (shape * log_rate - math.lgamma(shape)) if shape < math.inf else -math.inf
            lp_gam += (shape - 1.0) * sum_lsig - rate * sum_sig
            if need_grad:
                grad[L["log_sigma_j"]] += (shape - 1.0) - rate * sig
                grad[2] += shape * (n * log_rate - n * float(digamma(shape)) + sum_lsig)
                grad[3] += n * shape - rate * sum_sig
            terms["subject_sds"] = lp_gam

            # (d) second-stage regressions
            alpha = theta[L["y_alpha"]]
            pred = self._z @ theta[L["y_coefs"]] + alpha[0] * sig
            if self.design.use_latent_mean:
                pred = pred + alpha[1] * mu
            if self.design.mediation:
                pred = pred + theta[L["y_on_m"]][0] * self._m
            lp_y = self._regression_term(
                self._y, pred, theta[L["log_sigma_y"].start], L["log_sigma_y"], L["y_coefs"], L["y_alpha"], alpha,
                sig, mu, grad, L.get("y_on_m"),
            )
            terms["outcome"] = lp_y
            if self.design.mediation:
                m_alpha = theta[L["m_alpha"]]
                pred_m = self._z @ theta[L["m_coefs"]] + m_alpha[0] * sig
                if self.design.use_latent_mean:
                    pred_m = pred_m + m_alpha[1] * mu
                terms["mediator"] = self._regression_term(
                    self._m, pred_m, theta[L["log_sigma_m"].start], L["log_sigma_m"], L["m_coefs"], L["m_alpha"], m_alpha,
                    sig, mu, grad, None,
                )

            # (e) priors
            lp_prior = 0.0
            for name in ("mu_mu", "v_coefs", "y_coefs", "y_on_m", "y_alpha", "m_coefs", "m_alpha"):
                s = L.get(name)
                if s is None or s.stop == s.start:
                    continue
                lp, g = _normal_prior(theta[s], pr.coef_mean, pr.coef_sd)
                lp_prior += lp
                if need_grad:
                    grad[s] += g
            for name in ("log_sigma_mu", "log_shape", "log_rate", "log_sigma_y", "log_sigma_m"):
                s = L.get(name)
                if s is None:
                    continue
                u = theta[s.start]
                x = math.exp(u) if u < 700 else math.inf
                lp, g = _half_cauchy(x, pr.scale_prior_location, pr.scale_prior_scale,
                                     self._hc_norm)
                lp_prior += lp
                if need_grad:
                    grad[s.start] += x * g
            terms["priors"] = lp_prior

            # (f) log-Jacobian of the exp transforms
            lp_jac = float(theta[1] + theta[2] + theta[3]) + sum_lsig + float(
                theta[L["log_sigma_y"]][0]
            )
            if self.design.mediation:
                lp_jac += float(theta[L["log_sigma_m"]][0])
            if need_grad:
                grad[self.layout.log_mask] += 1.0
            terms["jacobian"] = lp_jac

            total = lp_obs + lp_mu + lp_gam + lp_y + terms.get("mediator", 0.0) + lp_prior + lp_jac
        if not math.isfinite(total):
            total = -math.inf
        elif need_grad and not np.all(np.isfinite(grad)):
            total = -math.inf
        return total, grad, terms

    def _regression_term(self, y, pred, u, s_log, s_coef, s_alpha, alpha, sig, mu, grad, s_b):
        n = y.size
        e = y - pred
        inv_v = math.exp(-2.0 * u)
        ee = float(e @ e)
        lp = -0.5 * LOG_2PI * n - n * u - 0.5 * ee * inv_v
        if grad is not None:
            w = e * inv_v
            grad[s_coef] += self._z.T @ w
            grad[s_alpha.start] += float(sig @ w)
            grad[self.layout.slices["log_sigma_j"]] += alpha[0] * sig * w
            if self.design.use_latent_mean:
                grad[s_alpha.start + 1] += float(mu @ w)
                grad[self.layout.slices["mu_j"]] += alpha[1] * w
            if s_b is not None:
                grad[s_b.start] += float(self._m @ w)
            grad[s_log.start] += -n + ee * inv_v
        return lp

    def validate(self, theta) -> np.ndarray:
        if isinstance(theta, ParameterState):
            theta = self.layout.unconstrain(theta)
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.layout.size,):
            raise DimensionError(
                "state does not match data dimensions", expected=self.layout.size, got=theta.shape
            )
        if not np.all(np.isfinite(theta)):
            bad = [self._names[i] for i in np.flatnonzero(~np.isfinite(theta))[:5]]
            raise NonFiniteError("state has non-finite coordinates", parameters=bad)
        return theta

    def constrain_draws(self, theta: np.ndarray) -> np.ndarray:
        return self.layout.constrain_flat(theta)


def log_posterior(state, repeated, between, design=None, priors=None) -> float:
    """Log posterior density (up to nothing: all constants included).

    ``state`` is either a :class:`ParameterState` or the flat unconstrained
    vector.
    """
    model = VariabilityModel(repeated, between, design, priors)
    theta = model.validate(state)
    return model.log_density(theta)


def grad_log_posterior(state, repeated, between, design=None, priors=None) -> np.ndarray:
    model = VariabilityModel(repeated, between, design, priors)
    theta = model.validate(state)
    return model.log_density_and_grad(theta)[1]


def log_posterior_terms(state, repeated, between, design=None, priors=None) -> dict:
    model = VariabilityModel(repeated, between, design, priors)
    return model.terms(model.validate(state))


def _ols(x: np.ndarray, y: np.ndarray):
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    df = y.size - np.linalg.matrix_rank(x)
    sd = math.sqrt(float(resid @ resid) / df) if df > 0 else 0.0
    if not sd > 0:
        sd = float(np.std(y)) or 1.0
    return coef, sd


def initialize(repeated, between, design=None, rng=None, jitter: float = 0.5) -> ParameterState:
    """Data-driven starting values.

    Subject means and SDs come from the raw series (after removing the
    within-level covariate effects, if any); the gamma hyperparameters are a
    method-of-moments fit to those SDs and the regression blocks are OLS
    fits on them. Subjects with fewer than two observations, or a zero SD,
    start at the pooled within-subject SD. With ``rng`` given, every
    unconstrained coordinate is shifted by ``Uniform(-jitter, jitter)``.
    """
    design = design or Design()
    check_compatible(repeated, between, design)
    n = repeated.n_subjects
    subj, v = repeated.subject, repeated.value
    p = repeated.n_covariates
    gamma = np.zeros(p)
    if p:
        x = repeated.covariates
        counts = np.bincount(subj, minlength=n)
        xbar = np.stack([np.bincount(subj, weights=x[:, c], minlength=n) for c in range(p)], 1)
        xbar /= counts[:, None]
        vbar = np.bincount(subj, weights=v, minlength=n) / counts
        gamma, *_ = np.linalg.lstsq(x - xbar[subj], v - vbar[subj], rcond=None)
        v = v - x @ gamma
    stats = subject_moments(subj, v, n)
    dof = np.maximum(stats.counts - 1, 0)
    ss = np.where(dof > 0, np.nan_to_num(stats.sds) ** 2 * dof, 0.0)
    if dof.sum() == 0 or ss.sum() <= 0:
        raise DegenerateDataError("degenerate repeated data: pooled within-subject SD is zero")
    pooled = math.sqrt(ss.sum() / dof.sum())
    sig = np.where(np.isfinite(stats.sds) & (stats.sds > 0), stats.sds, pooled)
    mu = stats.means.copy()

    mu_mu = float(mu.mean())
    sigma_mu = float(mu.std(ddof=1)) if n > 1 else 0.0
    if not sigma_mu > 0:
        sigma_mu = pooled
    m, var = float(sig.mean()), float(sig.var(ddof=1)) if n > 1 else 0.0
    if not var > 0:
        var = (0.5 * m) ** 2
    shape, rate = m * m / var, m / var

    z = between.design_matrix()
    latent = [sig, mu] if design.use_latent_mean else [sig]
    kw = {}
    if design.mediation:
        med = between.mediator
        coef_m, sd_m = _ols(np.column_stack([z, *latent]), med)
        k = z.shape[1]
        kw.update(m_coefs=coef_m[:k], m_alpha=coef_m[k:], sigma_m=sd_m)
        coef_y, sd_y = _ols(np.column_stack([z, med, *latent]), between.outcome)
        kw.update(y_coefs=coef_y[:k], y_on_m=float(coef_y[k]), y_alpha=coef_y[k + 1:])
    else:
        coef_y, sd_y = _ols(np.column_stack([z, *latent]), between.outcome)
        k = z.shape[1]
        kw.update(y_coefs=coef_y[:k], y_alpha=coef_y[k:])
    state = ParameterState(
        mu_mu=mu_mu, sigma_mu=sigma_mu, gamma_shape=shape, gamma_rate=rate,
        mu_j=mu, sigma_j=sig, v_covariate_coefs=np.asarray(gamma, dtype=float),
        sigma_y=sd_y, **kw,
    )
    if rng is None or jitter == 0:
        return state
    layout = ParameterLayout(n, p, between.n_covariates, design)
    theta = layout.unconstrain(state)
    theta += rng.uniform(-jitter, jitter, size=theta.size)
    return layout.constrain(theta)
