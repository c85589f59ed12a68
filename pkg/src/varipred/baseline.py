"""Classical variability estimators and the ISD regression comparator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import BetweenData, RepeatedData, subject_moments
from .errors import CollinearityError, DataError


@dataclass(frozen=True)
class OlsFit:
    coefs: np.ndarray
    standard_errors: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    residual_sd: float
    df: int
    names: tuple = ()

    def index(self, name: str) -> int:
        return self.names.index(name)


def _finite_vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise DataError(f"{what} contains non-finite values")
    return v


def isd(series) -> float:
    """Sample standard deviation (``n - 1`` denominator) of one subject's series."""
    x = _finite_vector(series, "series")
    if x.size < 2:
        raise DataError("undefined ISD: fewer than 2 observations", n=x.size)
    return float(np.std(x, ddof=1))


def detrended_isd(series, covariates) -> float:
    """ISD of the residuals from regressing ``series`` on an intercept plus ``covariates``.

    The residual SD uses ``n - 1`` like :func:`isd`, so a series that is an
    exact linear function of the covariates yields 0.
    """
    y = _finite_vector(series, "series")
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise DataError("covariates and series differ in length", rows=x.shape[0], n=y.size)
    design = np.column_stack([np.ones(y.size), x])
    if y.size < 2:
        raise DataError("undefined ISD: fewer than 2 observations", n=y.size)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    resid = resid - resid.mean()
    return float(np.sqrt(np.sum(resid**2) / (y.size - 1)))


def rmssd(series, times=None) -> float:
    """Root mean square of successive differences.

    ``series`` may contain NaN for missed assessments. With ``times``
    (integer assessment indices) only pairs one step apart count, so a gap
    in the schedule breaks the pair even if the vector has no NaN. Without
    ``times`` neighbours in the vector are paired.
    """
    x = np.asarray(series, dtype=float).ravel()
    if times is None:
        t = np.arange(x.size)
    else:
        t = np.asarray(times).ravel()
        if t.size != x.size:
            raise DataError("times and series differ in length", times=t.size, n=x.size)
        if np.any(np.diff(t) <= 0):
            raise DataError("times must be strictly increasing")
    ok = np.isfinite(x)
    pair = ok[1:] & ok[:-1] & (np.diff(t) == 1)
    if not np.any(pair):
        raise DataError("undefined RMSSD: no successive pair of observations")
    d = np.diff(x)[pair]
    return float(np.sqrt(np.mean(d * d)))


def ols_fit(x, y, ci_level: float = 0.95, names: tuple = ()) -> OlsFit:
    """Least squares via a QR decomposition with Student-t confidence intervals.

    ``x`` must already contain the intercept column.
    """
    if not 0.0 < ci_level < 1.0:
        raise ValueError(f"ci_level must lie in (0, 1), got {ci_level}")
    x = np.asarray(x, dtype=float)
    y = _finite_vector(y, "outcome")
    if x.ndim != 2 or x.shape[0] != y.size:
        raise DataError("design matrix and outcome have inconsistent shapes",
                        design=x.shape, n=y.size)
    n, k = x.shape
    if n <= k:
        raise DataError("need more rows than columns", rows=n, columns=k)
    if not np.all(np.isfinite(x)):
        raise DataError("design matrix contains non-finite values")
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, k) * np.finfo(float).eps * diag.max():
        raise CollinearityError("collinear design", columns=k)
    coefs = np.linalg.solve(r, q.T @ y)
    resid = y - x @ coefs
    df = n - k
    sigma2 = float(resid @ resid) / df
    r_inv = np.linalg.solve(r, np.eye(k))
    se = np.sqrt(sigma2 * np.sum(r_inv**2, axis=1))
    half = stats.t.ppf(0.5 + ci_level / 2.0, df) * se
    return OlsFit(coefs=coefs, standard_errors=se, ci_low=coefs - half, ci_high=coefs + half,
                  residual_sd=float(np.sqrt(sigma2)), df=df, names=tuple(names))


def isd_model(repeated: RepeatedData, between: BetweenData, ci_level: float = 0.95,
              use_mean: bool = True) -> OlsFit:
    """Regress the outcome on intercept, between covariates, raw ISDs and subject means."""
    if between.n_subjects != repeated.n_subjects:
        raise DataError("subject counts differ", within=repeated.n_subjects,
                        between=between.n_subjects)
    counts = repeated.counts()
    short = np.flatnonzero(counts < 2)
    if short.size:
        labels = repeated.subject_labels or tuple(range(repeated.n_subjects))
        listing = ", ".join(str(labels[j]) for j in short[:20])
        more = "" if short.size <= 20 else f" (+{short.size - 20} more)"
        raise DataError(f"ISD undefined for subjects with fewer than 2 observations: {listing}{more}",
                        n_subjects=int(short.size))
    mom = subject_moments(repeated.subject, repeated.value, repeated.n_subjects)
    cols = [between.design_matrix(), mom.sds[:, None]]
    names = ["(Intercept)", *between.covariate_names, "ISD"]
    if use_mean:
        cols.append(mom.means[:, None])
        names.append("mean")
    return ols_fit(np.hstack(cols), between.outcome, ci_level=ci_level, names=tuple(names))
