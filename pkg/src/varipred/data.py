"""Containers for within-person and between-person data."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NonFiniteError


def _as_matrix(x, n_rows: int, what: str) -> np.ndarray:
    if x is None:
        return np.zeros((n_rows, 0))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != n_rows:
        raise DimensionError(f"{what} must have {n_rows} rows", shape=x.shape)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return x


def _check_no_constant_columns(x: np.ndarray, names, what: str) -> None:
    for c in range(x.shape[1]):
        col = x[:, c]
        if col.size and np.ptp(col) == 0.0:
            raise DataError(
                f"{what} column {names[c]!r} is constant; intercepts are added implicitly"
            )


def _check_full_rank(x: np.ndarray, what: str) -> None:
    if x.shape[1] == 0:
        return
    design = np.column_stack([np.ones(x.shape[0]), x])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise DataError(f"{what} is rank deficient (collinear design)")


@dataclass(frozen=True, eq=False)
class RepeatedData:
    """Long-format repeated measures ``V_ij``.

    ``subject`` holds dense integer indices ``0..N-1``; ``covariates`` is an
    optional ``(n_obs, p)`` matrix of within-level fixed effects (no constant
    column).
    """

    subject: np.ndarray
    value: np.ndarray
    covariates: np.ndarray | None = None
    covariate_names: tuple = ()
    subject_labels: tuple = ()

    def __post_init__(self):
        subject = np.asarray(self.subject)
        value = np.asarray(self.value, dtype=float)
        if subject.ndim != 1 or value.ndim != 1 or subject.shape != value.shape:
            raise DimensionError(
                "subject and value must be 1-d arrays of equal length",
                subject=subject.shape, value=value.shape,
            )
        if value.size == 0:
            raise DataError("no observations")
        if not np.issubdtype(subject.dtype, np.integer):
            if not np.all(np.mod(subject, 1) == 0):
                raise DataError("subject indices must be integers")
        subject = subject.astype(np.int64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("repeated values contain non-finite entries")
        if subject.min() < 0:
            raise DataError("subject indices must be non-negative")
        n = int(subject.max()) + 1
        counts = np.bincount(subject, minlength=n)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise DataError("subject indices must be dense 0..N-1", missing=missing)
        cov = _as_matrix(self.covariates, value.size, "within covariates")
        names = tuple(self.covariate_names) or tuple(f"x{i + 1}" for i in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise DimensionError("covariate_names length mismatch")
        _check_no_constant_columns(cov, names, "within covariate")
        _check_full_rank(cov, "within covariate matrix")
        labels = tuple(self.subject_labels) or tuple(range(n))
        if len(labels) != n:
            raise DimensionError("subject_labels length mismatch", expected=n)
        for name, val in (("subject", subject), ("value", value), ("covariates", cov)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "subject_labels", labels)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_labels)

    @property
    def n_obs(self) -> int:
        return self.value.size

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.subject, minlength=self.n_subjects)

    def series(self, j: int) -> np.ndarray:
        return self.value[self.subject == j]

    def equals(self, other: "RepeatedData") -> bool:
        return (
            np.array_equal(self.subject, other.subject)
            and np.array_equal(self.value, other.value)
            and np.array_equal(self.covariates, other.covariates)
            and self.covariate_names == other.covariate_names
            and tuple(map(str, self.subject_labels)) == tuple(map(str, other.subject_labels))
        )


@dataclass(frozen=True, eq=False)
class BetweenData:
    """One row per subject: outcome, optional mediator and covariates.

    The intercept is implicit and must not be supplied as a column.
    """

    outcome: np.ndarray
    mediator: np.ndarray | None = None
    covariates: np.ndarray | None = None
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.outcome, dtype=float)
        if y.ndim != 1 or y.size == 0:
            raise DimensionError("outcome must be a non-empty 1-d array")
        if not np.all(np.isfinite(y)):
            raise NonFiniteError("outcome contains missing or non-finite entries")
        m = None
        if self.mediator is not None:
            m = np.asarray(self.mediator, dtype=float)
            if m.shape != y.shape:
                raise DimensionError("mediator length must match outcome", mediator=m.shape)
            if not np.all(np.isfinite(m)):
                raise NonFiniteError("mediator contains missing or non-finite entries")
            m.setflags(write=False)
        cov = _as_matrix(self.covariates, y.size, "between covariates")
        names = tuple(self.covariate_names) or tuple(f"z{i + 1}" for i in range(cov.shape[1]))
        if len(names) != cov.shape[1]:
            raise DimensionError("covariate_names length mismatch")
        _check_no_constant_columns(cov, names, "between covariate")
        y.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "mediator", m)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n_subjects(self) -> int:
        return self.outcome.size

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def design_matrix(self) -> np.ndarray:
        """Intercept column followed by the covariates."""
        return np.column_stack([np.ones(self.n_subjects), self.covariates])

    def equals(self, other: "BetweenData") -> bool:
        same_m = (self.mediator is None and other.mediator is None) or (
            self.mediator is not None
            and other.mediator is not None
            and np.array_equal(self.mediator, other.mediator)
        )
        return (
            np.array_equal(self.outcome, other.outcome)
            and same_m
            and np.array_equal(self.covariates, other.covariates)
            and self.covariate_names == other.covariate_names
        )


class DesignKind(str, enum.Enum):
    V_TO_Y = "v2y"
    V_TO_M_TO_Y = "v2m2y"


@dataclass(frozen=True)
class Design:
    kind: DesignKind = DesignKind.V_TO_Y
    use_latent_mean: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", DesignKind(self.kind))

    @property
    def mediation(self) -> bool:
        return self.kind is DesignKind.V_TO_M_TO_Y

    @property
    def n_alpha(self) -> int:
        return 2 if self.use_latent_mean else 1


@dataclass(frozen=True)
class PriorConfig:
    """Normal priors on locations/coefficients, half-Cauchy on scales."""

    coef_mean: float = 0.0
    coef_sd: float = 1000.0
    scale_prior_location: float = 0.0
    scale_prior_scale: float = 10.0

    def __post_init__(self):
        if not self.coef_sd > 0:
            raise DataError("coef_sd must be positive", coef_sd=self.coef_sd)
        if not self.scale_prior_scale > 0:
            raise DataError(
                "scale_prior_scale must be positive", scale_prior_scale=self.scale_prior_scale
            )


def check_compatible(repeated: RepeatedData, between: BetweenData, design: Design) -> None:
    if repeated.n_subjects != between.n_subjects:
        raise DimensionError(
            "repeated and between data disagree on the number of subjects",
            repeated=repeated.n_subjects, between=between.n_subjects,
        )
    if design.mediation and between.mediator is None:
        raise DataError("mediation design requires a mediator")


@dataclass
class SubjectStats:
    """Per-subject moments used for starting values and the ISD baseline."""

    counts: np.ndarray
    means: np.ndarray
    sds: np.ndarray = field(repr=False)


def subject_moments(subject: np.ndarray, value: np.ndarray, n: int) -> SubjectStats:
    counts = np.bincount(subject, minlength=n).astype(float)
    means = np.bincount(subject, weights=value, minlength=n) / counts
    ss = np.bincount(subject, weights=(value - means[subject]) ** 2, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        sds = np.where(counts > 1, np.sqrt(ss / np.maximum(counts - 1, 1)), np.nan)
    return SubjectStats(counts, means, sds)
