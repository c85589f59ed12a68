"""Posterior summaries, empirical p-values and indirect effects."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ParameterSummary:
    name: str
    mean: float
    median: float
    sd: float
    ci_low: float
    ci_high: float
    p_value: float
    n_draws: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def formatted_p(self) -> str:
        """``p`` as text; a zero p-value is shown as an upper bound ``< 1/draws``."""
        if self.p_value == 0.0 and self.n_draws:
            return f"< {1.0 / self.n_draws:.3g}"
        return f"{self.p_value:.3g}"


def _vector(draws, min_len: int) -> np.ndarray:
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} draws, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("draws contain non-finite values")
    return x


def empirical_pvalue(draws) -> float:
    """``2 * min(P(draw <= 0), P(draw > 0))``, capped at 1.

    A vector of exact zeros is treated as a null effect and gets ``1``.
    """
    x = _vector(draws, 1)
    if np.all(x == 0.0):
        return 1.0
    le = int(np.count_nonzero(x <= 0.0))
    return float(min(1.0, 2.0 * min(le, x.size - le) / x.size))


def summarize(draws, ci_level: float = 0.95, name: str = "") -> ParameterSummary:
    """Mean, median, SD, percentile interval (type-7 quantiles) and p-value."""
    if not 0.0 < ci_level < 1.0:
        raise ValueError(f"ci_level must lie in (0, 1), got {ci_level}")
    x = _vector(draws, 2)
    tail = (1.0 - ci_level) / 2.0
    lo, med, hi = np.quantile(x, [tail, 0.5, 1.0 - tail], method="linear")
    mean = float(np.mean(x))
    return ParameterSummary(
        name=name,
        mean=mean,
        median=float(med),
        sd=float(np.sqrt(np.sum((x - mean) ** 2) / (x.size - 1))),
        ci_low=float(lo),
        ci_high=float(hi),
        p_value=empirical_pvalue(x),
        n_draws=int(x.size),
    )


def indirect_effect(a_draws, b_draws, ci_level: float = 0.95, name: str = "") -> ParameterSummary:
    """Summary of the per-draw product ``a * b``.

    Both inputs must come from the same iterations so the joint posterior,
    including any a-b correlation, is preserved.
    """
    a = np.asarray(a_draws, dtype=float).ravel()
    b = np.asarray(b_draws, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError(f"draw vectors differ in length: {a.size} vs {b.size}")
    return summarize(a * b, ci_level=ci_level, name=name)
