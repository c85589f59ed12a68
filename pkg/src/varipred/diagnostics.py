"""Convergence diagnostics: potential scale reduction and effective sample size."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RHAT_THRESHOLD = 1.1
FOCAL_ESS_THRESHOLD = 200.0


def _as_chains(chains, min_chains: int, min_draws: int) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) matrix")
    m, n = x.shape
    if m < min_chains or n < min_draws:
        raise ValueError(
            f"need at least {min_chains} chains of {min_draws} draws, got {m} x {n}"
        )
    return x


def split_chains(chains) -> np.ndarray:
    """Halve every chain (dropping the middle draw when the length is odd)."""
    x = np.asarray(chains, dtype=float)
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def _variance_components(x: np.ndarray) -> tuple[float, float, float]:
    m, n = x.shape
    w = float(x.var(axis=1, ddof=1).mean())
    b = n * float(x.mean(axis=1).var(ddof=1)) if m > 1 else 0.0
    var_plus = (n - 1) / n * w + b / n
    return w, b, var_plus


def psrf(chains, split: bool = False) -> float:
    """Gelman-Rubin potential scale reduction factor.

    ``chains`` is an ``(m, n)`` matrix. Returns ``inf`` when every chain is
    constant (zero within-chain variance); see :func:`is_degenerate`.
    """
    x = _as_chains(chains, 2, 2)
    if split:
        x = split_chains(x)
    w, _, var_plus = _variance_components(x)
    if w == 0.0:
        return math.inf
    return math.sqrt(var_plus / w)


def is_degenerate(chains) -> bool:
    x = np.asarray(chains, dtype=float)
    return bool(np.all(x.var(axis=-1) == 0.0))


def autocorrelation(chains, stop_at_first_nonpositive_pair: bool = False) -> np.ndarray:
    """Multi-chain autocorrelation ``1 - V_t / (2 var+)`` from variograms.

    With ``stop_at_first_nonpositive_pair`` the lag loop ends early and the
    remaining entries are left as ``nan``.
    """
    x = _as_chains(chains, 1, 4)
    _, n = x.shape
    _, _, var_plus = _variance_components(x)
    rho = np.full(n, np.nan)
    rho[0] = 1.0
    denom = 2.0 * var_plus
    for t in range(1, n):
        d = x[:, t:] - x[:, :-t]
        rho[t] = 1.0 - float(np.mean(np.mean(d * d, axis=1))) / denom
        if stop_at_first_nonpositive_pair and t % 2 == 1 and not rho[t - 1] + rho[t] > 0.0:
            break
    return rho


def ess(chains) -> float:
    """Effective sample size with Geyer's initial positive sequence.

    Autocorrelations are summed in adjacent pairs ``rho[2t] + rho[2t+1]``
    until the first non-positive pair; the estimate is clipped to
    ``(0, m * n]``. Constant input returns ``nan``.
    """
    x = _as_chains(chains, 1, 4)
    m, n = x.shape
    if is_degenerate(x):
        return math.nan
    rho = autocorrelation(x, stop_at_first_nonpositive_pair=True)
    total = 0.0
    t = 0
    while 2 * t + 1 < n:
        pair = rho[2 * t] + rho[2 * t + 1]
        if not pair > 0.0:
            break
        total += pair
        t += 1
    tau = -1.0 + 2.0 * total if t > 0 else 1.0
    est = m * n / tau if tau > 0 else math.inf
    return float(min(est, m * n))


def mcse_mean(chains) -> float:
    x = np.asarray(chains, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(ess(x)))


@dataclass
class DiagnosticsReport:
    names: list
    rhat: np.ndarray
    ess: np.ndarray
    focal: str
    converged: bool
    focal_ess_ok: bool
    degenerate: list = field(default_factory=list)

    @property
    def max_rhat(self) -> float:
        return float(np.max(self.rhat))

    @property
    def min_ess(self) -> float:
        return float(np.nanmin(self.ess))

    @property
    def focal_ess(self) -> float:
        return float(self.ess[self.names.index(self.focal)])

    @property
    def focal_rhat(self) -> float:
        return float(self.rhat[self.names.index(self.focal)])

    def rows(self):
        for name, r, e in zip(self.names, self.rhat, self.ess):
            yield name, float(r), float(e)


def convergence_report(draws, focal: str, split: bool = False,
                       rhat_threshold: float = RHAT_THRESHOLD,
                       ess_threshold: float = FOCAL_ESS_THRESHOLD) -> DiagnosticsReport:
    """PSRF and ESS for every parameter in ``draws`` (a ``PosteriorDraws``).

    The fit counts as converged only if every parameter, latent subject
    parameters included, has PSRF below ``rhat_threshold``.
    """
    names = list(draws.names)
    if focal not in names:
        raise KeyError(f"unknown focal parameter {focal!r}")
    arr = draws.draws
    rh = np.empty(len(names))
    es = np.empty(len(names))
    degenerate = []
    for i, name in enumerate(names):
        x = arr[:, :, i]
        if is_degenerate(x):
            degenerate.append(name)
            rh[i] = math.inf
            es[i] = math.nan
            continue
        rh[i] = psrf(x, split=split) if x.shape[0] > 1 else math.nan
        es[i] = ess(x)
    converged = bool(np.all(rh < rhat_threshold))
    focal_ess = es[names.index(focal)]
    return DiagnosticsReport(
        names=names, rhat=rh, ess=es, focal=focal, converged=converged,
        focal_ess_ok=bool(focal_ess >= ess_threshold), degenerate=degenerate,
    )
