"""End-to-end model fitting: initialization, sampling, diagnostics and summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import BetweenData, Design, PriorConfig, RepeatedData
from .errors import ConfigError
from .diagnostics import DiagnosticsReport, convergence_report
from .inference import ParameterSummary, indirect_effect, summarize
from .model import VariabilityModel, initialize
from .sampler import ChainConfig, PosteriorDraws, chain_rng, run_chains

FOCAL = "Yalpha[1]"


@dataclass
class FitResult:
    model: VariabilityModel
    config: ChainConfig
    draws: PosteriorDraws
    report: DiagnosticsReport
    summaries: list
    indirect_effects: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.report.converged

    def summary(self, name: str) -> ParameterSummary:
        for s in self.summaries:
            if s.name == name:
                return s
        raise KeyError(name)


def indirect_paths(design: Design, labels: dict | None = None) -> list[tuple[str, str, str]]:
    """``(label, a_name, b_name)`` for each predictor -> mediator -> outcome path."""
    if not design.mediation:
        return []
    labels = labels or {}
    value = labels.get("value", "V")
    med = labels.get("mediator", "M")
    out = labels.get("outcome", "Y")
    paths = [(f"v{value} -> {med} -> {out}", "Malpha[1]", "YM")]
    if design.use_latent_mean:
        paths.append((f"m{value} -> {med} -> {out}", "Malpha[2]", "YM"))
    return paths


def starting_points(model: VariabilityModel, config: ChainConfig) -> list[np.ndarray]:
    """One jittered data-driven start per chain, from the chain's init stream."""
    return [
        model.layout.unconstrain(
            initialize(model.repeated, model.between, model.design, rng=chain_rng(config.seed, c, 1))
        )
        for c in range(config.chains)
    ]


def fit(repeated: RepeatedData, between: BetweenData, design: Design | None = None,
        config: ChainConfig | None = None, priors: PriorConfig | None = None,
        ci_level: float = 0.95, focal: str = FOCAL, labels: dict | None = None,
        n_jobs: int = 1) -> FitResult:
    design = design or Design()
    config = config or ChainConfig()
    model = VariabilityModel(repeated, between, design, priors)
    if focal not in model.param_names:
        raise ConfigError(f"unknown focal parameter {focal!r}")

    def reinit(rng):
        return model.layout.unconstrain(initialize(repeated, between, design, rng=rng))

    draws = run_chains(model, config, starting_points(model, config), names=model.param_names,
                       transform=model.constrain_draws, reinit=reinit, n_jobs=n_jobs)
    report = convergence_report(draws, focal)
    summaries = [summarize(draws.pooled(name), ci_level, name=name) for name in draws.names]
    indirect = [
        indirect_effect(draws.pooled(a), draws.pooled(b), ci_level, name=label)
        for label, a, b in indirect_paths(design, labels)
    ]
    return FitResult(model, config, draws, report, summaries, indirect)
