"""Command-line front end.

Exit status: 0 for a converged fit (or any successful non-sampling
command), 2 for a run that completed without converging, 1 for errors.
Errors go to standard error as ``error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import __version__
from .baseline import isd, isd_model, rmssd
from .csvio import Dataset, fmt, ingest, read_table, write_rows
from .data import Design, DesignKind, subject_moments
from .diagnostics import convergence_report
from .errors import ConfigError, DataError, VariError
from .fit import FOCAL, FitResult, fit
from .plots import render_figures, write_plot_data
from .sampler import ChainConfig, PosteriorDraws
from . import simulation as sim

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- JSON output

def _json_value(v, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f'{pad}{_json_string(str(k))}: {_json_value(x, indent, level + 1)}'
                 for k, x in v.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple)):
        if not v:
            return "[]"
        items = [pad + _json_value(x, indent, level + 1) for x in v]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt(v) if math.isfinite(v) else "null"
    return _json_string(str(v))


def _json_string(s: str) -> str:
    import json

    return json.dumps(s, ensure_ascii=False)


def dump_json(path, obj) -> None:
    """JSON with every float written to 17 significant digits; non-finite as null."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_json_value(obj, 2, 0) + "\n")


# ---------------------------------------------------------------- labels

def describe(name: str, data: Dataset) -> tuple[str, str]:
    """Block and human-readable label for a parameter name."""
    rep, bet, lab = data.repeated, data.between, data.labels
    value = lab.get("value", "V")
    outcome = lab.get("outcome", "Y")
    mediator = lab.get("mediator", "M")
    stem, _, idx = name.partition("[")
    i = int(idx[:-1]) if idx else 0
    if stem == "VB":
        return value, "Intercept" if i == 1 else rep.covariate_names[i - 2]
    if stem in ("sigma_U", "shape", "rate"):
        return value, {"sigma_U": "sigma_mu", "shape": "Gamma shape", "rate": "Gamma rate"}[stem]
    if stem in ("Est_U", "Est_Sigma"):
        kind = "m" if stem == "Est_U" else "v"
        return value, f"{kind}{value}[{rep.subject_labels[i - 1]}]"
    for prefix, block in (("Y", outcome), ("M", mediator)):
        if stem == f"{prefix}B":
            return block, "Intercept" if i == 1 else bet.covariate_names[i - 2]
        if stem == f"{prefix}alpha":
            return block, f"v{value}" if i == 1 else f"m{value}"
        if stem == f"sigma_{prefix}":
            return block, "residual"
    if stem == "YM":
        return outcome, mediator
    return "", name


# ---------------------------------------------------------------- commands

def _chain_config(args) -> ChainConfig:
    return ChainConfig(chains=args.chains, warmup=args.warmup, total_post_warmup=args.iter,
                       thin=args.thin, seed=args.seed)


def _summary_rows(result: FitResult, data: Dataset):
    rows = []
    for s, (name, rhat, ess) in zip(result.summaries, result.report.rows()):
        block, label = describe(name, data)
        rows.append({
            "name": name, "block": block, "label": label, "mean": s.mean, "median": s.median,
            "sd": s.sd, "ci_low": s.ci_low, "ci_high": s.ci_high, "p_value": s.p_value,
            "rhat": rhat, "ess": ess,
        })
    return rows


def _indirect_rows(result: FitResult):
    return [{"name": s.name, "mean": s.mean, "median": s.median, "sd": s.sd,
             "ci_low": s.ci_low, "ci_high": s.ci_high, "p_value": s.p_value}
            for s in result.indirect_effects]


def write_draws(path, draws: PosteriorDraws) -> None:
    def rows():
        for c in range(draws.n_chains):
            for i in range(draws.n_iterations):
                yield (c + 1, i + 1, *draws.draws[c, i])

    write_rows(path, ("chain", "iteration", *draws.names), rows())


def read_draws(path) -> PosteriorDraws:
    t = read_table(path, "draws")
    if t.header[:2] != ("chain", "iteration") or len(t.header) < 3:
        raise DataError("draws file needs columns chain,iteration,<parameter>...")
    try:
        chain = np.array([int(r[0]) for _, r in t.rows])
        vals = np.array([[float(x) for x in r[2:]] for _, r in t.rows])
    except ValueError as exc:
        raise DataError(f"unparseable value in draws file: {exc}") from None
    ids = sorted(set(chain.tolist()))
    per = [vals[chain == c] for c in ids]
    if len({p.shape[0] for p in per}) != 1:
        raise DataError("chains in draws file differ in length")
    arr = np.stack(per)
    return PosteriorDraws(names=list(t.header[2:]), draws=arr,
                          divergence_count=np.zeros(len(ids), dtype=int))


def run_fit(args, mediation: bool) -> int:
    kind = DesignKind.V_TO_M_TO_Y if mediation else DesignKind(args.design)
    design = Design(kind, use_latent_mean=args.use_latent_mean)
    data = ingest(args.within, args.between, mediation=design.mediation,
                  within_covariates=args.within_covariates,
                  between_covariates=args.between_covariates)
    config = _chain_config(args)
    result = fit(data.repeated, data.between, design, config, ci_level=args.ci,
                 focal=args.focal, labels=data.labels, n_jobs=args.jobs)
    out = args.out
    os.makedirs(out, exist_ok=True)
    rep = result.report
    summary = {
        "model": "variability",
        "design": {"kind": design.kind.value, "use_latent_mean": design.use_latent_mean,
                   "focal": args.focal, "ci_level": args.ci},
        "converged": rep.converged,
        "n_subjects": data.repeated.n_subjects,
        "n_observations": data.repeated.n_obs,
        "sampler": {"chains": config.chains, "warmup": config.warmup,
                    "total_post_warmup": config.total_post_warmup, "thin": config.thin,
                    "seed": config.seed, "retained_per_chain": config.retained_per_chain},
        "parameters": _summary_rows(result, data),
    }
    if design.mediation:
        summary["indirect_effects"] = _indirect_rows(result)
    summary["diagnostics"] = {"max_rhat": rep.max_rhat, "min_ess": rep.min_ess,
                              "focal_ess": rep.focal_ess, "focal_ess_ok": rep.focal_ess_ok}
    if args.format == "json":
        dump_json(os.path.join(out, "summary.json"), summary)
    else:
        cols = ("name", "block", "label", "mean", "median", "sd", "ci_low", "ci_high",
                "p_value", "rhat", "ess")
        rows = [[r[c] for c in cols] for r in summary["parameters"]]
        rows += [[r["name"], "indirect", r["name"], r["mean"], r["median"], r["sd"],
                  r["ci_low"], r["ci_high"], r["p_value"], math.nan, math.nan]
                 for r in summary.get("indirect_effects", [])]
        write_rows(os.path.join(out, "summary.csv"), cols, rows)
    write_rows(os.path.join(out, "diagnostics.csv"), ("parameter", "rhat", "ess"), rep.rows())
    d = result.draws
    write_rows(os.path.join(out, "sampler.csv"),
               ("chain", "step_size", "divergences", "mean_accept_stat", "mean_tree_depth"),
               [(c + 1, d.step_size[c], d.divergence_count[c], float(np.mean(d.accept_stat[c])),
                 float(np.mean(d.tree_depth[c]))) for c in range(d.n_chains)])
    if args.draws:
        write_draws(os.path.join(out, "draws.csv"), d)
    plot_data = write_plot_data(out, result, data.repeated.subject_labels, args.ci)
    if args.figures:
        render_figures(out, plot_data, args.figures)
    status = "converged" if rep.converged else "NOT converged"
    print(f"{status}: max Rhat {rep.max_rhat:.4f}, min ESS {rep.min_ess:.1f}, "
          f"focal {args.focal} ESS {rep.focal_ess:.1f}; outputs in {out}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def run_baseline(args) -> int:
    data = ingest(args.within, args.between, within_covariates=args.within_covariates,
                  between_covariates=args.between_covariates)
    rep = data.repeated
    os.makedirs(args.out, exist_ok=True)
    mom = subject_moments(rep.subject, rep.value, rep.n_subjects)
    rows = []
    for j, label in enumerate(rep.subject_labels):
        series = rep.series(j)
        s_isd = isd(series) if series.size >= 2 else math.nan
        s_rmssd = rmssd(series) if series.size >= 2 else math.nan
        rows.append((label, series.size, mom.means[j], s_isd, s_rmssd))
    write_rows(os.path.join(args.out, "subject_stats.csv"),
               ("id", "n", "mean", "isd", "rmssd"), rows)
    f = isd_model(rep, data.between, ci_level=args.ci)
    coef_rows = [
        {"name": n, "estimate": f.coefs[i], "se": f.standard_errors[i],
         "ci_low": f.ci_low[i], "ci_high": f.ci_high[i]}
        for i, n in enumerate(f.names)
    ]
    dump_json(os.path.join(args.out, "baseline.json"), {
        "model": "isd", "n_subjects": rep.n_subjects, "n_observations": rep.n_obs,
        "ci_level": args.ci, "df": f.df, "residual_sd": f.residual_sd,
        "parameters": coef_rows,
    })
    print(f"ISD model fitted on {rep.n_subjects} subjects; outputs in {args.out}")
    return EXIT_OK


def run_diagnose(args) -> int:
    draws = read_draws(args.draws_file)
    rep = convergence_report(draws, args.focal)
    os.makedirs(args.out, exist_ok=True)
    write_rows(os.path.join(args.out, "diagnostics.csv"), ("parameter", "rhat", "ess"),
               rep.rows())
    dump_json(os.path.join(args.out, "diagnostics.json"), {
        "converged": rep.converged, "max_rhat": rep.max_rhat, "min_ess": rep.min_ess,
        "focal": rep.focal, "focal_ess": rep.focal_ess, "focal_ess_ok": rep.focal_ess_ok,
        "degenerate": rep.degenerate,
    })
    print(f"{'converged' if rep.converged else 'NOT converged'}: max Rhat {rep.max_rhat:.4f}")
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def run_simulate(args) -> int:
    if args.conditions == ["full-grid"]:
        conditions = sim.study_grid()
    else:
        conditions = [sim.parse_condition(k) for k in args.conditions]
    if len({c.key for c in conditions}) != len(conditions):
        raise ConfigError("duplicate condition keys")
    estimator = sim.make_estimator(args.estimator, args.ci)
    records = sim.run_study(conditions, estimator, seed=args.seed,
                            replications=args.replications, n_jobs=args.jobs)
    os.makedirs(args.out, exist_ok=True)
    sim.write_records(os.path.join(args.out, "records.csv"), records)
    for stem, (header, rows) in sim.metric_tables(sim.aggregate(records)).items():
        write_rows(os.path.join(args.out, f"{stem}.csv"), header, rows)
    print(f"{len(conditions)} conditions x {args.replications} replications; outputs in {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_chain_flags(p):
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--iter", type=int, default=4000,
                   help="total post-warmup iterations across chains, before thinning")
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for chains")


def _add_data_flags(p):
    p.add_argument("within", help="CSV with columns id,value[,covariate...]")
    p.add_argument("between", help="CSV with columns id,outcome[,mediator][,covariate...]")
    p.add_argument("--within-covariates", type=lambda s: [c for c in s.split(",") if c],
                   default=None, metavar="A,B", help="subset of within covariate columns")
    p.add_argument("--between-covariates", type=lambda s: [c for c in s.split(",") if c],
                   default=None, metavar="A,B", help="subset of between covariate columns")
    p.add_argument("--out", default="out")
    p.add_argument("--ci", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varipred", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, helptext in (("fit", "fit the variability model"),
                           ("mediate", "fit the mediation design (V -> M -> Y)")):
        p = sub.add_parser(name, help=helptext)
        _add_data_flags(p)
        _add_chain_flags(p)
        if name == "fit":
            p.add_argument("--design", choices=[k.value for k in DesignKind],
                           default=DesignKind.V_TO_Y.value)
        p.add_argument("--use-latent-mean", action=argparse.BooleanOptionalAction, default=True)
        p.add_argument("--focal", default=FOCAL)
        p.add_argument("--draws", action="store_true", help="also write draws.csv")
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--figures", choices=("svg", "pdf"), default=None,
                       help="render static figures next to the plot data")

    p = sub.add_parser("baseline", help="ISD / RMSSD estimates and the ISD regression")
    _add_data_flags(p)

    p = sub.add_parser("diagnose", help="Rhat and ESS for an existing draws.csv")
    p.add_argument("draws_file")
    p.add_argument("--focal", default=FOCAL)
    p.add_argument("--out", default="out")

    p = sub.add_parser("simulate", help="Monte Carlo study over conditions")
    p.add_argument("conditions", nargs="+",
                   help="'full-grid' or condition keys such as g4-1_N80_k5_a0.5")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--estimator", choices=sim.ESTIMATORS, default="isdm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci", type=float, default=0.95)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for replications")
    p.add_argument("--out", default="out")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "fit":
            if args.design == DesignKind.V_TO_M_TO_Y.value:
                return run_fit(args, mediation=True)
            return run_fit(args, mediation=False)
        if args.command == "mediate":
            return run_fit(args, mediation=True)
        if args.command == "baseline":
            return run_baseline(args)
        if args.command == "diagnose":
            return run_diagnose(args)
        return run_simulate(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
    except VariError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
    except KeyError as exc:
        print(f"error[config]: unknown name {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
