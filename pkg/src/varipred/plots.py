"""Plot data behind the diagnostic figures, plus optional static renderings."""

from __future__ import annotations

import os

import numpy as np

from .csvio import write_rows

HIST_BINS = 30


def histogram_rows(values, bins: int = HIST_BINS) -> list[tuple[float, float, int]]:
    """``(low, high, count)`` rows over the finite entries of ``values``."""
    x = np.asarray(values, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return []
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def latent_rows(draws, prefix: str, labels, ci_level: float = 0.95):
    """Posterior median and interval for every ``prefix[j]`` parameter."""
    tail = (1.0 - ci_level) / 2.0
    rows = []
    for j, label in enumerate(labels):
        x = draws.pooled(f"{prefix}[{j + 1}]")
        lo, med, hi = np.quantile(x, [tail, 0.5, 1.0 - tail])
        rows.append((label, float(med), float(lo), float(hi)))
    return rows


def alpha_pair_rows(draws, names):
    rows = []
    cols = [draws.index(n) for n in names]
    for c in range(draws.n_chains):
        for i in range(draws.n_iterations):
            rows.append((c + 1, i + 1, *draws.draws[c, i, cols]))
    return rows


def write_plot_data(out_dir, result, labels, ci_level: float = 0.95) -> dict:
    """Write the CSVs behind the diagnostic and coefficient figures.

    Returns the in-memory rows keyed by file stem so figures can reuse them.
    """
    report, draws = result.report, result.draws
    data = {
        "plot_rhat_hist": histogram_rows(report.rhat),
        "plot_ess_hist": histogram_rows(report.ess),
        "plot_latent_sigma": latent_rows(draws, "Est_Sigma", labels, ci_level),
        "plot_latent_mu": latent_rows(draws, "Est_U", labels, ci_level),
    }
    alpha_names = [n for n in ("Yalpha[1]", "Yalpha[2]") if n in draws]
    data["plot_alpha_pairs"] = alpha_pair_rows(draws, alpha_names)
    headers = {
        "plot_rhat_hist": ("bin_low", "bin_high", "count"),
        "plot_ess_hist": ("bin_low", "bin_high", "count"),
        "plot_latent_sigma": ("id", "median", "ci_low", "ci_high"),
        "plot_latent_mu": ("id", "median", "ci_low", "ci_high"),
        "plot_alpha_pairs": ("chain", "iteration", *alpha_names),
    }
    for stem, rows in data.items():
        write_rows(os.path.join(out_dir, f"{stem}.csv"), headers[stem], rows)
    return data


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "varipred"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _bars(ax, rows, title):
    if rows:
        lows = [r[0] for r in rows]
        widths = [r[1] - r[0] for r in rows]
        ax.bar(lows, [r[2] for r in rows], width=widths, align="edge", color="0.6",
               edgecolor="0.2", linewidth=0.4)
    ax.set_title(title)
    ax.set_ylabel("count")


def _dots(ax, rows, title):
    order = sorted(range(len(rows)), key=lambda i: rows[i][1])
    y = np.arange(len(rows))
    med = np.array([rows[i][1] for i in order])
    lo = np.array([rows[i][2] for i in order])
    hi = np.array([rows[i][3] for i in order])
    ax.hlines(y, lo, hi, color="0.6", linewidth=0.6)
    ax.plot(med, y, "o", color="k", markersize=2)
    ax.set_yticks([])
    ax.set_title(title)


def render_figures(out_dir, data, fmt: str = "svg") -> list[str]:
    """Static diagnostic and coefficient figures; byte-stable for fixed input."""
    plt = _pyplot()
    meta = {"Date": None} if fmt == "svg" else {"CreationDate": None}
    written = []

    fig, axes = plt.subplots(3, 2, figsize=(8, 9))
    _bars(axes[0, 0], data["plot_rhat_hist"], "Rhat")
    _bars(axes[0, 1], data["plot_ess_hist"], "N_Effective")
    sig = data["plot_latent_sigma"]
    mu = data["plot_latent_mu"]
    axes[1, 0].hist([r[1] for r in sig], bins=HIST_BINS, color="0.6", edgecolor="0.2",
                    linewidth=0.4)
    axes[1, 0].set_title("Sigma (posterior medians)")
    axes[1, 1].hist([r[1] for r in mu], bins=HIST_BINS, color="0.6", edgecolor="0.2",
                    linewidth=0.4)
    axes[1, 1].set_title("U (posterior medians)")
    _dots(axes[2, 0], sig, "Est_Sigma")
    _dots(axes[2, 1], mu, "Est_U")
    fig.tight_layout()
    path = os.path.join(out_dir, f"diagnostics.{fmt}")
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    written.append(path)

    pairs = data["plot_alpha_pairs"]
    if pairs and len(pairs[0]) == 4:
        fig, ax = plt.subplots(figsize=(5, 5))
        a1 = np.array([r[2] for r in pairs])
        a2 = np.array([r[3] for r in pairs])
        ax.plot(a1, a2, ".", color="k", markersize=1, alpha=0.3)
        ax.set_xlabel("Yalpha[1] (variability)")
        ax.set_ylabel("Yalpha[2] (mean)")
        fig.tight_layout()
        path = os.path.join(out_dir, f"alpha_pairs.{fmt}")
        fig.savefig(path, format=fmt, metadata=meta)
        plt.close(fig)
        written.append(path)
    return written
