"""Figure rendering for the report paths. All figures go to PNG files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_study", "plot_site_curves", "plot_anomaly"]

_COLORS = {"naive": "#2a9d34", "probit": "#4464ad", "spline": "#e76f51"}


def _save(fig, path):
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_study(rows: list[dict], truth_label: str, path):
    """Bias and RMSE per estimator against the number of visits."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharex=True)
    ns = sorted({r["n"] for r in rows})
    for metric, ax in zip(("bias", "rmse"), axes):
        for est in ("naive", "probit", "spline"):
            vals = [next(r[metric] for r in rows if r["n"] == n and r["estimator"] == est)
                    for n in ns]
            ax.plot(ns, vals, marker="o", color=_COLORS[est], label=est)
        ax.set_xlabel("visits per site")
        ax.set_ylabel(f"{metric} (days)")
        ax.set_xticks(ns)
        ax.axhline(0.0, color="0.8", lw=0.8, zorder=0)
    axes[0].legend(frameon=False)
    fig.suptitle(f"Estimator performance, {truth_label} truth")
    fig.tight_layout()
    _save(fig, path)


def plot_site_curves(curve_rows: list[dict], site_rows: list[dict], path,
                     max_sites: int = 25):
    """Per-site fitted curves with inner-50% bands and the naive estimate."""
    sites = [r["site_id"] for r in site_rows][:max_sites]
    by_site = {}
    for r in curve_rows:
        by_site.setdefault(r["site_id"], []).append(r)
    ncols = min(5, max(1, int(np.ceil(np.sqrt(len(sites))))))
    nrows = int(np.ceil(len(sites) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.1 * nrows),
                             sharex=True, sharey=True, squeeze=False)
    naive_by_site = {r["site_id"]: r.get("naive_day") for r in site_rows}
    for ax, site in zip(axes.ravel(), sites):
        rows = sorted(by_site[site], key=lambda r: r["day"])
        days = [r["day"] for r in rows]
        ax.fill_between(days, [r["f_lower50"] for r in rows],
                        [r["f_upper50"] for r in rows], color="#e76f51", alpha=0.3, lw=0)
        ax.plot(days, [r["f_map"] for r in rows], color="#e76f51", lw=1.2)
        naive = naive_by_site.get(site)
        if naive is not None and not (isinstance(naive, float) and np.isnan(naive)):
            ax.axvline(naive, color="#2a9d34", lw=0.9, ls="--")
        ax.axhline(0.5, color="0.85", lw=0.7, zorder=0)
        ax.set_title(str(site), fontsize=8)
        ax.set_ylim(-0.02, 1.02)
    for ax in axes.ravel()[len(sites):]:
        ax.axis("off")
    fig.suptitle("Fitted bloom curves (MAP, inner-50% band; dashed: first report)")
    fig.tight_layout()
    _save(fig, path)


def plot_anomaly(report, marginal_rows: list[dict], path):
    """Two panels: ranked robust distances with intervals, then the marginal
    curves of flagged sites against the average of the rest."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    order = list(report.ranking)[::-1]  # closest first, anomalous at the right
    idx = {s: j for j, s in enumerate(report.sites)}
    x = np.arange(len(order))
    thirds = np.array_split(x, 3)
    colors = {}
    for block, color in zip(thirds, ("#2a9d34", "#e9a13b", "#7b2d8b")):
        for i in block:
            colors[order[i]] = color
    for i, site in enumerate(order):
        j = idx[site]
        ax1.vlines(i, report.lower50[j], report.upper50[j], color=colors[site], lw=1.4)
        ax1.plot(i, report.map_distance[j], "o", ms=4, color=colors[site])
    ax1.axhline(report.threshold, color="0.6", lw=0.9, ls=":")
    ax1.set_xticks(x)
    ax1.set_xticklabels(order, rotation=90, fontsize=6)
    ax1.set_ylabel("robust distance")
    ax1.set_title("Distance to robust center (dot: MAP draw, line: inner 50%)")

    groups = {}
    for r in marginal_rows:
        groups.setdefault(r["group"], []).append(r)
    for group, rows in sorted(groups.items()):
        rows = sorted(rows, key=lambda r: r["day"])
        days = [r["day"] for r in rows]
        color = "#7b2d8b" if group != "others" else "#e9a13b"
        ax2.fill_between(days, [r["lower50"] for r in rows],
                         [r["upper50"] for r in rows], alpha=0.25, color=color, lw=0)
        ax2.plot(days, [r["f_center"] for r in rows], color=color, lw=1.3,
                 label=group)
    ax2.axhline(0.5, color="0.85", lw=0.7, zorder=0)
    ax2.set_xlabel("day of year")
    ax2.set_ylabel("fraction bloomed")
    ax2.legend(frameon=False, fontsize=7)
    ax2.set_title("Marginal curves: flagged sites vs the rest")
    fig.tight_layout()
    _save(fig, path)
