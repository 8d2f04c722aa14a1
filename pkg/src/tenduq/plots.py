"""Static figure rendering for pipeline reports.

Figures are drawn with matplotlib and written as SVG next to the delimited
artifacts. The SVG date metadata is stripped and the hash salt pinned so
repeated runs produce stable markup.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .calibrate import PredictiveReport
from .core import ObservationSet
from .influence import InfluenceReport
from .separability import SeparabilityMap

plt.rcParams["svg.hashsalt"] = "tenduq"

__all__ = ["save_predictive_plot", "save_influence_plot", "save_separability_plot"]


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def save_predictive_plot(obs: ObservationSet, report: PredictiveReport, path) -> None:
    """Observations against the posterior-mean prediction with 95% bands."""
    idx = np.arange(len(obs))
    lo = report.pred_mean - 1.96 * report.pred_std
    hi = report.pred_mean + 1.96 * report.pred_std
    fig, ax = plt.subplots(figsize=(9.0, 3.6))
    ax.fill_between(idx, lo, hi, color="#9ecae1", alpha=0.6, label="95% predictive interval")
    ax.plot(idx, report.pred_mean, color="#3182bd", lw=1.2, label="prediction")
    ax.plot(idx, obs.values, "k.", ms=4, label="observations")
    ax.set_xlabel("observation index")
    ax.set_ylabel("strain change (normalized)")
    ax.set_title(f"{report.mode} mode, 95% coverage {report.coverage_95_pct:.0f}%")
    ax.legend(loc="upper right", fontsize=8)
    _save(fig, path)


def save_influence_plot(report: InfluenceReport, path) -> None:
    """Bar charts of normalized influence: global, KDE-marginal, fixed-mean."""
    x = np.arange(len(report.subsets))
    fig, axes = plt.subplots(3, 1, figsize=(8.0, 8.0), sharex=True)
    axes[0].bar(x, report.global_normalized, color="#756bb1")
    axes[0].set_ylabel("global")
    width = 0.8 / len(report.param_names)
    for j, name in enumerate(report.param_names):
        offs = (j - 0.5 * (len(report.param_names) - 1)) * width
        axes[1].bar(x + offs, report.kde_normalized[:, j], width=width, label=name)
        axes[2].bar(x + offs, report.fixed_normalized[:, j], width=width, label=name)
    axes[1].set_ylabel("KDE marginal")
    axes[2].set_ylabel("fixed mean")
    axes[2].set_xticks(x)
    axes[2].set_xticklabels(report.subsets, rotation=45, fontsize=7)
    axes[1].legend(fontsize=7, ncol=min(5, len(report.param_names)))
    axes[0].set_title("normalized influence per observation subset")
    _save(fig, path)


def save_separability_plot(smap: SeparabilityMap, path) -> None:
    """Spatial fields: classification, minimal detectable change, max overlap."""
    xs = np.array([r.x for r in smap.records])
    zs = np.array([r.z for r in smap.records])
    sep = np.array([r.separable for r in smap.records])
    fig, axes = plt.subplots(3, 1, figsize=(8.0, 9.0), sharex=True, sharey=True)

    ax = axes[0]
    if sep.any():
        ax.scatter(xs[sep], zs[sep], marker="o", c="#31a354", s=22, label="separable")
    if (~sep).any():
        ax.scatter(xs[~sep], zs[~sep], marker="x", c="#de2d26", s=22, label="non-separable")
    ax.set_ylabel("z (mm)")
    ax.legend(fontsize=8)
    ax.set_title("sensor separability classification")

    ax = axes[1]
    if sep.any():
        dmin = np.array([r.delta_min for r in smap.records if r.separable])
        sc = ax.scatter(xs[sep], zs[sep], c=dmin, cmap="viridis", s=24)
        fig.colorbar(sc, ax=ax, label="minimal detectable change (mm)")
    ax.set_ylabel("z (mm)")

    ax = axes[2]
    if (~sep).any():
        omax = np.array([r.o_max for r in smap.records if not r.separable])
        sc = ax.scatter(xs[~sep], zs[~sep], c=omax, cmap="magma", vmin=0.0, vmax=1.0, s=24)
        fig.colorbar(sc, ax=ax, label="max overlap")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("z (mm)")
    _save(fig, path)
