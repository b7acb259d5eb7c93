"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import stats  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps PNG bytes reproducible
    "savefig.format": "png",
}
_META = {"Software": None}


def _new(width=3.4, height=2.6):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata=_META)
    plt.close(fig)


def predictions_vs_truth(truth, mean, std, path, title=""):
    truth, mean, std = map(np.asarray, (truth, mean, std))
    fig, ax = _new()
    ax.errorbar(truth, mean, yerr=std, fmt="o", ms=2, lw=0.5, alpha=0.6, color="C0")
    lo = float(min(truth.min(), mean.min()))
    hi = float(max(truth.max(), mean.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("observed travel time (s)")
    ax.set_ylabel(r"predicted mean $\pm\sigma$ (s)")
    if title:
        ax.set_title(title)
    _save(fig, path)


def pit_histogram(truth, mean, std, path, bins=10):
    """Probability integral transform; flat means calibrated."""
    u = stats.norm.cdf((np.asarray(truth) - np.asarray(mean)) / np.asarray(std))
    fig, ax = _new()
    ax.hist(u, bins=bins, range=(0, 1), density=True, color="C1", edgecolor="white")
    ax.axhline(1.0, color="k", ls="--", lw=0.8)
    ax.set_xlabel("PIT value")
    ax.set_ylabel("density")
    _save(fig, path)


def cumulative_time(prefix_lens, observed, prior, conditional, path, title=""):
    """Cumulative travel time along one trip with mean +/- std bands.

    ``prior`` and ``conditional`` are sequences of (mean, std) per prefix.
    """
    x = np.asarray(prefix_lens)
    fig, ax = _new()
    for label, series, color in (("prior", prior, "C3"), ("conditional", conditional, "C0")):
        if series is None:
            continue
        m = np.array([s[0] for s in series]) / 60.0
        sd = np.array([s[1] for s in series]) / 60.0
        ax.plot(x, m, color=color, lw=1.2, label=label)
        ax.fill_between(x, m - sd, m + sd, color=color, alpha=0.2, lw=0)
    ax.plot(x, np.asarray(observed) / 60.0, "k.", ms=4, label="observed")
    ax.set_xlabel("links travelled")
    ax.set_ylabel("cumulative time (min)")
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    _save(fig, path)


def embedding_projection(proj, path, color=None, color_label=""):
    proj = np.asarray(proj)
    fig, ax = _new(3.0, 2.8)
    sc = ax.scatter(proj[:, 0], proj[:, 1], c=color, s=6, cmap="viridis")
    if color is not None:
        fig.colorbar(sc, ax=ax, label=color_label)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    _save(fig, path)


def training_curves(report: dict, path):
    ep = [e["epoch"] for e in report["epochs"]]
    fig, ax = _new()
    ax.plot(ep, [e["train_nll"] for e in report["epochs"]], label="train")
    val = [e["val_nll"] for e in report["epochs"]]
    if any(v is not None for v in val):
        ax2 = ax.twinx()
        ax2.plot(ep, val, color="C1", label="validation")
        ax2.set_ylabel("validation NLL")
        ax2.spines["right"].set_visible(True)
    ax.axvline(report.get("best_epoch", 0), color="k", ls=":", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train NLL")
    _save(fig, path)
