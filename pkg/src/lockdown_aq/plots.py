"""SVG line charts for the command-line reports.

Figures are written with a fixed SVG hash salt and without a date stamp so
identical inputs give byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

STYLE = {
    "svg.hashsalt": "lockdown-aq",
    "svg.fonttype": "none",
    "figure.figsize": (8.0, 3.6),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
    "font.size": 9,
}
COLORS = {"measured": "black", "pre-LD": "tab:blue", "LD": "tab:red", "alpha": "tab:purple"}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def series_overlay(
    path, dates, series: Mapping[str, np.ndarray], title: str = "", ylabel: str = "µg/m³",
    shade: tuple | None = None,
) -> Path:
    """Measured and predicted daily series on one axis.  ``shade`` is an
    optional ``(start, end)`` span drawn as a background band."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = pd.DatetimeIndex(dates)
        for name, y in series.items():
            ax.plot(x, np.asarray(y, dtype=float), label=name, color=COLORS.get(name))
        if shade is not None:
            ax.axvspan(pd.Timestamp(shade[0]), pd.Timestamp(shade[1]), color="0.85", zorder=0)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def alpha_series(path, alpha: pd.Series, title: str = "") -> Path:
    """Rolling mixture coefficient over time, on a fixed [0, 1] axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(pd.DatetimeIndex(alpha.index), alpha.to_numpy(dtype=float), color=COLORS["alpha"])
        ax.set_ylim(-0.05, 1.05)
        ax.set_ylabel("LD model weight")
        ax.set_title(title)
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def rmse_by_train_length(path, summary: Mapping[int, Mapping], title: str = "") -> Path:
    """Mean cross-validated RMSE (with one standard deviation) per train length."""
    lengths = sorted(k for k, v in summary.items() if v.get("mean_rmse") is not None)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if lengths:
            mean = np.array([summary[k]["mean_rmse"] for k in lengths], dtype=float)
            std = np.array([summary[k].get("std_rmse") or 0.0 for k in lengths], dtype=float)
            ax.errorbar(lengths, mean, yerr=std, marker="o", capsize=3, color=COLORS["pre-LD"])
        ax.set_xlabel("train length (months)")
        ax.set_ylabel("RMSE")
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
