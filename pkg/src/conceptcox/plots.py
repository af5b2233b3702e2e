"""Static SVG figures for Kaplan-Meier curves and calibration bins.

Figures are written with a fixed hash salt and no date stamp, so identical
inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .evaluation import CalibrationBins, StepFunction

_RC = {"svg.hashsalt": "conceptcox", "svg.fonttype": "none", "font.size": 9}
STRATUM_COLORS = {"high": "#c0392b", "medium": "#e67e22", "low": "#2471a3"}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "conceptcox"})
    return path


def plot_km(curves: Mapping[str, StepFunction], path: str | Path, title: str = "Kaplan-Meier by risk stratum") -> Path:
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5, 3.5))
        ax = fig.add_subplot()
        for name, km in curves.items():
            ax.step(km.times, km.values, where="post", label=name, color=STRATUM_COLORS.get(name))
        ax.set_xlabel("days since index date")
        ax.set_ylabel("event-free probability")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
    return _save(fig, path)


def plot_one_calibration(bins: CalibrationBins, path: str | Path, title: str = "One-calibration") -> Path:
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(4, 4))
        ax = fig.add_subplot()
        top = float(np.nanmax(np.r_[bins.predicted, bins.observed, 0.05]))
        ax.plot([0, top], [0, top], color="0.6", lw=0.8, ls="--")
        ax.plot(bins.predicted, bins.observed, "o-", color="#2471a3", ms=4)
        ax.set_xlabel("predicted event probability")
        ax.set_ylabel("observed (Kaplan-Meier)")
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)


def plot_d_calibration(bins: CalibrationBins, path: str | Path, title: str = "D-calibration") -> Path:
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(4, 3.5))
        ax = fig.add_subplot()
        k = bins.observed.size
        ax.barh(np.arange(k), bins.observed, color="#5d6d7e")
        ax.axvline(1.0 / k, color="#c0392b", lw=0.8, ls="--")
        ax.set_yticks(np.arange(k), [f"{bins.edges[i]:.1f}-{bins.edges[i + 1]:.1f}" for i in range(k)])
        ax.set_xlabel("fraction of patients")
        ax.set_ylabel("predicted survival at observed time")
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)
