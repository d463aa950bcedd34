"""PNG and SVG figures from an evaluation report."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("png", "svg")
_STYLE = {"svg.hashsalt": "rssimap", "font.size": 9}


def _save(fig, stem):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    out = []
    for fmt in FORMATS:
        path = stem.with_suffix("." + fmt)
        # dropping dates and tool versions keeps the files byte-stable
        meta = {"Date": None} if fmt == "svg" else {"Software": None}
        fig.savefig(path, format=fmt, dpi=120, metadata=meta)
        out.append(path)
    plt.close(fig)
    return out


def plot_curves(report, stem):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m, c in report["curves"].items():
            mae = [np.nan if v is None else v for v in c["mae"]]
            ax.plot(c["edges"], mae, marker=".", label=m)
        ax.set_xlabel("distance from base station (m)")
        ax.set_ylabel("cumulative MAE (dB)" if next(iter(report["curves"].values()))["cumulative"]
                      else "MAE per ring (dB)")
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        return _save(fig, stem)


def plot_cdf(report, stem):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m, c in report["cdf"].items():
            ax.step(c["abs_error"], c["fraction"], where="post", label=m)
        ax.set_xlabel("absolute error (dB)")
        ax.set_ylabel("fraction of test points")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        return _save(fig, stem)


def plot_heatmap(report, stem, method):
    h = report["heatmap"][method]
    err = np.asarray(h["error"], dtype=float)
    lim = float(np.abs(err).max()) if err.size else 1.0
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        sc = ax.scatter(h["east"], h["north"], c=err, s=12, cmap="coolwarm", vmin=-lim, vmax=lim)
        fig.colorbar(sc, ax=ax, label="truth - prediction (dB)")
        ax.set_aspect("equal")
        ax.set_xlabel("east (m)")
        ax.set_ylabel("north (m)")
        ax.set_title(method)
        fig.tight_layout()
        return _save(fig, stem)


def plot_report(report, directory):
    """All figures of a report; returns the written paths."""
    d = Path(directory)
    paths = plot_curves(report, d / "mae_vs_distance") + plot_cdf(report, d / "error_cdf")
    for m in report["heatmap"]:
        paths += plot_heatmap(report, d / f"heatmap_{m}", m)
    return paths
