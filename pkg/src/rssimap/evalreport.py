"""Held-out evaluation: zone MAE, distance curves, error maps, CDFs, rank-sum tests."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ConfigError
from .grid import RadioMap

DEFAULT_RADII = (200.0, 400.0, 800.0)
EXACT_LIMIT = 20
SIGNIFICANCE = 0.01
MARKER = "↓"


@dataclass
class TestPoints:
    """Held-out measurements at grid cells."""

    __test__ = False  # keeps pytest from collecting this class

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64).ravel()
        self.cols = np.asarray(self.cols, dtype=np.int64).ravel()
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if not (self.rows.size == self.cols.size == self.values.size):
            raise ConfigError("test point arrays differ in length")

    @classmethod
    def from_map(cls, rmap: RadioMap):
        return cls(*rmap.points())

    def __len__(self):
        return self.values.size


def _signed_errors(pred: RadioMap, pts: TestPoints, bs_cell, building=None):
    """(distance m, east, north, truth - pred) for usable test points."""
    spec = pred.spec
    ok = (pts.rows >= 0) & (pts.rows < spec.height) & (pts.cols >= 0) & (pts.cols < spec.width)
    if not ok.all():
        raise ConfigError("test points fall outside the prediction grid")
    p = pred.values[pts.rows, pts.cols]
    keep = np.isfinite(p) & np.isfinite(pts.values)
    if building is not None:
        keep &= ~np.asarray(building, dtype=bool)[pts.rows, pts.cols]
    r, c = pts.rows[keep], pts.cols[keep]
    d = spec.cell_size * np.hypot(r - bs_cell[0], c - bs_cell[1])
    east, north = spec.center(r, c)
    return d, east, north, pts.values[keep] - p[keep]


def zone_mae(pred, pts, bs_cell, radii=DEFAULT_RADII, building=None):
    """MAE over test points within each radius (NaN marks an empty zone)."""
    d, _, _, e = _signed_errors(pred, pts, bs_cell, building)
    out = {}
    for r in sorted(float(x) for x in radii):
        sel = d <= r
        out[r] = float(np.abs(e[sel]).mean()) if sel.any() else math.nan
    return out


def mae_vs_distance(pred, pts, bs_cell, bin_width=50.0, building=None, cumulative=True):
    """MAE sampled at bin edges: all points within d, or per annulus."""
    if not bin_width > 0:
        raise ConfigError("bin width must be positive")
    d, _, _, e = _signed_errors(pred, pts, bs_cell, building)
    a = np.abs(e)
    top = float(d.max()) if d.size else 0.0
    edges = bin_width * np.arange(1, max(1, math.ceil(top / bin_width)) + 1)
    mae, counts = [], []
    for k, edge in enumerate(edges):
        sel = d <= edge
        if not cumulative and k:
            sel &= d > edge - bin_width
        counts.append(int(sel.sum()))
        mae.append(float(a[sel].mean()) if sel.any() else math.nan)
    return {"edges": edges.tolist(), "mae": mae, "count": counts, "cumulative": cumulative}


def error_heatmap(pred, pts, bs_cell, radius, building=None):
    """Positions and signed errors (truth - prediction) within ``radius``."""
    d, east, north, e = _signed_errors(pred, pts, bs_cell, building)
    sel = d <= radius
    return {"east": east[sel], "north": north[sel], "error": e[sel]}


def error_cdf(errors):
    """Empirical CDF of absolute errors: (sorted |e|, cumulative fraction)."""
    x = np.sort(np.abs(np.asarray(errors, dtype=np.float64).ravel()))
    if x.size == 0:
        return x, x.copy()
    return x, np.arange(1, x.size + 1) / x.size


def cdf_at(x, f, value):
    """Fraction of absolute errors <= value."""
    k = np.searchsorted(x, value, side="right")
    return float(f[k - 1]) if k else 0.0


def _exact_ranksum_p(ranks, n1, w):
    """Two-sided p from the exact null of the rank sum (handles midranks)."""
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    # dp[k][s] = number of k-subsets with doubled rank sum s
    dp = np.zeros((n1 + 1, total + 1))
    dp[0, 0] = 1.0
    for r in doubled:
        dp[1:, r:] = dp[1:, r:] + dp[:-1, :total + 1 - r]
    dist = dp[n1]
    dist /= dist.sum()
    mean2 = n1 * (len(ranks) + 1)          # doubled null mean
    obs = abs(int(round(2 * w)) - mean2)
    sums = np.arange(total + 1)
    return float(min(1.0, dist[np.abs(sums - mean2) >= obs].sum()))


def wilcoxon_ranksum(a, b, exact=None):
    """Rank-sum statistic of ``a`` and its two-sided p-value.

    Exact null distribution when the pooled size is at most 20 (or when
    ``exact`` forces it), otherwise the normal approximation with tie and
    continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    N = n1 + n2
    ranks = rankdata(np.concatenate([a, b]))
    w = float(ranks[:n1].sum())
    if exact is None:
        exact = N <= EXACT_LIMIT
    if exact:
        return w, _exact_ranksum_p(ranks, n1, w)
    return w, ranksum_normal_p(ranks, n1, w)


def ranksum_normal_p(ranks, n1, w):
    N = len(ranks)
    n2 = N - n1
    mean = n1 * (N + 1) / 2.0
    _, t = np.unique(ranks, return_counts=True)
    ties = float((t ** 3 - t).sum())
    var = n1 * n2 / 12.0 * ((N + 1) - ties / (N * (N - 1)))
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * ndtr(-z)))


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def evaluate(preds, pts, bs_cell, radii=DEFAULT_RADII, building=None, bin_width=50.0,
             heatmap_radius=None, annulus=False):
    """Full report for several methods predicting the same held-out points.

    ``preds`` maps a method name to its predicted RadioMap.  For each
    radius the best method (lowest MAE) is compared with every other by a
    rank-sum test on absolute errors.
    """
    if not preds:
        raise ConfigError("no predictions to evaluate")
    radii = sorted(float(r) for r in radii)
    methods = list(preds)
    table, curves, cdfs, heat, abs_err = {}, {}, {}, {}, {}
    for m in methods:
        d, east, north, e = _signed_errors(preds[m], pts, bs_cell, building)
        abs_err[m] = (d, np.abs(e))
        table[m] = zone_mae(preds[m], pts, bs_cell, radii, building)
        curves[m] = mae_vs_distance(preds[m], pts, bs_cell, bin_width, building, not annulus)
        x, f = error_cdf(e[d <= radii[-1]])
        cdfs[m] = {"abs_error": x.tolist(), "fraction": f.tolist()}
        h = error_heatmap(preds[m], pts, bs_cell, heatmap_radius or radii[0], building)
        heat[m] = {k: np.asarray(v).tolist() for k, v in h.items()}
    best, pvals = {}, {m: {} for m in methods}
    for r in radii:
        scored = [m for m in methods if math.isfinite(table[m][r])]
        if not scored:
            best[r] = None
            continue
        top = min(scored, key=lambda m: (table[m][r], methods.index(m)))
        best[r] = top
        eb = abs_err[top][1][abs_err[top][0] <= r]
        for m in methods:
            em = abs_err[m][1][abs_err[m][0] <= r]
            pvals[m][r] = None if m == top or not em.size else wilcoxon_ranksum(em, eb)[1]
    return {
        "radii": radii,
        "bs_cell": [int(bs_cell[0]), int(bs_cell[1])],
        "n_test": {m: int(abs_err[m][0].size) for m in methods},
        "zone_mae": {m: {f"{r:g}": _finite(v) for r, v in table[m].items()} for m in methods},
        "best": {f"{r:g}": best[r] for r in radii},
        "p_value": {m: {f"{r:g}": pvals[m].get(r) for r in radii} for m in methods},
        "significant": {m: {f"{r:g}": (pvals[m].get(r) is not None and pvals[m][r] < SIGNIFICANCE)
                            for r in radii} for m in methods},
        "curves": {m: {**c, "mae": [_finite(v) for v in c["mae"]]} for m, c in curves.items()},
        "cdf": cdfs,
        "heatmap": heat,
    }


def format_cell(value, significant):
    if value is None:
        return "empty"
    return f"{value:.2f}{MARKER if significant else ''}"


def write_report(report, directory):
    """Write ``report.json`` and ``zone_mae.csv``; both are byte-deterministic."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n")
    keys = [f"{r:g}" for r in report["radii"]]
    with open(d / "zone_mae.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + [f"mae_{k}m" for k in keys] + [f"p_{k}m" for k in keys] + ["table"])
        for m, row in report["zone_mae"].items():
            pv = report["p_value"][m]
            pretty = " | ".join(format_cell(row[k], report["significant"][m][k]) for k in keys)
            w.writerow([m] + ["" if row[k] is None else f"{row[k]:.6f}" for k in keys]
                       + ["" if pv[k] is None else f"{pv[k]:.6g}" for k in keys] + [pretty])
    return d / "report.json"
