"""Classical map-reconstruction baselines: linear RBF, kNN and TV in-painting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, SingularFitError
from .grid import GridSpec, RadioMap

logger = logging.getLogger(__name__)

RBF_JITTER = 1e-10
RBF_MAX_ANCHORS = 4000


@dataclass
class AnchorSet:
    east: np.ndarray
    north: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.east = np.asarray(self.east, dtype=float).ravel()
        self.north = np.asarray(self.north, dtype=float).ravel()
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not (self.east.size == self.north.size == self.values.size):
            raise ConfigError("anchor coordinate and value arrays differ in length")
        if self.values.size < 1:
            raise ConfigError("anchor set is empty")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("anchor values must be finite")

    def __len__(self):
        return self.values.size

    @classmethod
    def from_map(cls, rmap: RadioMap):
        rows, cols, vals = rmap.points()
        east, north = rmap.spec.center(rows, cols)
        return cls(east, north, vals)

    @property
    def xy(self):
        return np.column_stack([self.east, self.north])


def _merge_duplicates(anchors: AnchorSet):
    xy, inverse = np.unique(anchors.xy, axis=0, return_inverse=True)
    if xy.shape[0] == len(anchors):
        return anchors
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=anchors.values)
    counts = np.bincount(inverse)
    return AnchorSet(xy[:, 0], xy[:, 1], sums / counts)


def thin_anchors(anchors: AnchorSet, max_anchors=RBF_MAX_ANCHORS):
    """Keep one anchor per cell of the finest square lattice with at most
    ``max_anchors`` occupied cells (the anchor nearest the cell centre)."""
    if len(anchors) <= max_anchors:
        return anchors
    xy = anchors.xy
    lo = xy.min(axis=0)
    span = max(float(np.ptp(xy, axis=0).max()), 1e-9)

    def pick(g):
        size = span / g
        ij = np.minimum(np.floor((xy - lo) / size), g - 1).astype(np.int64)
        key = ij[:, 0] * g + ij[:, 1]
        d = np.hypot(*(xy - lo - (ij + 0.5) * size).T)
        order = np.lexsort((np.arange(len(key)), d, key))
        first = np.ones(order.size, dtype=bool)
        first[1:] = key[order][1:] != key[order][:-1]
        return np.sort(order[first])

    lo_g, hi_g = 1, int(math.isqrt(len(anchors))) + 2
    best = pick(1)
    while lo_g <= hi_g:
        mid = (lo_g + hi_g) // 2
        sel = pick(mid)
        if sel.size <= max_anchors:
            best, lo_g = sel, mid + 1
        else:
            hi_g = mid - 1
    logger.info("thinned %d RBF anchors to %d", len(anchors), best.size)
    return AnchorSet(anchors.east[best], anchors.north[best], anchors.values[best])


class LinearRBF:
    """s(x) = sum_i w_i |x - x_i| + c  with  sum_i w_i = 0."""

    def __init__(self, anchors: AnchorSet, max_anchors=RBF_MAX_ANCHORS):
        anchors = thin_anchors(_merge_duplicates(anchors), max_anchors)
        self.anchors = anchors
        n = len(anchors)
        if n == 1:
            self.weights = np.zeros(1)
            self.const = float(anchors.values[0])
            return
        xy = anchors.xy
        phi = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        system = np.zeros((n + 1, n + 1))
        system[:n, :n] = phi + RBF_JITTER * np.eye(n)
        system[:n, n] = 1.0
        system[n, :n] = 1.0
        rhs = np.append(anchors.values, 0.0)
        try:
            sol = np.linalg.solve(system, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularFitError(f"RBF system is singular: {exc}") from exc
        if not np.all(np.isfinite(sol)):
            raise SingularFitError("RBF system produced non-finite weights")
        self.weights = sol[:n]
        self.const = float(sol[n])

    def __call__(self, east, north, chunk=2048):
        east = np.asarray(east, dtype=float)
        north = np.asarray(north, dtype=float)
        shape = east.shape
        e, n = east.ravel(), north.ravel()
        out = np.empty(e.size)
        ax, ay = self.anchors.east, self.anchors.north
        for s in range(0, e.size, chunk):
            d = np.hypot(e[s:s + chunk, None] - ax[None, :], n[s:s + chunk, None] - ay[None, :])
            out[s:s + chunk] = d @ self.weights + self.const
        return out.reshape(shape)


def rbf_interpolate(anchors: AnchorSet, spec: GridSpec, max_anchors=RBF_MAX_ANCHORS):
    """Dense map from the linear-kernel RBF interpolant of the anchors."""
    rbf = LinearRBF(anchors, max_anchors)
    east, north = spec.centers()
    return RadioMap.dense(spec, rbf(east, north), method="rbf")


def _knn_indices(dist2, k):
    """k nearest columns per row; ties at the k-th distance go to lower index.

    Returned indices are ordered by (distance, index).
    """
    n_rows, n_cols = dist2.shape
    if k == n_cols:
        sel = np.ones_like(dist2, dtype=bool)
    else:
        kth = np.partition(dist2, k - 1, axis=1)[:, k - 1:k]
        less = dist2 < kth
        eq = dist2 == kth
        need = k - less.sum(axis=1, keepdims=True)
        sel = less | (eq & (np.cumsum(eq, axis=1) <= need))
    idx = np.nonzero(sel)[1].reshape(n_rows, k)
    d = np.take_along_axis(dist2, idx, axis=1)
    order = np.argsort(d, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def knn_interpolate(anchors: AnchorSet, spec: GridSpec, k=5, domain="db", chunk=1024):
    """Unweighted mean of the k nearest anchors per cell centre.

    ``domain`` selects averaging in dB (default) or in milliwatts.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(anchors):
        raise ConfigError(f"k={k} exceeds the {len(anchors)} available anchors")
    if domain not in ("db", "mw"):
        raise ConfigError(f"unknown averaging domain {domain!r}")
    east, north = spec.centers()
    e, n = east.ravel(), north.ravel()
    vals = anchors.values if domain == "db" else 10.0 ** (anchors.values / 10.0)
    out = np.empty(e.size)
    for s in range(0, e.size, chunk):
        dx = e[s:s + chunk, None] - anchors.east[None, :]
        dy = n[s:s + chunk, None] - anchors.north[None, :]
        idx = _knn_indices(dx * dx + dy * dy, k)
        out[s:s + chunk] = vals[idx].sum(axis=1) / k
    if domain == "mw":
        out = 10.0 * np.log10(out)
    return RadioMap.dense(spec, out.reshape(spec.shape), method="knn", k=k, domain=domain)


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    """Negative adjoint of :func:`_grad`."""
    d = np.zeros_like(px)
    d[:, 0] += px[:, 0]
    d[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    d[:, -1] -= px[:, -2]
    d[0, :] += py[0, :]
    d[1:-1, :] += py[1:-1, :] - py[:-2, :]
    d[-1, :] -= py[-2, :]
    return d


def total_variation(u):
    gx, gy = _grad(np.asarray(u, dtype=float))
    return float(np.sqrt(gx * gx + gy * gy).sum())


def tv_inpaint(rmap: RadioMap, max_iters=2000, tol=1e-5, min_iters=20):
    """Fill unmasked cells by isotropic-TV minimisation with observed cells fixed.

    Chambolle-Pock iterations with tau = sigma = 1/sqrt(8), started from a
    nearest-observation fill.  The primal-dual sequence itself is not
    monotone in the objective, so the returned map is the lowest-TV feasible
    iterate seen; ``meta["objective"]`` traces that running best per
    iteration.  Iteration stops when the relative change of the raw
    primal objective drops below ``tol`` (after ``min_iters``).
    """
    mask = rmap.mask
    if not mask.any():
        raise ConfigError("TV in-painting needs at least one observed cell")
    f = np.where(mask, rmap.values, 0.0)
    if mask.all():
        return RadioMap.dense(rmap.spec, rmap.values.copy(), method="tv", objective=[], iterations=0)
    idx = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    x = f[idx[0], idx[1]]
    x[mask] = f[mask]
    xbar = x.copy()
    px = np.zeros_like(x)
    py = np.zeros_like(x)
    tau = sigma = 1.0 / math.sqrt(8.0)

    best = x.copy()
    best_e = prev_e = total_variation(x)
    history = [best_e]
    it = 0
    for it in range(1, max_iters + 1):
        gx, gy = _grad(xbar)
        px += sigma * gx
        py += sigma * gy
        norm = np.maximum(1.0, np.sqrt(px * px + py * py))
        px /= norm
        py /= norm
        xn = x + tau * _div(px, py)
        xn[mask] = f[mask]
        xbar = 2.0 * xn - x
        x = xn
        e = total_variation(x)
        if e < best_e:
            best_e = e
            best = x.copy()
        history.append(best_e)
        if it >= min_iters and abs(prev_e - e) <= tol * max(abs(e), 1e-300):
            break
        prev_e = e
    best[mask] = rmap.values[mask]
    return RadioMap.dense(rmap.spec, best, method="tv", objective=history, iterations=it)
