"""Log-normal path-loss model: prediction and least-squares fitting."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SingularFitError

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass(frozen=True)
class PathLossParams:
    p0: float
    n: float
    sigma: float = 0.0
    d0: float = 1.0

    def __post_init__(self):
        if not self.d0 > 0:
            raise ConfigError(f"reference distance must be positive, got {self.d0}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")


def predict_rssi(params: PathLossParams, d):
    """Mean received power in dBm at distance ``d`` metres."""
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise ConfigError("distances must be positive")
    out = params.p0 - 10.0 * params.n * np.log10(d / params.d0)
    return float(out) if out.ndim == 0 else out


def design_matrix(d, d0=1.0):
    d = np.asarray(d, dtype=float)
    return np.column_stack([np.ones_like(d), -10.0 * np.log10(d / d0)])


def fit_pathloss(d, rssi, d0=1.0):
    """Least-squares fit of (p0, n) and residual std with n-2 denominator.

    Uses the normal equations, falling back to the pseudo-inverse when
    their condition number exceeds ``COND_LIMIT``.
    """
    d = np.asarray(d, dtype=float).ravel()
    m = np.asarray(rssi, dtype=float).ravel()
    if d.size != m.size:
        raise ConfigError("distance and rssi arrays differ in length")
    if d.size < 2:
        raise SingularFitError("need at least two samples")
    if np.any(~(d > 0)):
        raise ConfigError("distances must be positive")
    A = design_matrix(d, d0)
    if np.ptp(A[:, 1]) == 0:
        raise SingularFitError("all samples share one distance; exponent is not identifiable")
    AtA = A.T @ A
    if np.linalg.cond(AtA) > COND_LIMIT:
        logger.warning("near-singular normal equations, using pseudo-inverse")
        eta = np.linalg.pinv(A) @ m
    else:
        eta = np.linalg.solve(AtA, A.T @ m)
    resid = A @ eta - m
    dof = d.size - 2
    sigma = float(np.sqrt(resid @ resid / dof)) if dof > 0 else 0.0
    return PathLossParams(p0=float(eta[0]), n=float(eta[1]), sigma=sigma, d0=d0)


def write_pathloss_csv(path, rows):
    """``rows`` is an iterable of (bs_id, params, sample_count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bs_id", "n", "sigma_db", "p0_dbm", "sample_count"])
        for bs_id, p, count in rows:
            w.writerow([bs_id, f"{p.n:.4f}", f"{p.sigma:.4f}", f"{p.p0:.4f}", int(count)])
