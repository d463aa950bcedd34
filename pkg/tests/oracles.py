"""Independent reference implementations used by the test suite."""
import itertools
import math

import numpy as np
from scipy.stats import rankdata


def random_block_scene(rng, h=50, w=50, max_blocks=15, max_side=8):
    """Random union of axis-aligned building blocks and a free source cell."""
    bld = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(3, max_blocks)):
        bh, bw = rng.integers(1, max_side + 1, 2)
        i, j = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        bld[i:i + bh, j:j + bw] = True
    while True:
        src = (int(rng.integers(0, h)), int(rng.integers(0, w)))
        if not bld[src]:
            return bld, src


def _runs(b):
    b = np.asarray(b, dtype=bool)
    return int(b[0]) + int((b[1:] & ~b[:-1]).sum())


def sampled_runs(bld, src, dst, step=0.1):
    """Building runs seen by point samples every ``step`` cells along the segment."""
    (r0, c0), (r1, c1) = src, dst
    n = max(1, math.ceil(math.hypot(r1 - r0, c1 - c0) / step))
    t = np.linspace(0.0, 1.0, n + 1)
    rr = np.floor(r0 + (r1 - r0) * t + 0.5).astype(int)
    cc = np.floor(c0 + (c1 - c0) * t + 0.5).astype(int)
    return _runs(bld[rr, cc])


def crossed_cells(src, dst):
    """Cells whose open box meets the segment in positive length, by slab clipping."""
    (r0, c0), (r1, c1) = src, dst
    if (r0, c0) == (r1, c1):
        return [(r0, c0)]
    ii, jj = np.meshgrid(np.arange(min(r0, r1), max(r0, r1) + 1),
                         np.arange(min(c0, c1), max(c0, c1) + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    ta = np.zeros(ii.size)
    tb = np.ones(ii.size)
    ok = np.ones(ii.size, dtype=bool)
    for p0, d, k in ((r0, r1 - r0, ii), (c0, c1 - c0, jj)):
        if d == 0:
            ok &= k == p0
        else:
            a, b = (k - 0.5 - p0) / d, (k + 0.5 - p0) / d
            ta = np.maximum(ta, np.minimum(a, b))
            tb = np.minimum(tb, np.maximum(a, b))
    keep = ok & (tb - ta > 1e-12)
    order = np.argsort(ta[keep], kind="stable")
    return list(zip(ii[keep][order].tolist(), jj[keep][order].tolist()))


def exact_runs(bld, src, dst):
    cells = crossed_cells(src, dst)
    return _runs([bld[c] for c in cells])


def knn_scan(points, values, query, k):
    """Exhaustive scan: sort every anchor by (squared distance, index)."""
    out = []
    for q in query:
        d = [((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2, i) for i, p in enumerate(points)]
        d.sort()
        out.append(sum(values[i] for _, i in d[:k]) / k)
    return np.array(out)


def ranksum_exact(a, b):
    """Two-sided rank-sum p by enumerating every assignment of pooled ranks."""
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n = len(a)
    mean = n * (len(pooled) + 1) / 2.0
    obs = abs(ranks[:n].sum() - mean)
    hits = total = 0
    for combo in itertools.combinations(range(len(pooled)), n):
        total += 1
        hits += abs(ranks[list(combo)].sum() - mean) >= obs - 1e-9
    return hits / total
