"""Confirmatory statistics for cell grids plus the rank-alignment metrics.

Everything here is procedure, not data: rates over preregistered buckets,
permutation nulls over sign labels, cluster bootstrap and leave-one-out over
task clusters, exact Fisher, Spearman, pairwise AUC, NDCG@frac, Jaccard@frac.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from math import comb

import numpy as np


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class SplitReport:
    bucket: str
    count: int
    rate: float | None  # % of cells with positive shift; None for empty bucket
    mean_delta: float | None
    ci: tuple | None = None
    p_value: float | None = None


def split_rates(cells, predicate):
    """Per-bucket positive-shift rate (% of delta_c > 0) and mean delta.

    predicate(cell) -> bucket label.  Buckets appear in first-seen order.
    """
    if not cells:
        raise ValueError("need at least one cell")
    buckets: dict[str, list] = {}
    for c in cells:
        buckets.setdefault(str(predicate(c)), []).append(c.delta_c)
    out = []
    for label, deltas in buckets.items():
        n = len(deltas)
        if n == 0:
            out.append(SplitReport(bucket=label, count=0, rate=None, mean_delta=None))
            continue
        rate = 100.0 * sum(1 for d in deltas if d > 0) / n
        out.append(SplitReport(bucket=label, count=n, rate=rate,
                               mean_delta=float(np.mean(deltas))))
    return out


def rate_gap_statistic(cells):
    """Positive-shift rate on H_c > 0 cells minus the rate on the rest."""
    pos = [c.delta_c for c in cells if c.H_c > 0]
    rest = [c.delta_c for c in cells if c.H_c <= 0]
    if not pos or not rest:
        return 0.0
    rp = sum(1 for d in pos if d > 0) / len(pos)
    rr = sum(1 for d in rest if d > 0) / len(rest)
    return 100.0 * (rp - rr)


def permutation_null(cells, statistic, n_perm=1000, seed=0):
    """Shuffle H_c labels holding delta_c fixed; add-one one-sided p.

    Returns (observed, null mean, null 95% interval, p).
    """
    if n_perm < 100:
        raise ValueError("need n_perm >= 100")
    observed = statistic(cells)
    labels = [c.H_c for c in cells]
    rng = _rng(seed)
    null = np.empty(n_perm)
    for b in range(n_perm):
        perm = rng.permutation(len(labels))
        shuffled = [replace(c, H_c=labels[perm[i]]) for i, c in enumerate(cells)]
        null[b] = statistic(shuffled)
    ge = int(np.sum(null >= observed))
    p = (1 + ge) / (n_perm + 1)
    lo, hi = np.percentile(null, [2.5, 97.5])
    return float(observed), float(null.mean()), (float(lo), float(hi)), float(p)


def cluster_bootstrap(cells, cluster_key, statistic, n_boot=2000, seed=0):
    """Percentile 95% CI from resampling whole clusters with replacement."""
    clusters: dict[str, list] = {}
    for c in cells:
        clusters.setdefault(str(cluster_key(c)), []).append(c)
    names = sorted(clusters)
    if len(names) < 2:
        raise ValueError("need at least 2 clusters")
    estimate = statistic(cells)
    rng = _rng(seed)
    reps = np.empty(n_boot)
    for b in range(n_boot):
        draw = rng.integers(0, len(names), size=len(names))
        sample = [c for i in draw for c in clusters[names[i]]]
        reps[b] = statistic(sample)
    lo, hi = np.percentile(reps, [2.5, 97.5])
    return float(estimate), (float(lo), float(hi))


def leave_one_out(cells, cluster_key, statistic):
    """Recompute the statistic dropping each cluster; report extrema.

    Returns (rows, (min_name, min_value), (max_name, max_value)) where rows
    is a list of (dropped cluster, value).
    """
    clusters: dict[str, list] = {}
    for c in cells:
        clusters.setdefault(str(cluster_key(c)), []).append(c)
    names = sorted(clusters)
    if len(names) < 2:
        raise ValueError("need at least 2 clusters")
    rows = []
    for name in names:
        rest = [c for other in names if other != name for c in clusters[other]]
        rows.append((name, float(statistic(rest))))
    lo = min(rows, key=lambda r: (r[1], r[0]))
    hi = max(rows, key=lambda r: (r[1], r[0]))
    return rows, lo, hi


def fisher_one_sided(table):
    """Exact one-sided Fisher p for a 2x2 table [[a, b], [c, d]].

    Direction: tests enrichment of the top-left cell (association of row 1
    with column 1); p = P(A >= a) under the hypergeometric null.
    """
    (a, b), (c, d) = table
    if min(a, b, c, d) < 0 or any(int(x) != x for x in (a, b, c, d)):
        raise ValueError("table must hold nonnegative integers")
    a, b, c, d = int(a), int(b), int(c), int(d)
    n = a + b + c + d
    row1, col1 = a + b, a + c
    denom = comb(n, col1)
    p = 0.0
    for x in range(a, min(row1, col1) + 1):
        if col1 - x > n - row1:
            continue
        p += comb(row1, x) * comb(n - row1, col1 - x) / denom
    return float(p)


def _average_ranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Pearson correlation of average-tied ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


def pairwise_auc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(equal) by pair enumeration."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes must be present")
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def ndcg_at_frac(scores, relevance, frac):
    """NDCG over the top ceil(frac*T) by score; linear gain, log2 discount."""
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=np.float64)
    T = scores.shape[0]
    m = int(np.ceil(frac * T))
    disc = 1.0 / np.log2(np.arange(1, m + 1) + 1)
    order = np.lexsort((np.arange(T), -scores))[:m]
    dcg = float(np.sum(rel[order] * disc))
    ideal_order = np.lexsort((np.arange(T), -rel))[:m]
    ideal = float(np.sum(rel[ideal_order] * disc))
    if ideal == 0:
        return 0.0
    return dcg / ideal


def jaccard_at_frac(scores, reference_scores, frac):
    """Jaccard overlap of the top-frac index sets of two score vectors."""
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    s = np.asarray(scores, dtype=np.float64)
    ref = np.asarray(reference_scores, dtype=np.float64)
    T = s.shape[0]
    m = int(np.ceil(frac * T))
    top = lambda v: set(np.lexsort((np.arange(T), -v))[:m].tolist())
    a, b = top(s), top(ref)
    return len(a & b) / len(a | b)
