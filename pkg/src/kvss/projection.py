"""Stage III budgeted projection: strict block top-k, token-fill, factorized retention.

Strict block selection keeps k_b = floor(k / p) blocks and leaves a lattice
residual eps_lat = k - p * k_b unspent; token-fill is the diagnostic control
that spends it on the best outside tokens without touching the block ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .access import ProxyBank, ScoreVector, projection_residual
from .contract import BlockPartition, KeptSet, SelectorContract, contract_fingerprint


@dataclass(frozen=True)
class ProjectionReport:
    kept: KeptSet
    k: int
    k_b: int
    eps_lat: int
    slack: int  # unspent tokens after any fill
    fill_tokens: tuple = ()
    eta_proj: float | None = None

    def to_json_doc(self):
        return {
            "k": self.k,
            "k_b": self.k_b,
            "eps_lat": self.eps_lat,
            "slack": self.slack,
            "kept": [int(i) for i in self.kept.indices],
            "provenance": list(self.kept.provenance),
            "fill_tokens": [int(i) for i in self.fill_tokens],
            "eta_proj": self.eta_proj,
            "contract_fingerprint": self.kept.contract_fingerprint,
        }


def _top_blocks(scores, k_b):
    """Indices of the k_b largest block scores, ties to the lower block index."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(s.shape[0]), -s))
    return order[:k_b]


def block_project(block_scores, blocks: BlockPartition, k: int,
                  contract: SelectorContract) -> ProjectionReport:
    """Keep the union of the top k_b = floor(k/p) blocks; record eps_lat."""
    if k > blocks.T:
        raise ValueError(f"budget k={k} exceeds T={blocks.T}")
    p = blocks.p
    k_b = min(k // p, blocks.n_blocks)
    eps_lat = k - p * k_b
    chosen = _top_blocks(getattr(block_scores, "scores", block_scores), k_b)
    kept_idx = np.sort(np.concatenate([blocks.indices(j) for j in chosen])
                       if len(chosen) else np.empty(0, dtype=np.int64))
    kept = KeptSet(indices=kept_idx.astype(np.int64),
                   provenance=tuple("block" for _ in kept_idx),
                   contract_fingerprint=contract_fingerprint(contract))
    # a selected partial last block absorbs part of the residual
    slack = k - len(kept)
    return ProjectionReport(kept=kept, k=k, k_b=k_b, eps_lat=eps_lat, slack=slack)


def token_fill(report: ProjectionReport, token_scores: ScoreVector) -> ProjectionReport:
    """Spend the remaining slack on the best tokens outside the kept blocks.

    Block selection is unchanged by construction; if fewer outside tokens
    exist than slack, all are kept and the residual slack is recorded.
    """
    slack = report.slack
    if slack <= 0:
        return report
    T = len(token_scores)
    outside = np.setdiff1d(np.arange(T), report.kept.indices, assume_unique=False)
    vals = token_scores.values[outside]
    order = np.lexsort((outside, -vals))
    fill = np.sort(outside[order[: slack]])
    merged = np.sort(np.concatenate([report.kept.indices, fill]))
    fill_set = set(int(i) for i in fill)
    old = dict(zip((int(i) for i in report.kept.indices), report.kept.provenance))
    prov = tuple("token_fill" if int(i) in fill_set else old[int(i)] for i in merged)
    kept = KeptSet(indices=merged, provenance=prov,
                   contract_fingerprint=report.kept.contract_fingerprint)
    return replace(report, kept=kept, slack=slack - fill.size,
                   fill_tokens=tuple(int(i) for i in fill))


def attach_residual(report: ProjectionReport, p_T) -> ProjectionReport:
    return replace(report, eta_proj=projection_residual(report.kept, p_T))


def factorized_project(per_slot_scores, slot_budgets, blocks: BlockPartition,
                       contract: SelectorContract) -> ProjectionReport:
    """Per-slot top blocks unioned; overlaps release budget round-robin.

    Each slot independently ranks blocks by its own score vector and claims
    its budget; a block claimed twice frees the later slot to take its
    next-best unclaimed block.  Deterministic in slot order.
    """
    budgets = [int(b) for b in slot_budgets]
    if len(budgets) != len(per_slot_scores):
        raise ValueError("one budget per slot required")
    k_b_total = sum(budgets)
    if k_b_total > blocks.n_blocks:
        raise ValueError(f"slot budgets sum to {k_b_total} > {blocks.n_blocks} blocks")
    orders = [
        list(np.lexsort((np.arange(blocks.n_blocks),
                         -np.asarray(getattr(s, "scores", s), dtype=np.float64))))
        for s in per_slot_scores
    ]
    claimed: list[int] = []
    cursors = [0] * len(budgets)
    remaining = list(budgets)
    # round-robin in slot order until budgets are spent or blocks exhausted
    progress = True
    while progress and len(claimed) < blocks.n_blocks:
        progress = False
        for s in range(len(budgets)):
            if remaining[s] <= 0:
                continue
            while cursors[s] < blocks.n_blocks and int(orders[s][cursors[s]]) in claimed:
                cursors[s] += 1
            if cursors[s] >= blocks.n_blocks:
                remaining[s] = 0
                continue
            claimed.append(int(orders[s][cursors[s]]))
            remaining[s] -= 1
            progress = True
    kept_idx = (np.sort(np.concatenate([blocks.indices(j) for j in claimed]))
                if claimed else np.empty(0, dtype=np.int64))
    kept = KeptSet(indices=kept_idx.astype(np.int64),
                   provenance=tuple("block" for _ in kept_idx),
                   contract_fingerprint=contract_fingerprint(contract))
    k = blocks.p * k_b_total
    return ProjectionReport(kept=kept, k=k, k_b=len(claimed),
                            eps_lat=0, slack=k - len(kept))


def route_question_groups(detector, tags, T, fallback: ProxyBank) -> ProxyBank:
    """Group proxy queries by detected question spans; fall back when empty.

    detector(tags) -> list of (start, end) index spans.  Detected spans become
    the proxy query set (deduplicated union) with one group per span and
    uniform weights; no detections returns the fallback bank unchanged.
    """
    spans = list(detector(tags))
    if not spans:
        return fallback
    seen: dict[int, int] = {}
    groups: list[list[int]] = []
    queries: list[int] = []
    for s, e in spans:
        grp = []
        for u in range(max(0, s), min(T, e)):
            if u not in seen:  # overlapping spans: first span owns the query
                seen[u] = len(queries)
                queries.append(u)
                grp.append(seen[u])
        if grp:
            groups.append(grp)
    q = np.asarray(queries, dtype=np.int64)
    w = np.full(q.size, 1.0 / q.size)
    return ProxyBank(queries=q, weights=w, anchors=tuple(int(x) for x in q),
                     groups=tuple(tuple(g) for g in groups))


def marker_question_detector(marker="?"):
    """Trivial reference detector: a span per maximal run of marker tags."""

    def detect(tags):
        spans = []
        start = None
        for i, t in enumerate(tags):
            if t == marker and start is None:
                start = i
            elif t != marker and start is not None:
                spans.append((start, i))
                start = None
        if start is not None:
            spans.append((start, len(tags)))
        return spans

    return detect
