"""Stage II value-consequence block scoring.

For each candidate block c and proxy query u, the deletion cost combines the
block's attention mass a (support strength) with the squared distance between
the block's attention-weighted value centroid and the full attention output
(conditional output consequence), amplified by the leverage multiplier
(a / (1-a))^2 near a -> 1.  Variants switch off individual factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .access import ProxyBank, ScoreVector
from .contract import BlockPartition, contract_fingerprint

EPS_A_DEFAULT = 1e-2
EPS_MU_DEFAULT = 1e-8

VARIANTS = ("full", "nolev", "novalue", "support_only", "soft_robust", "alpha_blend")


@dataclass(frozen=True)
class BlockStats:
    """Per-(layer, head, query) block statistics."""

    a: float  # block attention mass in [0, 1]
    mu: np.ndarray  # attention-weighted value centroid (d_h)
    o: np.ndarray  # full attention output (d_h)

    def __post_init__(self):
        if not -1e-6 <= self.a <= 1.0 + 1e-6:
            raise ValueError(f"block mass must be in [0, 1], got {self.a}")


@dataclass(frozen=True)
class BlockScoreVector:
    scores: np.ndarray  # S(c) per block
    variant: str = "full"
    per_group: np.ndarray | None = None  # D_m(c), [M, N_b]
    alpha: float | None = None
    eps_a: float = EPS_A_DEFAULT
    eps_mu: float = EPS_MU_DEFAULT
    contract_fingerprint: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", s)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not np.isfinite(s).all():
            raise ValueError("block scores must be finite")
        if self.variant == "support_only" and (s < -1e-12).any():
            raise ValueError("support-only scores must be nonnegative")

    def __len__(self):
        return int(self.scores.shape[0])

    def to_csv(self, path, blocks: BlockPartition):
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# kvss-blocks variant={self.variant} "
                    f"fingerprint={self.contract_fingerprint}\n")
            m = 0 if self.per_group is None else self.per_group.shape[0]
            cols = "block_start,block_end,score" + "".join(f",D_{j+1}" for j in range(m))
            f.write(cols + "\n")
            for j, (s, e) in enumerate(blocks.blocks):
                row = f"{s},{e},{format(self.scores[j], '.17g')}"
                for g in range(m):
                    row += f",{format(self.per_group[g, j], '.17g')}"
                f.write(row + "\n")


def attention_output(capture, l, h, u):
    """o = sum_{i <= u} A_{l,h}[u, i] V_{l, kappa(h), i}."""
    if not 0 <= u < capture.T:
        raise ValueError(f"query index {u} outside [0, {capture.T})")
    row = capture.attention[l, h, u].astype(np.float64)
    vals = capture.values[l, capture.kv_map[h]].astype(np.float64)
    return row @ vals


def block_stats(capture, l, h, u, block, eps_mu=EPS_MU_DEFAULT) -> BlockStats:
    """Block mass a and centroid mu for query u; centroid clipped by eps_mu."""
    s, e = block
    row = capture.attention[l, h, u].astype(np.float64)
    vals = capture.values[l, capture.kv_map[h]].astype(np.float64)
    a = float(row[s:e].sum())
    mu = (row[s:e] @ vals[s:e]) / max(a, eps_mu)
    return BlockStats(a=min(a, 1.0 + 1e-6), mu=mu, o=row @ vals)


def _leverage(a, eps_a, clip_mode):
    if clip_mode == "max":
        return a / max(1.0 - a, eps_a)
    if clip_mode == "additive":  # pseudocode-appendix compatibility form
        return a / (1.0 - a + eps_a)
    raise ValueError(f"unknown clip_mode {clip_mode!r}")


def deletion_cost(stats: BlockStats, eps_a=EPS_A_DEFAULT, variant="full",
                  alpha=None, clip_mode="max") -> float:
    """Per-(l, h, u) deletion cost of a block under the chosen variant.

    full:          (a / max{1-a, eps_a})^2 ||mu - o||^2
    nolev:         a^2 ||mu - o||^2
    novalue:       (a / max{1-a, eps_a})^2
    support_only:  a
    alpha_blend:   a^2 max{1-a, eps_a}^(-2 alpha) ||mu - o||^2
                   (alpha=1 recovers full, alpha=0 recovers nolev)
    """
    a = stats.a
    sq = float(np.sum((stats.mu - stats.o) ** 2))
    if variant == "full":
        return _leverage(a, eps_a, clip_mode) ** 2 * sq
    if variant == "nolev":
        return a * a * sq
    if variant == "novalue":
        return _leverage(a, eps_a, clip_mode) ** 2
    if variant == "support_only":
        return a
    if variant == "alpha_blend":
        if alpha is None:
            raise ValueError("alpha_blend requires alpha")
        if clip_mode == "max":
            denom = max(1.0 - a, eps_a)
        else:
            denom = 1.0 - a + eps_a
        return a * a * denom ** (-2.0 * alpha) * sq
    raise ValueError(f"unknown variant {variant!r}")


def group_block_scores(capture, contract, bank: ProxyBank, blocks: BlockPartition,
                       variant="full", alpha=None, group_weights=None,
                       eps_a=EPS_A_DEFAULT, eps_mu=EPS_MU_DEFAULT,
                       clip_mode="max") -> BlockScoreVector:
    """D_m(c) = sum_{u in U_m} r_u sum_l beta_l sum_h d_{l,h,u}(c); S = sum w_m D_m."""
    M = bank.n_groups
    if group_weights is None:
        group_weights = np.full(M, 1.0 / M)
    w = np.asarray(group_weights, dtype=np.float64)
    if w.shape != (M,) or abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValueError("group weights must be a simplex vector over the M groups")
    lw = contract.layer_weight_map()
    starts = np.array([s for s, _ in blocks.blocks])
    D = np.zeros((M, blocks.n_blocks))
    for m, grp in enumerate(bank.groups):
        for pos in grp:
            u = int(bank.queries[pos])
            r_u = bank.weights[pos]
            for l, beta in lw.items():
                for h in range(capture.H):
                    row = capture.attention[l, h, u].astype(np.float64)
                    vals = capture.values[l, capture.kv_map[h]].astype(np.float64)
                    a = np.add.reduceat(row, starts)
                    if variant == "support_only":
                        D[m] += r_u * beta * a
                        continue
                    if clip_mode == "max":
                        denom = np.maximum(1.0 - a, eps_a)
                    else:
                        denom = 1.0 - a + eps_a
                    if variant == "novalue":
                        D[m] += r_u * beta * (a / denom) ** 2
                        continue
                    o = row @ vals
                    wsum = np.add.reduceat(row[:, None] * vals, starts, axis=0)
                    mu = wsum / np.maximum(a, eps_mu)[:, None]
                    sq = np.sum((mu - o[None, :]) ** 2, axis=1)
                    if variant == "full":
                        D[m] += r_u * beta * (a / denom) ** 2 * sq
                    elif variant == "nolev":
                        D[m] += r_u * beta * a * a * sq
                    elif variant == "alpha_blend":
                        if alpha is None:
                            raise ValueError("alpha_blend requires alpha")
                        D[m] += r_u * beta * a * a * denom ** (-2.0 * alpha) * sq
                    else:
                        raise ValueError(f"unknown variant {variant!r}")
    return BlockScoreVector(scores=w @ D, variant=variant, per_group=D,
                            alpha=alpha, eps_a=eps_a, eps_mu=eps_mu,
                            contract_fingerprint=contract_fingerprint(contract))


def soft_robust_pool(block_scores: BlockScoreVector, tau_g) -> BlockScoreVector:
    """S_rob(c) = tau_g log sum_m exp(D_m(c) / tau_g); max as tau_g -> 0."""
    if tau_g <= 0:
        raise ValueError(f"tau_g must be > 0, got {tau_g}")
    D = block_scores.per_group
    if D is None:
        raise ValueError("soft_robust_pool needs per-group scores")
    top = D.max(axis=0)
    s = top + tau_g * np.log(np.sum(np.exp((D - top) / tau_g), axis=0))
    return BlockScoreVector(scores=s, variant="soft_robust", per_group=D,
                            eps_a=block_scores.eps_a, eps_mu=block_scores.eps_mu,
                            contract_fingerprint=block_scores.contract_fingerprint)


def reserve_blocks(block_scores: BlockScoreVector, r: int):
    """The r blocks with the largest groupwise max D_m; ties to lower index."""
    D = block_scores.per_group
    if D is None:
        raise ValueError("reserve_blocks needs per-group scores")
    n_b = D.shape[1]
    if not 0 <= r <= n_b:
        raise ValueError(f"r must be in [0, {n_b}], got {r}")
    key = D.max(axis=0)
    order = np.lexsort((np.arange(n_b), -key))
    return set(int(j) for j in order[:r])


def stage2_substitute(host_scores: ScoreVector, block_scores: BlockScoreVector,
                      blocks: BlockPartition) -> ScoreVector:
    """Broadcast block scores into the host's token-ranking slot.

    Each token inherits its block's S(c); the host's reserved-tail +inf
    sentinels are preserved so only the value-consequence ranking changes.
    """
    if len(block_scores) != blocks.n_blocks:
        raise ValueError("block scores and partition disagree on block count")
    if len(host_scores) != blocks.T:
        raise ValueError("host scores and partition disagree on T")
    out = np.empty(blocks.T)
    for j, (s, e) in enumerate(blocks.blocks):
        out[s:e] = block_scores.scores[j]
    sentinel = np.isposinf(host_scores.values)
    out[sentinel] = np.inf
    return ScoreVector(values=out, stage_tag="stage2_block_broadcast",
                       contract_fingerprint=host_scores.contract_fingerprint)


def host_block_means(host_scores: ScoreVector, blocks: BlockPartition) -> BlockScoreVector:
    """Block-mean broadcast of the host's own token scores (alpha=0 identity)."""
    vals = host_scores.values
    finite = np.where(np.isposinf(vals), 0.0, vals)
    means = np.array([finite[s:e].mean() for s, e in blocks.blocks])
    return BlockScoreVector(scores=means, variant="full",
                            contract_fingerprint=host_scores.contract_fingerprint)
