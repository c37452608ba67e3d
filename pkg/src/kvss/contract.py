"""The frozen selector contract and shared budget/block/top-k machinery.

Every stage-local comparison in this package is only meaningful under a fixed
SelectorContract: same attention tensor, query domain, observation window,
budget, allocation rule, block size, and tie break.  Scores and kept sets are
tagged with the contract fingerprint so drift is detectable downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ALLOCATIONS = ("uniform_per_head", "pyramidal_by_layer", "head_adaptive")
TIE_BREAKS = ("lower_index_first",)
QUERY_DOMAINS = ("all_prefill", "tail_window", "proxy_bank")


class ContractError(Exception):
    pass


class AllocationError(Exception):
    pass


@dataclass(frozen=True)
class SelectorContract:
    budget_ratio: float
    block_size: int = 1
    observation_window: int = 0  # 0 = none
    reserved_tail: int = 0  # tokens hard-kept at prompt end, charged to budget
    layer_weights: tuple = ((0, 1.0),)  # ((layer, beta_l), ...) over the selected set
    pooling_kernel: int = 1  # odd; 1 = none
    allocation: str = "uniform_per_head"
    tie_break: str = "lower_index_first"
    query_domain: str = "all_prefill"

    def __post_init__(self):
        if isinstance(self.layer_weights, dict):
            object.__setattr__(
                self, "layer_weights",
                tuple(sorted((int(l), float(b)) for l, b in self.layer_weights.items())),
            )
        self.validate()

    def validate(self):
        if not 0.0 < self.budget_ratio < 1.0:
            raise ContractError(f"budget_ratio must be in (0,1), got {self.budget_ratio}")
        if self.block_size < 1:
            raise ContractError(f"block_size must be >= 1, got {self.block_size}")
        if self.pooling_kernel < 1 or self.pooling_kernel % 2 == 0:
            raise ContractError(f"pooling_kernel must be odd, got {self.pooling_kernel}")
        if not self.layer_weights:
            raise ContractError("layer set must be nonempty")
        total = sum(b for _, b in self.layer_weights)
        if abs(total - 1.0) > 1e-9 or any(b < 0 for _, b in self.layer_weights):
            raise ContractError(f"layer weights must be nonnegative and sum to 1, got {total}")
        if self.allocation not in ALLOCATIONS:
            raise ContractError(f"unknown allocation {self.allocation!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ContractError(f"unknown tie_break {self.tie_break!r}")
        if self.query_domain not in QUERY_DOMAINS:
            raise ContractError(f"unknown query_domain {self.query_domain!r}")

    def layer_weight_map(self):
        return dict(self.layer_weights)

    def to_json(self):
        doc = {
            "budget_ratio": self.budget_ratio,
            "block_size": self.block_size,
            "observation_window": self.observation_window,
            "reserved_tail": self.reserved_tail,
            "layer_weights": {str(l): b for l, b in self.layer_weights},
            "pooling_kernel": self.pooling_kernel,
            "allocation": self.allocation,
            "tie_break": self.tie_break,
            "query_domain": self.query_domain,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        lw = doc.pop("layer_weights", {"0": 1.0})
        return cls(layer_weights={int(l): float(b) for l, b in lw.items()}, **doc)


def _fnv1a64(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def contract_fingerprint(contract: SelectorContract) -> str:
    """Stable 64-bit FNV-1a hash of the canonical contract JSON."""
    return _fnv1a64(contract.to_json().encode("utf-8"))


def budget_tokens(T: int, b: float) -> int:
    """k = floor(b * T)."""
    if T < 1 or not 0.0 < b < 1.0:
        raise ValueError(f"need T >= 1 and b in (0,1), got T={T}, b={b}")
    return int(np.floor(b * T))


@dataclass(frozen=True)
class BlockPartition:
    T: int
    p: int
    blocks: tuple  # ((start, end), ...), contiguous, tiling [0, T)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def block_of(self, i):
        return min(i // self.p, self.n_blocks - 1)

    def indices(self, j):
        s, e = self.blocks[j]
        return np.arange(s, e)


def make_blocks(T: int, p: int) -> BlockPartition:
    if T < 1 or p < 1:
        raise ValueError(f"need T >= 1 and p >= 1, got T={T}, p={p}")
    starts = list(range(0, T, p))
    return BlockPartition(T=T, p=p,
                          blocks=tuple((s, min(s + p, T)) for s in starts))


@dataclass(frozen=True)
class KeptSet:
    indices: np.ndarray  # strictly increasing token indices
    provenance: tuple  # per index: "block" | "token_fill" | "reserved_tail"
    contract_fingerprint: str = ""

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.size and (np.diff(idx) <= 0).any():
            raise ValueError("kept indices must be strictly increasing")
        if len(self.provenance) != idx.size:
            raise ValueError("provenance must be total on indices")

    def __len__(self):
        return int(self.indices.size)

    def as_set(self):
        return set(int(i) for i in self.indices)


def _score_values(scores):
    return np.asarray(getattr(scores, "values", scores), dtype=np.float64)


def top_k(scores, k: int, tie_break: str = "lower_index_first",
          fingerprint: str = "") -> KeptSet:
    """Deterministic top-k: ties go to the lower index.

    +inf scores (reserved-tail sentinels) always win and are labeled
    ``reserved_tail``; everything else is labeled ``block`` (selection unit =
    singleton block at this level).
    """
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    vals = _score_values(scores)
    T = vals.shape[0]
    if not 0 <= k <= T:
        raise ValueError(f"k must be in [0, {T}], got {k}")
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((np.arange(T), -vals))
    chosen = np.sort(order[:k])
    prov = tuple("reserved_tail" if np.isposinf(vals[i]) else "block" for i in chosen)
    return KeptSet(indices=chosen, provenance=prov, contract_fingerprint=fingerprint)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of `total` proportional to `weights`; ties to lower index."""
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones_like(w)
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short:
        frac = quota - base
        order = np.lexsort((np.arange(len(w)), -frac))
        base[order[:short]] += 1
    return base


def apply_allocation(contract: SelectorContract, L: int, H: int, k: int,
                     window_mass=None, schedule=None) -> np.ndarray:
    """Per-(layer, head) token budgets; always conserves L*H*k exactly.

    window_mass : [L, H] attention mass on the observation window, required
        by head_adaptive (uniform fallback per all-zero layer).
    schedule : explicit [L, H] integer budgets; must conserve the total.
    """
    total = L * H * k
    if schedule is not None:
        sched = np.asarray(schedule, dtype=np.int64)
        if sched.shape != (L, H) or int(sched.sum()) != total:
            raise AllocationError(
                f"schedule must be [L,H] summing to {total}, got sum {sched.sum()}"
            )
        return sched
    if contract.allocation == "uniform_per_head":
        return np.full((L, H), k, dtype=np.int64)
    if contract.allocation == "pyramidal_by_layer":
        # linear decay 1.5x -> 0.5x mean, renormalized; a drift knob
        decay = np.linspace(1.5, 0.5, L) if L > 1 else np.ones(1)
        layer_tot = _largest_remainder(total, decay)
        out = np.empty((L, H), dtype=np.int64)
        for l in range(L):
            out[l] = _largest_remainder(int(layer_tot[l]), np.ones(H))
        return out
    if contract.allocation == "head_adaptive":
        if window_mass is None:
            raise AllocationError("head_adaptive allocation requires window_mass")
        mass = np.asarray(window_mass, dtype=np.float64)
        if mass.shape != (L, H):
            raise AllocationError(f"window_mass must be [L,H]={L,H}, got {mass.shape}")
        out = np.empty((L, H), dtype=np.int64)
        for l in range(L):
            out[l] = _largest_remainder(H * k, mass[l])
        return out
    raise AllocationError(f"unknown allocation {contract.allocation!r}")
