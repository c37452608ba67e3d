"""Staged KV-cache eviction diagnostics on captured attention tensors.

Stage I scores access support per key position, Stage II re-ranks blocks by
value consequence, Stage III projects to the token budget; everything runs
under a frozen selector contract so stage-local comparisons stay valid.
"""

__version__ = "0.1.0"

from .contract import (  # noqa: F401
    SelectorContract,
    BlockPartition,
    KeptSet,
    budget_tokens,
    make_blocks,
    top_k,
    contract_fingerprint,
    apply_allocation,
)
from .tensor_store import (  # noqa: F401
    AttentionCapture,
    SyntheticTruth,
    load_capture,
    save_capture,
    synth_exchangeable,
    synth_planted_needle,
    synth_multitarget,
)
