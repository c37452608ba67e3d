"""On-disk attention-capture format, validation, and synthetic generators.

A capture is a directory holding ``manifest.json`` plus one raw float32 file
per layer for attention (``attn_l{l}.f32``, layout [H, T, T]) and one per
layer for values (``vals_l{l}.f32``, layout [H_kv, T, d_h]); little-endian,
row-major.  Attention is stored dense lower-triangular with explicit zeros
above the diagonal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
ROW_SUM_TOL = 1e-4  # captures may come from float16 models
SYNTH_ROW_TOL = 1e-9  # generators normalize in float64 before storage


class CaptureLoadError(Exception):
    """A file named by the manifest is missing or unreadable."""


class CaptureValidationError(Exception):
    """The tensors violate the capture invariants.

    Carries ``location`` = (layer, head, row) when the violation is local.
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


@dataclass(frozen=True)
class AttentionCapture:
    """Per-layer, per-head prefill attention plus cache-resident values.

    attention : float32 [L, H, T, T], causal rows summing to 1
    values    : float32 [L, H_kv, T, d_h]
    kv_map    : int array [H], query head -> kv head
    meta      : free-form string map (model id, prompt id, task tag, ...)
    """

    attention: np.ndarray
    values: np.ndarray
    kv_map: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.attention.shape[2]

    @property
    def L(self):
        return self.attention.shape[0]

    @property
    def H(self):
        return self.attention.shape[1]

    @property
    def H_kv(self):
        return self.values.shape[1]

    @property
    def d_h(self):
        return self.values.shape[3]


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth attached to a synthetic capture for property tests."""

    planted_targets: tuple = ()
    slot_of_target: dict | None = None
    decode_law: np.ndarray | None = None


def validate_capture(capture, row_tol=ROW_SUM_TOL):
    """Check all AttentionCapture invariants; raise CaptureValidationError."""
    A, V = capture.attention, capture.values
    if A.ndim != 4 or A.shape[2] != A.shape[3]:
        raise CaptureValidationError(f"attention must be [L,H,T,T], got {A.shape}")
    if V.ndim != 4 or V.shape[2] != A.shape[2]:
        raise CaptureValidationError(f"values must be [L,H_kv,T,d_h], got {V.shape}")
    if V.shape[0] != A.shape[0]:
        raise CaptureValidationError("attention and values disagree on layer count")
    kv = np.asarray(capture.kv_map)
    if kv.shape != (capture.H,):
        raise CaptureValidationError(f"kv_map must have length H={capture.H}")
    if kv.min(initial=0) < 0 or (kv >= capture.H_kv).any():
        raise CaptureValidationError("kv_map range must lie in [0, H_kv)")

    T = capture.T
    upper = np.triu_indices(T, k=1)
    for l in range(capture.L):
        for h in range(capture.H):
            mat = A[l, h]
            bad = np.nonzero(mat[upper] != 0.0)[0]
            if bad.size:
                row = upper[0][bad[0]]
                raise CaptureValidationError(
                    f"causality violated at layer {l}, head {h}, row {row}",
                    location=(l, h, int(row)),
                )
            sums = mat.sum(axis=1, dtype=np.float64)
            dev = np.abs(sums - 1.0)
            worst = int(np.argmax(dev))
            if dev[worst] > row_tol:
                raise CaptureValidationError(
                    f"row sum {sums[worst]:.6g} at layer {l}, head {h}, row {worst} "
                    f"exceeds tolerance {row_tol:g}",
                    location=(l, h, worst),
                )


def _manifest(capture):
    return {
        "schema_version": SCHEMA_VERSION,
        "T": capture.T,
        "L": capture.L,
        "H": capture.H,
        "H_kv": capture.H_kv,
        "d_h": capture.d_h,
        "kv_map": [int(x) for x in capture.kv_map],
        "attention_files": [f"attn_l{l}.f32" for l in range(capture.L)],
        "value_files": [f"vals_l{l}.f32" for l in range(capture.L)],
        "meta": {str(k): str(v) for k, v in sorted(capture.meta.items())},
    }


def save_capture(capture, path):
    """Write a capture directory; two saves of the same capture are byte-identical."""
    validate_capture(capture)
    os.makedirs(path, exist_ok=True)
    man = _manifest(capture)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    for l in range(capture.L):
        capture.attention[l].astype("<f4").tofile(os.path.join(path, man["attention_files"][l]))
        capture.values[l].astype("<f4").tofile(os.path.join(path, man["value_files"][l]))


def load_capture(path, row_tol=ROW_SUM_TOL):
    """Load and validate a capture directory."""
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise CaptureLoadError(f"missing file: {man_path}")
    with open(man_path, encoding="utf-8") as f:
        man = json.load(f)
    if man.get("schema_version") != SCHEMA_VERSION:
        raise CaptureValidationError(
            f"unsupported schema_version {man.get('schema_version')!r}"
        )
    T, L, H = man["T"], man["L"], man["H"]
    H_kv, d_h = man["H_kv"], man["d_h"]

    def read(name, shape):
        p = os.path.join(path, name)
        if not os.path.exists(p):
            raise CaptureLoadError(f"missing file: {p}")
        arr = np.fromfile(p, dtype="<f4")
        want = int(np.prod(shape))
        if arr.size != want:
            raise CaptureValidationError(
                f"{name}: expected {want} float32 values, found {arr.size}"
            )
        return arr.reshape(shape)

    attention = np.stack([read(n, (H, T, T)) for n in man["attention_files"]])
    values = np.stack([read(n, (H_kv, T, d_h)) for n in man["value_files"]])
    cap = AttentionCapture(
        attention=attention,
        values=values,
        kv_map=np.asarray(man["kv_map"], dtype=np.int64),
        meta=dict(man.get("meta", {})),
    )
    validate_capture(cap, row_tol=row_tol)
    return cap


def _rng(seed):
    # counter-based generator: reproducible across platforms
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def _finish(attn64, seed_rng, T, L, H, H_kv, d_h, meta):
    """Normalize rows in float64, draw values, cast to storage dtype."""
    for l in range(L):
        for h in range(H):
            lower = np.tril(attn64[l, h])
            attn64[l, h] = lower / lower.sum(axis=1, keepdims=True)
    values = seed_rng.standard_normal((L, H_kv, T, d_h))
    kv_map = (np.arange(H) * H_kv // H).astype(np.int64)
    return AttentionCapture(
        attention=attn64.astype(np.float32),
        values=values.astype(np.float32),
        kv_map=kv_map,
        meta=meta,
    )


def _exchangeable_rows(rng, T):
    """Causal rows drawn flat-Dirichlet: normalized i.i.d. exponentials."""
    e = rng.standard_exponential((T, T))
    return np.tril(e)


def synth_exchangeable(T, L=1, H=1, seed=0, d_h=8, H_kv=None):
    """Exchangeable-softmax capture: row u is a flat-Dirichlet point on [0, u]."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    H_kv = H if H_kv is None else H_kv
    rng = _rng(seed)
    attn = np.stack(
        [np.stack([_exchangeable_rows(rng, T) for _ in range(H)]) for _ in range(L)]
    )
    cap = _finish(attn, rng, T, L, H, H_kv, d_h, {"kind": "exchangeable", "seed": str(seed)})
    return cap, SyntheticTruth()


def synth_planted_needle(T, L=1, H=1, targets=(), contrast=0.5, active_heads=1,
                         seed=0, d_h=8, background="structured"):
    """Sparse retrieval-head capture with per-active-head centered contrast.

    Exactly ``active_heads`` heads (per layer, lowest indices) place centered
    contrast ``contrast`` on the visible targets of each row; the other heads
    carry background rows: deterministic uniform (``structured``) or
    flat-Dirichlet (``exchangeable``).
    """
    targets = tuple(sorted(int(t) for t in targets))
    if any(t < 0 or t >= T for t in targets):
        raise ValueError("targets must lie in [0, T)")
    if not 1 <= active_heads <= H:
        raise ValueError(f"active_heads must be in [1, {H}], got {active_heads}")
    if background not in ("structured", "exchangeable"):
        raise ValueError(f"unknown background {background!r}")
    rng = _rng(seed)
    tset = np.zeros(T, dtype=bool)
    tset[list(targets)] = True

    def active_rows():
        rows = np.zeros((T, T))
        for u in range(T):
            m = u + 1
            vis = tset[: m]
            n_vis = int(vis.sum())
            rows[u, : m] = 1.0 / m
            if 0 < n_vis < m:
                drop = contrast * n_vis / (m - n_vis)
                # keep rows on the simplex; skip contrast where infeasible
                if 1.0 / m - drop >= 0.0:
                    row = rows[u, : m]
                    row[vis] += contrast
                    row[~vis] -= drop
        return rows

    def background_rows():
        if background == "structured":
            return np.tril(np.ones((T, T)))
        return _exchangeable_rows(rng, T)

    attn = np.zeros((L, H, T, T))
    for l in range(L):
        for h in range(H):
            attn[l, h] = active_rows() if h < active_heads else background_rows()
    meta = {"kind": "planted_needle", "seed": str(seed),
            "targets": ",".join(str(t) for t in targets),
            "contrast": str(contrast), "active_heads": str(active_heads)}
    cap = _finish(attn, rng, T, L, H, H, d_h, meta)
    truth = SyntheticTruth(planted_targets=targets,
                           slot_of_target={t: 0 for t in targets})
    return cap, truth


def synth_multitarget(T, modes, weights=None, separation=0.0, seed=0,
                      L=1, H=1, d_h=8):
    """Multi-basin capture: n disjoint key-index basins, one anchor query each.

    Mode law nu_m puts mass 1 - separation uniformly on basin m and the
    remaining ``separation`` uniformly outside it.  Anchor query m attends by
    nu_m; the trailing tail queries attend by the dominant mode's law; all
    other rows are exchangeable.  ``decode_law`` is the weighted mixture.
    """
    n = int(modes)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
        raise ValueError("weights must be a length-n simplex vector (sum 1 +- 1e-9)")
    bw = T // (2 * n)
    if bw < 1 or n * bw > T:
        raise ValueError(f"T={T} too small for {n} basins")
    tail_w = max(1, T // 8)
    anchors = [T - tail_w - n + m for m in range(n)]
    if anchors[0] < n * bw:
        raise ValueError(f"T={T} too small to place anchors clear of basins")

    basins = [np.arange(m * bw, (m + 1) * bw) for m in range(n)]
    laws = np.zeros((n, T))
    for m in range(n):
        laws[m, basins[m]] = (1.0 - separation) / bw
        if separation > 0:
            out = np.setdiff1d(np.arange(T), basins[m])
            laws[m, out] = separation / out.size

    rng = _rng(seed)
    dominant = int(np.argmax(w))  # ties resolve to the lowest mode index
    attn = np.zeros((L, H, T, T))
    for l in range(L):
        for h in range(H):
            rows = _exchangeable_rows(rng, T)
            for m, a in enumerate(anchors):
                rows[a, :] = 0.0
                rows[a, : a + 1] = laws[m, : a + 1]
            for u in range(T - tail_w, T):
                rows[u, :] = 0.0
                rows[u, : u + 1] = laws[dominant, : u + 1]
            attn[l, h] = rows

    slot_of_target = {int(i): m for m in range(n) for i in basins[m]}
    meta = {"kind": "multitarget", "seed": str(seed), "modes": str(n),
            "separation": str(separation), "tail_width": str(tail_w),
            "anchors": ",".join(str(a) for a in anchors),
            "basin_width": str(bw),
            "weights": ",".join(format(x, ".12g") for x in w)}
    cap = _finish(attn, rng, T, L, H, H, d_h, meta)
    truth = SyntheticTruth(
        planted_targets=tuple(int(i) for m in range(n) for i in basins[m]),
        slot_of_target=slot_of_target,
        decode_law=w @ laws,
    )
    return cap, truth
