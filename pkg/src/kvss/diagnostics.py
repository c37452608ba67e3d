"""Fixed-contract diagnostic primitives.

Boundary units capture the kept/evicted token pairs whose swap is decided by
the score margin (the only place selector differences can act at fixed
budget); cell outcomes carry one (model, task, budget) evaluation with the
signed reference margin and the support-coupling density.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass

import numpy as np

from .contract import KeptSet, SelectorContract, top_k


@dataclass(frozen=True)
class BoundaryUnit:
    in_token: int  # i: evicted under the base score
    out_token: int  # j: kept under the base score
    margin: float  # s_j - s_i
    delta_in: float = 0.0
    delta_out: float = 0.0
    crossed: bool = False


def boundary_margin_check(s, delta, i, j, k, contract: SelectorContract) -> BoundaryUnit:
    """Does perturbation delta swap evicted i past kept j at budget k?

    crossed iff delta_i - delta_j > s_j - s_i, with exact equality resolved
    by the contract tie break (lower index first).
    """
    sv = np.asarray(getattr(s, "values", s), dtype=np.float64)
    dv = np.asarray(getattr(delta, "values", delta), dtype=np.float64)
    base = top_k(sv, k, tie_break=contract.tie_break).as_set()
    if j not in base or i in base:
        raise ValueError(f"need j={j} kept and i={i} evicted under the base score")
    margin = float(sv[j] - sv[i])
    diff = float(dv[i] - dv[j])
    if diff > margin:
        crossed = True
    elif diff == margin:
        crossed = i < j  # the fixed tie break decides exact equality
    else:
        crossed = False
    return BoundaryUnit(in_token=i, out_token=j, margin=margin,
                        delta_in=float(dv[i]), delta_out=float(dv[j]),
                        crossed=crossed)


def disagreement_boundary(kept_a: KeptSet, kept_b: KeptSet, scores_a, scores_b):
    """Pair the tokens the selectors disagree on, smallest margins first.

    Returns BoundaryUnits pairing tokens only in kept_b (entering, relative
    to a) with tokens only in kept_a (leaving), matched in order of the
    a-score margin.
    """
    sa = np.asarray(getattr(scores_a, "values", scores_a), dtype=np.float64)
    set_a, set_b = kept_a.as_set(), kept_b.as_set()
    if len(set_a) != len(set_b):
        raise ValueError("kept sets must share the same budget k")
    entering = sorted(set_b - set_a, key=lambda t: (-sa[t], t))
    leaving = sorted(set_a - set_b, key=lambda t: (sa[t], t))
    units = []
    for i, j in zip(entering, leaving):
        units.append(BoundaryUnit(in_token=int(i), out_token=int(j),
                                  margin=float(sa[j] - sa[i])))
    return sorted(units, key=lambda u: (u.margin, u.in_token))


def boundary_swap(kept: KeptSet, unit: BoundaryUnit) -> KeptSet:
    """(K \\ {j}) | {i}: swap the boundary pair; cardinality preserved."""
    s = kept.as_set()
    if unit.in_token in s:
        raise ValueError(f"token {unit.in_token} already kept")
    if unit.out_token not in s:
        raise ValueError(f"token {unit.out_token} not kept")
    prov = dict(zip((int(x) for x in kept.indices), kept.provenance))
    prov.pop(unit.out_token)
    prov[unit.in_token] = "block"
    idx = np.asarray(sorted(prov), dtype=np.int64)
    return KeptSet(indices=idx, provenance=tuple(prov[int(t)] for t in idx),
                   contract_fingerprint=kept.contract_fingerprint)


def signed_margin(host, reference):
    """m_c = reference - host and its sign H_c (zero preserved)."""
    m = float(reference) - float(host)
    return m, int(np.sign(m))


PHI_BUCKET_SPLIT = 0.10


def support_coupling(code_lines, label_markers, delimiter_records, total_lines):
    """phi = structural line density; bucket splits at phi >= 0.10."""
    if total_lines <= 0:
        raise ValueError("total_lines must be positive")
    phi = (code_lines + label_markers + delimiter_records) / total_lines
    return phi, ("high" if phi >= PHI_BUCKET_SPLIT else "low")


# versioned stand-in grammar for the three structural densities
PHI_GRAMMAR_VERSION = 1
_CODE_RE = re.compile(r"[{};]\s*$|^(    |\t)")
_LABEL_RE = re.compile(r"^\s*[A-Za-z_][A-Za-z0-9_ ]*:\s")
_DELIM_RE = re.compile(r"^([^\w\s])\1{2,}\s*$")


def text_features(text):
    """Count (code, label, delimiter, total) lines under the v1 grammar."""
    lines = text.splitlines()
    code = sum(1 for ln in lines if _CODE_RE.search(ln))
    label = sum(1 for ln in lines if _LABEL_RE.match(ln))
    delim = sum(1 for ln in lines if _DELIM_RE.match(ln))
    return code, label, delim, max(1, len(lines))


@dataclass(frozen=True)
class CellOutcome:
    model: str
    task: str
    budget: str
    host_score: float
    variant_score: float
    reference_score: float
    phi: float
    m_c: float
    H_c: int
    delta_c: float
    phi_bucket: str


def assemble_cell(host, variant, reference, phi, model="", task="", budget="") -> CellOutcome:
    """Build a CellOutcome; derived fields are recomputed, never trusted."""
    m_c, h_c = signed_margin(host, reference)
    return CellOutcome(model=model, task=task, budget=budget,
                       host_score=float(host), variant_score=float(variant),
                       reference_score=float(reference), phi=float(phi),
                       m_c=m_c, H_c=h_c, delta_c=float(variant) - float(host),
                       phi_bucket="high" if phi >= PHI_BUCKET_SPLIT else "low")


CELL_COLUMNS = ("model", "task", "budget", "host", "variant", "reference", "phi")


def load_cell_grid(path):
    """Read a cell grid CSV (model,task,budget,host,variant,reference,phi)."""
    cells = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            cells.append(assemble_cell(
                host=float(row["host"]), variant=float(row["variant"]),
                reference=float(row["reference"]), phi=float(row["phi"]),
                model=row.get("model", ""), task=row.get("task", ""),
                budget=row.get("budget", "")))
    return cells


def write_cell_grid(cells, path):
    """Write the enriched grid (adds m_c, H_c, delta, phi_bucket)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(CELL_COLUMNS) + ["m_c", "H_c", "delta", "phi_bucket"])
        for c in cells:
            writer.writerow([
                c.model, c.task, c.budget,
                format(c.host_score, ".12g"), format(c.variant_score, ".12g"),
                format(c.reference_score, ".12g"), format(c.phi, ".12g"),
                format(c.m_c, ".12g"), c.H_c, format(c.delta_c, ".12g"),
                c.phi_bucket,
            ])
