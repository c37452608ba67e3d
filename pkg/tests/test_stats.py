from math import comb

import numpy as np
import pytest

from kvss.diagnostics import assemble_cell
from kvss.stats import (
    cluster_bootstrap,
    fisher_one_sided,
    jaccard_at_frac,
    leave_one_out,
    ndcg_at_frac,
    pairwise_auc,
    permutation_null,
    rate_gap_statistic,
    spearman,
    split_rates,
)


def make_cells(deltas, h_signs, tasks=None, phis=None):
    cells = []
    for i, (d, h) in enumerate(zip(deltas, h_signs)):
        host = 30.0
        cells.append(assemble_cell(
            host=host, variant=host + d, reference=host + h,
            phi=0.05 if phis is None else phis[i],
            task=f"t{i % 4}" if tasks is None else tasks[i]))
    return cells


def test_split_rates_all_positive():
    cells = make_cells([1.0, 2.0, 0.5], [1, 1, 1])
    (rep,) = split_rates(cells, lambda c: "all")
    assert rep.rate == 100.0 and rep.count == 3
    assert rep.mean_delta == pytest.approx(np.mean([1.0, 2.0, 0.5]))


def test_split_rates_two_buckets():
    deltas = [1.0, -1.0, 2.0, -2.0]
    signs = [1, 1, -1, -1]
    cells = make_cells(deltas, signs)
    reps = {r.bucket: r for r in split_rates(cells, lambda c: str(c.H_c))}
    assert reps["1"].rate == 50.0 and reps["-1"].rate == 50.0


def test_split_rates_requires_cells():
    with pytest.raises(ValueError):
        split_rates([], lambda c: "x")


def test_permutation_label_aligned_min_p():
    # all predicted-positive cells improve, others regress: maximal statistic
    deltas = [1.0] * 10 + [-1.0] * 10
    signs = [1] * 10 + [-1] * 10
    cells = make_cells(deltas, signs)
    obs, mean, ci, p = permutation_null(cells, rate_gap_statistic,
                                        n_perm=500, seed=0)
    assert obs == pytest.approx(100.0)
    assert p <= 1 / 501 + 1e-12


def test_permutation_deterministic():
    cells = make_cells(list(np.linspace(-1, 1, 12)), [1, -1] * 6)
    a = permutation_null(cells, rate_gap_statistic, n_perm=200, seed=7)
    b = permutation_null(cells, rate_gap_statistic, n_perm=200, seed=7)
    assert a == b


def test_permutation_invariant_statistic():
    cells = make_cells(list(np.linspace(-1, 1, 12)), [1, -1] * 6)
    obs, mean, (lo, hi), p = permutation_null(
        cells, lambda cs: 42.0, n_perm=200, seed=1)
    assert lo <= obs <= hi and p == pytest.approx(1.0)


def test_cluster_bootstrap_degenerate_and_reproducible():
    cells = make_cells([1.0] * 8, [1, -1] * 4, tasks=["a", "b"] * 4)
    est, (lo, hi) = cluster_bootstrap(cells, lambda c: c.task,
                                      lambda cs: np.mean([c.delta_c for c in cs]),
                                      n_boot=200, seed=3)
    assert lo == hi == pytest.approx(1.0)  # every cluster has the same value
    again = cluster_bootstrap(cells, lambda c: c.task,
                              lambda cs: np.mean([c.delta_c for c in cs]),
                              n_boot=200, seed=3)
    assert (est, (lo, hi)) == again


def test_cluster_bootstrap_spans_sign_change():
    cells = make_cells([2.0] * 6 + [-2.0] * 6, [1] * 12,
                       tasks=["a"] * 6 + ["b"] * 6)
    est, (lo, hi) = cluster_bootstrap(cells, lambda c: c.task,
                                      lambda cs: np.mean([c.delta_c for c in cs]),
                                      n_boot=500, seed=0)
    assert lo < 0 < hi
    assert lo <= est <= hi


def test_leave_one_out_names_outlier():
    cells = make_cells([1.0] * 8 + [50.0] * 4, [1] * 12,
                       tasks=["a", "b"] * 4 + ["c"] * 4)
    rows, lo, hi = leave_one_out(cells, lambda c: c.task,
                                 lambda cs: np.mean([c.delta_c for c in cs]))
    assert len(rows) == 3
    assert lo[0] == "c"  # dropping the outlier cluster minimizes the mean


def test_fisher_hand_values():
    assert fisher_one_sided([[10, 0], [0, 10]]) == pytest.approx(1 / comb(20, 10))
    assert fisher_one_sided([[5, 5], [5, 5]]) >= 0.5


def hypergeom_oracle(a, b, c, d):
    n, row1, col1 = a + b + c + d, a + b, a + c
    total = 0.0
    for x in range(max(0, row1 + col1 - n), min(row1, col1) + 1):
        if x >= a:
            total += comb(row1, x) * comb(n - row1, col1 - x) / comb(n, col1)
    return total


def test_fisher_matches_enumeration():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b, c, d = (int(x) for x in rng.integers(0, 11, size=4))
        if a + b == 0 or c + d == 0 or a + c == 0 or b + d == 0:
            continue
        assert fisher_one_sided([[a, b], [c, d]]) == pytest.approx(
            hypergeom_oracle(a, b, c, d), abs=1e-12)


def test_spearman_basics():
    x = np.arange(10.0)
    assert spearman(x, x) == pytest.approx(1.0)
    assert spearman(x, -x) == pytest.approx(-1.0)


def test_spearman_ties_match_bruteforce():
    x = np.array([1.0, 2.0, 2.0, 3.0])
    y = np.array([1.0, 3.0, 2.0, 2.0])
    # average-tied ranks by hand: x -> [1, 2.5, 2.5, 4]; y -> [1, 4, 2.5, 2.5]
    rx = np.array([1, 2.5, 2.5, 4.0])
    ry = np.array([1, 4.0, 2.5, 2.5])
    expected = np.corrcoef(rx, ry)[0, 1]
    assert spearman(x, y) == pytest.approx(expected)


def test_pairwise_auc():
    assert pairwise_auc([1, 2, 3, 4.0], [False, False, True, True]) == 1.0
    assert pairwise_auc([1, 1, 1, 1.0], [False, True, False, True]) == 0.5
    rng = np.random.default_rng(5)
    scores = rng.integers(0, 4, size=30).astype(float)
    labels = rng.random(30) < 0.5
    if labels.any() and not labels.all():
        pos, neg = scores[labels], scores[~labels]
        acc = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        assert pairwise_auc(scores, labels) == pytest.approx(acc / (len(pos) * len(neg)))


def test_auc_negation_identity():
    rng = np.random.default_rng(6)
    scores = rng.standard_normal(40)
    labels = rng.random(40) < 0.4
    assert pairwise_auc(-scores, labels) == pytest.approx(1 - pairwise_auc(scores, labels))


def test_ndcg_perfect_order():
    rel = np.array([3.0, 2.0, 1.0, 0.0])
    assert ndcg_at_frac(rel, rel, 0.5) == pytest.approx(1.0)


def test_ndcg_matches_definition_at_half():
    rng = np.random.default_rng(7)
    scores = rng.standard_normal(10)
    rel = rng.random(10)
    m = 5
    order = np.lexsort((np.arange(10), -scores))[:m]
    ideal = np.lexsort((np.arange(10), -rel))[:m]
    disc = 1 / np.log2(np.arange(1, m + 1) + 1)
    expected = (rel[order] * disc).sum() / (rel[ideal] * disc).sum()
    assert ndcg_at_frac(scores, rel, 0.5) == pytest.approx(expected)


def test_jaccard_cases():
    a = np.array([4.0, 3.0, 0.0, 0.0])
    b = np.array([0.0, 0.0, 3.0, 4.0])
    assert jaccard_at_frac(a, b, 0.5) == 0.0
    assert jaccard_at_frac(a, a, 0.5) == 1.0
