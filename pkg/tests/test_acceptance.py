"""Acceptance gate: one test per criterion, at the stated tolerances.

Each test is the executable form of one acceptance criterion; names carry
the criterion number so the -v report reads as a checklist.

Known-red: criterion 4's count-debias flatness sub-check (4b) fails as
specified.  Under exchangeable rows E[A[u, i]] = 1/(u+1), so the debiased
mean at position i is (H_T - H_i)/(T - i), which decays several-fold from
head to tail instead of being flat; the deviation is ~170 standard errors
at T=64 with 1000 seeds.  Dividing by the observer count corrects the count
distortion but not the 1/(u+1) row-mass kernel, so the debiased curve is
monotone and nowhere flat at this precision.  The check is implemented
exactly as stated and left failing; 4b_true_law tests what actually holds.
"""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from kvss import (
    SelectorContract,
    budget_tokens,
    make_blocks,
    save_capture,
    synth_exchangeable,
    top_k,
)
from kvss.access import (
    AccessEstimatorSpec,
    decompose_access_error,
    harmonic_cumulative_expectation,
    mse_optimal_count,
    observer_count,
    participation_ratio,
    score_cumulative,
)
from kvss.cli import main as cli_main
from kvss.contract import contract_fingerprint
from kvss.diagnostics import assemble_cell, boundary_margin_check
from kvss.projection import block_project, token_fill
from kvss.rchannel import best_proxy_tv, random_separated_law, tv_floor
from kvss.stats import fisher_one_sided, permutation_null, rate_gap_statistic, split_rates
from kvss.value import BlockStats, deletion_cost, group_block_scores
from kvss.access import ScoreVector, build_proxy_bank

C = SelectorContract(budget_ratio=0.5)


def test_criterion_01_ordered_substitution_exactness():
    """1000 random estimator pairs, domains <= 32, relative error <= 1e-9."""
    start = time.time()
    cap, _ = synth_exchangeable(32, L=2, H=2, seed=0)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(1000):
        n_dom = int(rng.integers(2, 33))
        lo = int(rng.integers(0, 32 - n_dom + 1))
        dom = np.arange(lo, lo + n_dom)
        def make():
            tbl = rng.random((32, n_dom)) + 0.05
            return AccessEstimatorSpec(
                domain=dom, query_law=rng.dirichlet(np.ones(n_dom)),
                pooling=rng.random((2, 2, n_dom)),
                exposure=lambda i, d, t=tbl: t[i])
        est, ref = make(), make()
        i = int(rng.integers(0, 32))
        total = sum(decompose_access_error(est, ref, cap, i))
        direct = est.evaluate(cap, i) - ref.evaluate(cap, i)
        scale = max(abs(direct), abs(est.evaluate(cap, i)), abs(ref.evaluate(cap, i)), 1e-30)
        worst = max(worst, abs(total - direct) / scale)
    assert worst <= 1e-9
    assert time.time() - start < 5.0


def test_criterion_02_boundary_lemma_agreement():
    """1000 single-pair perturbations, 100% agreement including ties."""
    start = time.time()
    rng = np.random.default_rng(1)
    agree = 0
    for _ in range(1000):
        T = int(rng.integers(4, 24))
        k = int(rng.integers(1, T))
        s = rng.integers(0, 6, size=T).astype(float)  # integer ties abound
        order = np.lexsort((np.arange(T), -s))
        j = int(order[k - 1])  # weakest kept
        i = int(order[k])  # strongest evicted
        delta = np.zeros(T)
        delta[i] = float(rng.integers(0, 5))  # integer deltas hit exact ties
        delta[j] = -float(rng.integers(0, 5))
        unit = boundary_margin_check(s, delta, i, j, k, C)
        new = top_k(s + delta, k).as_set()
        agree += unit.crossed == (i in new and j not in new)
    assert agree == 1000
    assert time.time() - start < 5.0


def test_criterion_03_theorem1_floor():
    """Sweep n in {2,3,4}, r in 1..n, eps in {0, 0.1}: min TV >= floor - 1e-9."""
    start = time.time()
    checked = 0
    for n in (2, 3, 4):
        for eps in (0.0, 0.1):
            for inst in range(12):
                law = random_separated_law(n, min(16, 4 * n), eps=eps,
                                           seed=97 * n + 10 * inst + int(eps * 10))
                for r in range(1, n + 1):
                    achieved, witness = best_proxy_tv(law, r)
                    assert achieved >= tv_floor(law.w, law.eps, r) - 1e-9
                    checked += 1
    assert checked >= 200
    # the pinned equal-weight case: n=4, eps=0, r=1 -> floor exactly 0.75
    assert tv_floor(np.full(4, 0.25), 0.0, 1) == pytest.approx(0.75, abs=1e-15)
    assert time.time() - start < 60.0


def _exchangeable_mean_scores(T=64, seeds=1000):
    sums = np.zeros(T)
    sq = np.zeros(T)
    for seed in range(seeds):
        s = score_cumulative(synth_exchangeable(T, seed=seed)[0], C).values
        sums += s
        sq += s * s
    mean = sums / seeds
    se = np.sqrt((sq / seeds - mean ** 2) / seeds)
    return mean, se


MEAN64, SE64 = None, None


def _law_data():
    global MEAN64, SE64
    if MEAN64 is None:
        MEAN64, SE64 = _exchangeable_mean_scores()
    return MEAN64, SE64


def test_criterion_04a_exposure_bias_harmonic():
    """Mean cumulative score matches H_T - H_{i-1} within 3 SE everywhere."""
    start = time.time()
    mean, se = _law_data()
    expect = np.array([harmonic_cumulative_expectation(64, i + 1) for i in range(64)])
    dev = np.abs(mean - expect) / se
    assert dev.max() < 3.0
    assert time.time() - start < 30.0


def test_criterion_04b_count_debias_flat():
    """Count-debiased means flat within 3 SE of the grand mean (as specified).

    Known-red: see module docstring.  E[C_i / (T-i)] = (H_T - H_i)/(T-i) is
    not constant in i, so this check cannot pass for any correct
    implementation of the debiased scorer.
    """
    mean, se = _law_data()
    counts = observer_count(64)
    deb_mean = mean / counts
    deb_se = se / counts
    grand = deb_mean.mean()
    dev = np.abs(deb_mean - grand) / deb_se
    assert dev.max() < 3.0


def test_criterion_04b_true_law_attainable_form():
    """The attainable version: debiased means match (H_T - H_i)/(T - i)."""
    mean, se = _law_data()
    counts = observer_count(64)
    expect = np.array([harmonic_cumulative_expectation(64, i + 1) for i in range(64)])
    dev = np.abs(mean / counts - expect / counts) / (se / counts)
    assert dev.max() < 3.0


def test_criterion_05_mse_optimal_count():
    """500 random (S, sigma, c) triples vs integer brute force on [1, 1e6]."""
    rng = np.random.default_rng(2)
    n_grid = np.arange(1, 10 ** 6 + 1, dtype=np.float64)
    for _ in range(500):
        S = float(rng.uniform(0.05, 3.0))
        sigma = float(rng.uniform(0.05, 3.0))
        c = float(rng.uniform(0.25, 2.0))
        result = mse_optimal_count(S, sigma, c)
        mse = (1 - 1 / n_grid) ** 2 * S * S + c * sigma * sigma / n_grid
        brute = int(np.argmin(mse)) + 1
        if 2 * S * S > c * sigma * sigma:
            assert result == brute, (S, sigma, c)
        else:
            assert result == float("inf")
            assert brute == 10 ** 6  # still decreasing at the grid edge


def test_criterion_06_token_fill_control():
    """96-cell (T, p, k) grid: strict slack == k - p*k_b; post-fill < 0.1 mean."""
    rng = np.random.default_rng(3)
    cells = [(T, p) for T in (32, 48, 64, 96) for p in (1, 2, 4, 8)]
    slacks = []
    count = 0
    for T, p in cells:
        blocks = make_blocks(T, p)
        for k in np.linspace(1, T, 6).astype(int):
            scores = rng.standard_normal(blocks.n_blocks)
            strict = block_project(scores, blocks, int(k), C)
            assert strict.slack == int(k) - p * strict.k_b
            tokens = ScoreVector(values=rng.standard_normal(T))
            filled = token_fill(strict, tokens)
            kept_blocks = {blocks.block_of(int(i)) for i, pr in
                           zip(filled.kept.indices, filled.kept.provenance)
                           if pr == "block"}
            base_blocks = {blocks.block_of(int(i)) for i in strict.kept.indices}
            assert kept_blocks == base_blocks
            slacks.append(filled.slack)
            count += 1
    assert count == 96
    assert np.mean(slacks) < 0.1


def test_criterion_07_alpha0_identity(tmp_path):
    """--stage2 alpha:0 reproduces --stage2 none kept sets on 20 random captures."""
    runner = CliRunner()
    contract = {"budget_ratio": 0.3, "block_size": 4, "observation_window": 8,
                "layer_weights": {"0": 1.0}}
    cpath = tmp_path / "contract.json"
    cpath.write_text(json.dumps(contract))
    for seed in range(20):
        cap, _ = synth_exchangeable(40, seed=1000 + seed)
        cap_dir = tmp_path / f"cap{seed}"
        save_capture(cap, cap_dir)
        base = ["select", "--capture", str(cap_dir), "--contract", str(cpath),
                "--scorer", "obs_window"]
        ra = runner.invoke(cli_main, base + ["--stage2", "none",
                                             "--out", str(tmp_path / f"n{seed}")])
        rb = runner.invoke(cli_main, base + ["--stage2", "alpha:0",
                                             "--out", str(tmp_path / f"z{seed}")])
        assert ra.exit_code == 0 and rb.exit_code == 0
        a = (tmp_path / f"n{seed}" / "kept.json").read_bytes()
        b = (tmp_path / f"z{seed}" / "kept.json").read_bytes()
        assert a == b  # file-level diff empty


def test_criterion_08_variant_algebra():
    """full = nolev * clipped leverage; novalue ignores V; support = mass oracle."""
    rng = np.random.default_rng(4)
    eps_a = 1e-2
    for _ in range(500):
        a = float(rng.uniform(0, 1))
        st = BlockStats(a=a, mu=rng.standard_normal(4), o=rng.standard_normal(4))
        lev = 1.0 / max(1.0 - a, eps_a) ** 2
        assert deletion_cost(st, eps_a, "full") == pytest.approx(
            deletion_cost(st, eps_a, "nolev") * lev, rel=1e-12, abs=1e-300)
        assert deletion_cost(st, eps_a, "support_only") == a
    # novalue is bit-identical under value perturbation; support_only matches
    # an independent mass-sum oracle
    from kvss import tensor_store as ts
    cap, _ = synth_exchangeable(16, seed=5)
    bank = build_proxy_bank(16, 4)
    blocks = make_blocks(16, 4)
    nv = group_block_scores(cap, C, bank, blocks, variant="novalue")
    cap2 = ts.AttentionCapture(attention=cap.attention,
                               values=cap.values + np.float32(2.5),
                               kv_map=cap.kv_map)
    nv2 = group_block_scores(cap2, C, bank, blocks, variant="novalue")
    assert np.array_equal(nv.scores, nv2.scores)
    so = group_block_scores(cap, C, bank, blocks, variant="support_only")
    oracle = np.zeros(blocks.n_blocks)
    for pos, u in enumerate(bank.queries):
        row = cap.attention[0, 0, int(u)].astype(np.float64)
        for j, (s, e) in enumerate(blocks.blocks):
            oracle[j] += bank.weights[pos] * row[s:e].sum()
    assert np.allclose(so.scores, oracle, atol=1e-10)


def test_criterion_09_statistics_procedures():
    """Fisher vs enumeration; permutation super-uniform; 72.6/32.4 rates."""
    from math import comb

    # Fisher against exhaustive hypergeometric enumeration, margins <= 40
    rng = np.random.default_rng(5)
    for _ in range(300):
        a, b, c, d = (int(x) for x in rng.integers(0, 11, size=4))
        n, row1, col1 = a + b + c + d, a + b, a + c
        if n == 0 or comb(n, col1) == 0:
            continue
        expect = sum(comb(row1, x) * comb(n - row1, col1 - x)
                     for x in range(a, min(row1, col1) + 1)
                     if col1 - x <= n - row1) / comb(n, col1)
        assert fisher_one_sided([[a, b], [c, d]]) == pytest.approx(expect, abs=1e-12)

    # permutation p super-uniform under exchangeable labels (200 grids)
    pvals = []
    for g in range(200):
        grng = np.random.default_rng(10_000 + g)
        cells = [assemble_cell(host=30.0, variant=30.0 + grng.normal(),
                               reference=30.0 + grng.normal(), phi=0.05,
                               task=f"t{i % 4}") for i in range(24)]
        _, _, _, p = permutation_null(cells, rate_gap_statistic,
                                      n_perm=100, seed=g)
        pvals.append(p)
    pvals = np.asarray(pvals)
    for alpha in (0.05, 0.1, 0.25, 0.5):
        frac = float((pvals <= alpha).mean())
        assert frac <= alpha + 3 * np.sqrt(alpha * (1 - alpha) / 200)

    # constructed grid reproducing the 72.6% / 32.4% bucket rates exactly
    cells = []
    for i in range(62):  # predicted-positive bucket: 45/62 positive
        cells.append(assemble_cell(host=30.0, variant=30.0 + (1.0 if i < 45 else -1.0),
                                   reference=31.0, phi=0.05))
    for i in range(34):  # other bucket: 11/34 positive
        cells.append(assemble_cell(host=30.0, variant=30.0 + (1.0 if i < 11 else -1.0),
                                   reference=29.0, phi=0.05))
    reps = {r.bucket: r for r in split_rates(cells, lambda c: str(c.H_c))}
    assert round(reps["1"].rate, 1) == 72.6
    assert round(reps["-1"].rate, 1) == 32.4


def test_criterion_10_participation_ratio():
    """Equal mass over r heads returns exactly r, for r in 1..H, H <= 64."""
    H = 64
    for r in range(1, H + 1):
        m = np.zeros(H)
        m[:r] = 3.7
        assert participation_ratio(m) == pytest.approx(r, rel=1e-12)
