"""Command-line front end.

Subcommands: capture validate|info, synth <kind>, select, diagnose
stage1|stage2|stage3|boundary, rchannel sweep, stats <proc>.  All outputs
embed the producing contract fingerprint and tool version; reruns with
identical config are byte-identical (no timestamps, sorted JSON keys).
Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import csv
import json
import os

import click
import numpy as np

from . import __version__
from . import access, diagnostics, projection, rchannel, stats as stats_mod
from . import tensor_store as ts
from . import value as value_mod
from .contract import SelectorContract, ContractError, budget_tokens, \
    contract_fingerprint, make_blocks, top_k

SCORERS = ("cumulative", "count_debiased", "obs_window", "decode_proximal")


class ValidationFailure(click.ClickException):
    exit_code = 1


def _load_contract(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
        return SelectorContract.from_json(text)
    except OSError as e:
        raise click.UsageError(f"cannot read contract: {e}")
    except json.JSONDecodeError as e:
        raise click.UsageError(
            f"invalid contract JSON at {path}:{e.lineno}:{e.colno}: {e.msg}")
    except (ContractError, TypeError, ValueError) as e:
        raise click.UsageError(f"invalid contract: {e}")


def _load_capture(path):
    try:
        return ts.load_capture(path)
    except (ts.CaptureLoadError, ts.CaptureValidationError) as e:
        raise ValidationFailure(str(e))


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest(outdir, command, contract=None, extra=None):
    doc = {"tool": "kvss", "version": __version__, "command": command}
    if contract is not None:
        doc["contract_fingerprint"] = contract_fingerprint(contract)
        doc["contract"] = json.loads(contract.to_json())
    doc["threads"] = int(os.environ.get("KVSS_THREADS", "1"))
    if extra:
        doc.update(extra)
    _write_json(os.path.join(outdir, "run_manifest.json"), doc)


def _score(capture, contract, scorer, tail_width=None, tau_q=None):
    if scorer == "cumulative":
        return access.score_cumulative(capture, contract)
    if scorer == "count_debiased":
        return access.score_count_debiased(capture, contract)
    if scorer == "obs_window":
        return access.score_obs_window(capture, contract)
    if scorer == "decode_proximal":
        bank = access.build_proxy_bank(
            capture.T, tail_width or max(1, capture.T // 8),
            tau_q=tau_q if tau_q else float("inf"))
        return access.score_decode_proximal(capture, contract, bank)
    raise click.UsageError(f"unknown scorer {scorer!r}")


def _parse_stage2(spec):
    """'none' | variant name | 'alpha:<x>' -> (mode, alpha)."""
    if spec == "none":
        return None, None
    if spec.startswith("alpha:"):
        try:
            return "alpha", float(spec.split(":", 1)[1])
        except ValueError:
            raise click.UsageError(f"bad alpha in --stage2 {spec!r}")
    if spec in ("full", "nolev", "novalue", "support_only"):
        return spec, None
    raise click.UsageError(f"unknown --stage2 {spec!r}")


@click.group()
@click.version_option(__version__, prog_name="kvss")
@click.option("--threads", type=int, default=None,
              help="Worker threads (results are deterministic regardless).")
def main(threads):
    if threads is not None:
        os.environ["KVSS_THREADS"] = str(threads)


@main.group()
def capture():
    """Inspect and validate capture directories."""


@capture.command("validate")
@click.argument("path")
def capture_validate(path):
    _load_capture(path)
    click.echo("ok")


@capture.command("info")
@click.argument("path")
@click.option("--format", "fmt", type=click.Choice(["json", "text"]), default="text")
def capture_info(path, fmt):
    cap = _load_capture(path)
    doc = {"T": cap.T, "L": cap.L, "H": cap.H, "H_kv": cap.H_kv,
           "d_h": cap.d_h, "meta": cap.meta}
    if fmt == "json":
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    else:
        for key in ("T", "L", "H", "H_kv", "d_h"):
            click.echo(f"{key}: {doc[key]}")
        for k, v in sorted(cap.meta.items()):
            click.echo(f"meta.{k}: {v}")


@main.group()
def synth():
    """Generate synthetic captures."""


def _synth_common(fn):
    fn = click.option("--t", "T", type=int, required=True)(fn)
    fn = click.option("--layers", type=int, default=1)(fn)
    fn = click.option("--heads", type=int, default=1)(fn)
    fn = click.option("--seed", type=int, default=0)(fn)
    fn = click.option("--out", required=True)(fn)
    return fn


@synth.command("exchangeable")
@_synth_common
def synth_exchangeable(T, layers, heads, seed, out):
    try:
        cap, _ = ts.synth_exchangeable(T, L=layers, H=heads, seed=seed)
    except ValueError as e:
        raise click.UsageError(str(e))
    ts.save_capture(cap, out)
    click.echo(out)


@synth.command("planted")
@_synth_common
@click.option("--targets", required=True, help="Comma-separated token indices.")
@click.option("--contrast", type=float, default=0.2)
@click.option("--active-heads", type=int, default=1)
def synth_planted(T, layers, heads, seed, out, targets, contrast, active_heads):
    try:
        tgt = [int(x) for x in targets.split(",") if x]
        cap, _ = ts.synth_planted_needle(T, L=layers, H=heads, targets=tgt,
                                         contrast=contrast,
                                         active_heads=active_heads, seed=seed)
    except ValueError as e:
        raise click.UsageError(str(e))
    ts.save_capture(cap, out)
    click.echo(out)


@synth.command("multitarget")
@_synth_common
@click.option("--modes", type=int, required=True)
@click.option("--weights", default=None, help="Comma-separated simplex weights.")
@click.option("--eps", type=float, default=0.0)
def synth_multitarget(T, layers, heads, seed, out, modes, weights, eps):
    try:
        w = None
        if weights:
            w = [float(x) for x in weights.split(",")]
        cap, _ = ts.synth_multitarget(T, modes, weights=w, separation=eps,
                                      seed=seed, L=layers, H=heads)
    except ValueError as e:
        raise click.UsageError(str(e))
    ts.save_capture(cap, out)
    click.echo(out)


def _run_selection(cap, contract, scorer, stage2_spec):
    """Stage I score -> optional Stage II substitution -> Stage III projection."""
    host = _score(cap, contract, scorer)
    k = budget_tokens(cap.T, contract.budget_ratio)
    blocks = make_blocks(cap.T, contract.block_size)
    mode, alpha = _parse_stage2(stage2_spec)
    if mode is None:
        block_scores = value_mod.host_block_means(host, blocks)
        ranking = host
    else:
        bank = access.build_proxy_bank(cap.T, max(1, cap.T // 8))
        if mode == "alpha":
            # blend adapter: alpha=0 is exactly the host block-mean ranking
            s2 = value_mod.group_block_scores(cap, contract, bank, blocks,
                                              variant="full")
            hb = value_mod.host_block_means(host, blocks)
            block_scores = value_mod.BlockScoreVector(
                scores=(1.0 - alpha) * hb.scores + alpha * s2.scores,
                variant="full", contract_fingerprint=s2.contract_fingerprint)
        else:
            block_scores = value_mod.group_block_scores(cap, contract, bank,
                                                        blocks, variant=mode)
        ranking = value_mod.stage2_substitute(host, block_scores, blocks)
    report = projection.block_project(block_scores, blocks, k, contract)
    report = projection.token_fill(report, ranking)
    return host, block_scores, blocks, report


@main.command("select")
@click.option("--capture", "capture_path", required=True)
@click.option("--contract", "contract_path", required=True)
@click.option("--scorer", type=click.Choice(SCORERS), default="obs_window")
@click.option("--stage2", default="none")
@click.option("--out", required=True)
def cmd_select(capture_path, contract_path, scorer, stage2, out):
    """Run the staged pipeline and write kept sets, scores, and a manifest."""
    contract = _load_contract(contract_path)
    cap = _load_capture(capture_path)
    try:
        host, block_scores, blocks, report = _run_selection(cap, contract,
                                                            scorer, stage2)
    except ContractError as e:
        raise ValidationFailure(f"contract: {e}")
    os.makedirs(out, exist_ok=True)
    host.to_csv(os.path.join(out, "scores.csv"))
    block_scores.to_csv(os.path.join(out, "blocks.csv"), blocks)
    _write_json(os.path.join(out, "kept.json"), report.to_json_doc())
    _manifest(out, "select", contract,
              {"scorer": scorer, "stage2": stage2, "capture": {"T": cap.T}})
    click.echo(f"kept {len(report.kept)} of {cap.T} tokens (k={report.k})")


def _diagnose_common(fn):
    fn = click.option("--capture", "capture_path", required=True)(fn)
    fn = click.option("--contract", "contract_path", required=True)(fn)
    fn = click.option("--out", required=True)(fn)
    return fn


def _write_boundary_csv(path, units):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["in_token", "out_token", "margin"])
        for u in units:
            w.writerow([u.in_token, u.out_token, format(u.margin, ".12g")])


def _compare_rankings(cap, contract, name_a, rank_a, name_b, rank_b, out, command):
    k = budget_tokens(cap.T, contract.budget_ratio)
    fp = contract_fingerprint(contract)
    kept_a = top_k(rank_a, k, fingerprint=fp)
    kept_b = top_k(rank_b, k, fingerprint=fp)
    units = diagnostics.disagreement_boundary(kept_a, kept_b, rank_a, rank_b)
    tail = access.score_cumulative(cap, contract).values
    p_T = tail / tail.sum()  # pooled access mass as the reference law
    doc = {
        "selector_a": name_a, "selector_b": name_b, "k": k,
        "disagreements": len(units),
        "eta_proj_a": access.projection_residual(kept_a, p_T),
        "eta_proj_b": access.projection_residual(kept_b, p_T),
    }
    os.makedirs(out, exist_ok=True)
    _write_boundary_csv(os.path.join(out, "boundary.csv"), units)
    _write_json(os.path.join(out, "report.json"), doc)
    _manifest(out, command, contract)
    click.echo(f"{len(units)} boundary units at k={k}")


@main.group()
def diagnose():
    """Fixed-contract comparisons between selector stages."""


@diagnose.command("stage1")
@_diagnose_common
@click.option("--scorer-a", type=click.Choice(SCORERS), required=True)
@click.option("--scorer-b", type=click.Choice(SCORERS), required=True)
@click.option("--contract-b", "contract_b_path", default=None)
@click.option("--allow-contract-drift", is_flag=True)
def diagnose_stage1(capture_path, contract_path, out, scorer_a, scorer_b,
                    contract_b_path, allow_contract_drift):
    """Compare two Stage I scorers under one contract."""
    contract = _load_contract(contract_path)
    contract_b = _load_contract(contract_b_path) if contract_b_path else contract
    if contract_fingerprint(contract) != contract_fingerprint(contract_b):
        if not allow_contract_drift:
            raise ValidationFailure(
                "contract fingerprints differ; pass --allow-contract-drift "
                "to compare as a transfer/sensitivity check")
    cap = _load_capture(capture_path)
    try:
        rank_a = _score(cap, contract, scorer_a)
        rank_b = _score(cap, contract_b, scorer_b)
    except ContractError as e:
        raise ValidationFailure(f"contract: {e}")
    _compare_rankings(cap, contract, scorer_a, rank_a, scorer_b, rank_b, out,
                      "diagnose stage1")
    if contract_fingerprint(contract) != contract_fingerprint(contract_b):
        click.echo("note: contract drift allowed -- transfer/sensitivity run")


@diagnose.command("stage2")
@_diagnose_common
@click.option("--scorer", type=click.Choice(SCORERS), default="obs_window")
@click.option("--variant", default="full")
def diagnose_stage2(capture_path, contract_path, out, scorer, variant):
    """Host ranking vs Stage II value-consequence substitution."""
    contract = _load_contract(contract_path)
    cap = _load_capture(capture_path)
    try:
        host, _, blocks, _ = _run_selection(cap, contract, scorer, "none")
        bank = access.build_proxy_bank(cap.T, max(1, cap.T // 8))
        mode, alpha = _parse_stage2(variant)
        if mode == "alpha":
            bs = value_mod.group_block_scores(cap, contract, bank, blocks,
                                              variant="alpha_blend", alpha=alpha)
        else:
            bs = value_mod.group_block_scores(cap, contract, bank, blocks,
                                              variant=mode or "full")
        sub = value_mod.stage2_substitute(host, bs, blocks)
    except (ContractError, ValueError) as e:
        raise ValidationFailure(str(e))
    _compare_rankings(cap, contract, scorer, host, f"stage2:{variant}", sub,
                      out, "diagnose stage2")


@diagnose.command("stage3")
@_diagnose_common
@click.option("--scorer", type=click.Choice(SCORERS), default="obs_window")
def diagnose_stage3(capture_path, contract_path, out, scorer):
    """Strict block projection vs token-fill control."""
    contract = _load_contract(contract_path)
    cap = _load_capture(capture_path)
    try:
        host, block_scores, blocks, _ = _run_selection(cap, contract, scorer,
                                                       "none")
    except ContractError as e:
        raise ValidationFailure(f"contract: {e}")
    k = budget_tokens(cap.T, contract.budget_ratio)
    strict = projection.block_project(block_scores, blocks, k, contract)
    filled = projection.token_fill(strict, host)
    tail = access.score_cumulative(cap, contract).values
    p_T = tail / tail.sum()
    doc = {
        "k": k, "k_b": strict.k_b, "eps_lat": strict.eps_lat,
        "strict_slack": strict.slack, "filled_slack": filled.slack,
        "fill_tokens": [int(i) for i in filled.fill_tokens],
        "eta_proj_strict": access.projection_residual(strict.kept, p_T),
        "eta_proj_filled": access.projection_residual(filled.kept, p_T),
    }
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "report.json"), doc)
    _manifest(out, "diagnose stage3", contract, {"scorer": scorer})
    click.echo(f"eps_lat={strict.eps_lat}, post-fill slack={filled.slack}")


@diagnose.command("boundary")
@_diagnose_common
@click.option("--scorer-a", type=click.Choice(SCORERS), required=True)
@click.option("--scorer-b", type=click.Choice(SCORERS), required=True)
def diagnose_boundary(capture_path, contract_path, out, scorer_a, scorer_b):
    """Emit only the disagreement-boundary unit list."""
    contract = _load_contract(contract_path)
    cap = _load_capture(capture_path)
    try:
        rank_a = _score(cap, contract, scorer_a)
        rank_b = _score(cap, contract, scorer_b)
    except ContractError as e:
        raise ValidationFailure(f"contract: {e}")
    k = budget_tokens(cap.T, contract.budget_ratio)
    fp = contract_fingerprint(contract)
    units = diagnostics.disagreement_boundary(
        top_k(rank_a, k, fingerprint=fp), top_k(rank_b, k, fingerprint=fp),
        rank_a, rank_b)
    os.makedirs(out, exist_ok=True)
    _write_boundary_csv(os.path.join(out, "boundary.csv"), units)
    _manifest(out, "diagnose boundary", contract,
              {"scorer_a": scorer_a, "scorer_b": scorer_b})
    click.echo(f"{len(units)} boundary units")


@main.group("rchannel")
def rchannel_group():
    """Finite-space r-channel lower-bound lab."""


@rchannel_group.command("sweep")
@click.option("--n", "n_values", default="2,3,4")
@click.option("--r", "r_values", default=None, help="Default: 1..n per law.")
@click.option("--eps", "eps_values", default="0,0.1")
@click.option("--instances", type=int, default=3)
@click.option("--q", "Q", type=int, default=12)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True)
def rchannel_sweep(n_values, r_values, eps_values, instances, Q, seed, out):
    try:
        ns = [int(x) for x in n_values.split(",")]
        rs = [int(x) for x in r_values.split(",")] if r_values else None
        eps = [float(x) for x in eps_values.split(",")]
        rows = rchannel.sweep_rows(n_values=ns, r_values=rs, eps_values=eps,
                                   instances=instances, Q=Q, seed=seed)
    except (ValueError, rchannel.SizeError) as e:
        raise click.UsageError(str(e))
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["n", "eps", "r", "instance", "floor", "min_tv"])
        for row in rows:
            w.writerow([row["n"], format(row["eps"], ".12g"), row["r"],
                        row["instance"], format(row["floor"], ".12g"),
                        format(row["min_tv"], ".12g")])
    click.echo(f"{len(rows)} sweep rows -> {out}")


@main.group("stats")
def stats_group():
    """Confirmatory statistics over cell-grid CSVs."""


def _cells(path):
    try:
        return diagnostics.load_cell_grid(path)
    except (OSError, KeyError, ValueError) as e:
        raise ValidationFailure(f"cannot read cell grid: {e}")


def _bucket(cell):
    return f"{cell.phi_bucket}/H{'+' if cell.H_c > 0 else '0' if cell.H_c == 0 else '-'}"


@stats_group.command("split")
@click.option("--cells", "cells_path", required=True)
@click.option("--out", required=True)
def stats_split(cells_path, out):
    cells = _cells(cells_path)
    reports = stats_mod.split_rates(cells, _bucket)
    doc = [{"bucket": r.bucket, "count": r.count, "rate": r.rate,
            "mean_delta": r.mean_delta} for r in reports]
    _write_json(out, {"tool": "kvss", "version": __version__, "split": doc})
    click.echo(f"{len(reports)} buckets -> {out}")


@stats_group.command("permutation")
@click.option("--cells", "cells_path", required=True)
@click.option("--n-perm", type=int, default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True)
def stats_permutation(cells_path, n_perm, seed, out):
    cells = _cells(cells_path)
    try:
        obs, mean, ci, p = stats_mod.permutation_null(
            cells, stats_mod.rate_gap_statistic, n_perm=n_perm, seed=seed)
    except ValueError as e:
        raise click.UsageError(str(e))
    _write_json(out, {"tool": "kvss", "version": __version__,
                      "observed": obs, "null_mean": mean,
                      "null_95": list(ci), "p": p,
                      "n_perm": n_perm, "seed": seed})
    click.echo(f"observed={obs:.4g} p={p:.4g}")


@stats_group.command("bootstrap")
@click.option("--cells", "cells_path", required=True)
@click.option("--cluster", default="task")
@click.option("--n-boot", type=int, default=2000)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True)
def stats_bootstrap(cells_path, cluster, n_boot, seed, out):
    cells = _cells(cells_path)
    key = lambda c: getattr(c, cluster)
    try:
        est, ci = stats_mod.cluster_bootstrap(
            cells, key, stats_mod.rate_gap_statistic, n_boot=n_boot, seed=seed)
    except (AttributeError, ValueError) as e:
        raise click.UsageError(str(e))
    _write_json(out, {"tool": "kvss", "version": __version__,
                      "estimate": est, "ci_95": list(ci),
                      "cluster": cluster, "n_boot": n_boot, "seed": seed})
    click.echo(f"estimate={est:.4g} CI=({ci[0]:.4g}, {ci[1]:.4g})")


@stats_group.command("loo")
@click.option("--cells", "cells_path", required=True)
@click.option("--cluster", default="task")
@click.option("--out", required=True)
def stats_loo(cells_path, cluster, out):
    cells = _cells(cells_path)
    key = lambda c: getattr(c, cluster)
    try:
        rows, lo, hi = stats_mod.leave_one_out(cells, key,
                                               stats_mod.rate_gap_statistic)
    except (AttributeError, ValueError) as e:
        raise click.UsageError(str(e))
    _write_json(out, {"tool": "kvss", "version": __version__,
                      "rows": [{"dropped": n, "value": v} for n, v in rows],
                      "min": {"dropped": lo[0], "value": lo[1]},
                      "max": {"dropped": hi[0], "value": hi[1]}})
    click.echo(f"{len(rows)} clusters; extrema [{lo[1]:.4g}, {hi[1]:.4g}]")


@stats_group.command("fisher")
@click.option("--cells", "cells_path", required=True)
@click.option("--out", required=True)
def stats_fisher(cells_path, out):
    """One-sided Fisher on the (H_c > 0) x (delta > 0) 2x2 table."""
    cells = _cells(cells_path)
    a = sum(1 for c in cells if c.H_c > 0 and c.delta_c > 0)
    b = sum(1 for c in cells if c.H_c > 0 and c.delta_c <= 0)
    cc = sum(1 for c in cells if c.H_c <= 0 and c.delta_c > 0)
    d = sum(1 for c in cells if c.H_c <= 0 and c.delta_c <= 0)
    p = stats_mod.fisher_one_sided([[a, b], [cc, d]])
    _write_json(out, {"tool": "kvss", "version": __version__,
                      "table": [[a, b], [cc, d]], "p": p})
    click.echo(f"p={p:.6g}")


@stats_group.command("spearman")
@click.option("--cells", "cells_path", required=True)
@click.option("--x-col", default="phi")
@click.option("--y-col", default="delta_c")
@click.option("--out", required=True)
def stats_spearman(cells_path, x_col, y_col, out):
    cells = _cells(cells_path)
    try:
        x = [getattr(c, x_col) for c in cells]
        y = [getattr(c, y_col) for c in cells]
        rho = stats_mod.spearman(x, y)
    except (AttributeError, ValueError) as e:
        raise click.UsageError(str(e))
    _write_json(out, {"tool": "kvss", "version": __version__,
                      "x": x_col, "y": y_col, "rho": rho})
    click.echo(f"rho={rho:.6g}")


@stats_group.command("auc")
@click.option("--cells", "cells_path", required=True)
@click.option("--out", required=True)
def stats_auc(cells_path, out):
    """Pairwise AUC of delta_c against the (H_c > 0) label."""
    cells = _cells(cells_path)
    try:
        auc = stats_mod.pairwise_auc([c.delta_c for c in cells],
                                     [c.H_c > 0 for c in cells])
    except ValueError as e:
        raise click.UsageError(str(e))
    _write_json(out, {"tool": "kvss", "version": __version__, "auc": auc})
    click.echo(f"auc={auc:.6g}")


if __name__ == "__main__":
    main()
