#!/usr/bin/env python3
import argparse
import os
import sys
from datetime import datetime
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np

from colors import Colors, colorize_metric
from config import load_config, validate_config
from errors import HypeError
from storage import create_storage_backend
from train_eval import METRIC_FIELDS, paired_ttest

SUMMARY_FIELDS = ["config_name", "target", "n_folds"] + \
    [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "sd")] + ["reference", "auroc_p_value"]


def _group(rows: Iterable[Mapping]) -> Dict[tuple, List[Mapping]]:
    groups: Dict[tuple, List[Mapping]] = {}
    for row in rows:
        groups.setdefault((row["config_name"], f"{float(row['target']):.2f}"), []).append(row)
    for key in groups:
        groups[key].sort(key=lambda r: int(r["fold_index"]))
    return groups


def summarize_results(rows: Iterable[Mapping], reference: Optional[str] = None,
                      metric: str = "auroc") -> List[Dict]:
    """Mean and sample sd of every metric per (config, target), with a paired t-test against `reference`."""
    groups = _group(rows)
    summary = []
    for (name, target), members in sorted(groups.items()):
        out = {"config_name": name, "target": target, "n_folds": len(members)}
        for m in METRIC_FIELDS:
            values = np.array([float(r[m]) for r in members])
            out[f"{m}_mean"] = float(values.mean())
            out[f"{m}_sd"] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out["reference"] = reference or ""
        out[f"{metric}_p_value"] = ""
        ref = groups.get((reference, target)) if reference else None
        if ref and name != reference:
            out[f"{metric}_p_value"] = compare_folds(members, ref, metric)
        summary.append(out)
    return summary


def compare_folds(rows: List[Mapping], reference_rows: List[Mapping], metric: str = "auroc") -> float:
    """Paired t-test p-value over the folds both configurations completed."""
    a = {int(r["fold_index"]): float(r[metric]) for r in rows}
    b = {int(r["fold_index"]): float(r[metric]) for r in reference_rows}
    shared = sorted(set(a) & set(b))
    if len(shared) < 2:
        return float("nan")
    return paired_ttest([a[f] for f in shared], [b[f] for f in shared])


def format_cell(mean: float, sd: float) -> str:
    return f"{mean:.2f} ± {sd:.2f}"


def format_summary_table(summary: List[Dict], colored: bool = True) -> str:
    """Table of mean ± sd per metric, one line per (config, target)."""
    short = {"balanced_accuracy": "BA", "sensitivity": "Sens", "specificity": "Spec", "accuracy": "Acc",
             "auroc": "AUROC", "f1": "F1", "npv": "NPV"}
    width = max([len(s["config_name"]) for s in summary] + [6])
    header = f"{'config':<{width}}  tgt   " + "  ".join(f"{short[m]:^11}" for m in METRIC_FIELDS) + "  p(AUROC)"
    lines = [Colors.bold(header, colored)]
    for s in summary:
        cells = "  ".join(format_cell(s[f"{m}_mean"], s[f"{m}_sd"]) for m in METRIC_FIELDS)
        p = s.get("auroc_p_value", "")
        p_text = ""
        if p != "" and p == p:
            p_text = f"{p:.3f}" + ("*" if p < 0.05 else "")
        lines.append(f"{s['config_name']:<{width}}  {s['target']}  {cells}  {p_text}")
    return "\n".join(lines)


def format_config_summary(cfg: dict) -> str:
    """Format key configuration settings"""
    extra_targets = ", ".join(map(str, cfg["extra_sensitivity_targets"]))
    return "\n".join([
        "📋 Key Configuration Settings:",
        f"   Data:",
        f"     • prepared_dir: {cfg['prepared_dir']}",
        f"     • representation: {cfg['representation']}",
        f"   Model & Objective:",
        f"     • variant: {cfg['variant']}",
        f"     • objective: {cfg['objective']} (scheduler: {cfg['scheduler']}, tau: {cfg['tau']})",
        f"   Evaluation:",
        f"     • folds: {cfg['folds']}, seed: {cfg['seed']}",
        f"     • sensitivity_target: {cfg['sensitivity_target']} (+ {extra_targets})",
        f"     • threshold_source: {cfg['threshold_source']}",
        f"   Storage Backend:",
        f"     • storage_type: {cfg['storage_type']}",
    ])


def print_stats_report(cfg: dict, results_dir: str, reference: Optional[str] = None) -> int:
    """Print the results ledger of `results_dir` as a summary table"""
    colored = cfg.get("colored_output", True)
    print("=" * 60)
    print("🩺 HYPERTENSION SCREENING - RESULTS REPORT")
    print(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 60)
    print(format_config_summary(cfg))
    print()

    storage = create_storage_backend(cfg, results_dir)
    if not storage.exists():
        print(Colors.error(f"❌ ERROR: no results ledger in {results_dir}", colored))
        print("   Run 'train' or 'ablate' first to create it")
        return 1
    rows = list(storage.read_results().values())
    summary = summarize_results(rows, reference)
    print(format_summary_table(summary, colored))
    print()
    best = max((s for s in summary if s["target"] == f"{cfg['sensitivity_target']:.2f}"),
               key=lambda s: s["auroc_mean"], default=None)
    if best:
        print(f"Best AUROC: {best['config_name']} "
              f"{colorize_metric('auroc', best['auroc_mean'], colored)} over {best['n_folds']} folds")
    return 0


def main():
    parser = argparse.ArgumentParser(description="Summarize a cross-validation results ledger")
    parser.add_argument("--config", required=True, help="Path to INI config (e.g., ./config.ini)")
    parser.add_argument("--results-dir", help="Directory holding the ledger (default: [paths] output_dir)")
    parser.add_argument("--reference", help="Config name to paired-t-test every other config against")
    args = parser.parse_args()

    try:
        cfg = load_config(args.config)
    except HypeError as e:
        print(e.one_line(), file=sys.stderr)
        sys.exit(1)

    config_issues = validate_config(cfg)
    if config_issues:
        print("Configuration issues found:", file=sys.stderr)
        for issue in config_issues:
            print(f"  - {issue}", file=sys.stderr)
        sys.exit(2)

    results_dir = args.results_dir or cfg["output_dir"]
    if not os.path.isdir(results_dir):
        print(f"error: validation: results directory {results_dir} does not exist", file=sys.stderr)
        sys.exit(1)
    sys.exit(print_stats_report(cfg, results_dir, args.reference))


if __name__ == "__main__":
    main()
