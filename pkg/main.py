#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

import storage
from colors import Colors, colorize_metric, setup_logging
from config import apply_overrides, default_config, load_config, validate_config, write_resolved_config
from errors import ConfigError, HypeError, ValidationError
from signal_ingest import label_from_bp, load_recording, read_label_manifest
from stats import SUMMARY_FIELDS, format_summary_table, summarize_results
from train_eval import (PreparedDataset, prepare_cohort, run_cross_validation, stratified_kfold, train_fold,
                        evaluate_scores)
from workers import run_parallel, thread_count

log = logging.getLogger(__name__)

FLAG_KEYS = {
    "seed": "train.seed", "representation": "tfr.representation", "objective": "objective.objective",
    "scheduler": "objective.scheduler", "variant": "model.variant",
}


# -- config resolution ----------------------------------------------------------------------

def parse_set_flags(items: Sequence[str]) -> Dict[str, str]:
    overrides = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[name.strip()] = value.strip()
    return overrides


def resolve_config(args: argparse.Namespace) -> Tuple[dict, List[str]]:
    """Config file (or built-in defaults) with --set and dedicated flags applied, plus validation issues."""
    cfg = load_config(args.config) if args.config else default_config()
    overrides = parse_set_flags(args.set)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if args.epochs is not None:
        for key in ("train.pretrain_epochs", "train.finetune_epochs", "train.supervised_epochs"):
            overrides[key] = str(args.epochs)
    if args.force:
        overrides["run.force"] = "true"
    cfg = apply_overrides(cfg, overrides)
    return cfg, validate_config(cfg)


def config_name(cfg: dict) -> str:
    return f"{cfg['representation']}-{cfg['objective']}-{cfg['variant']}"


def prepared_path(cfg: dict, representation: Optional[str] = None) -> str:
    return os.path.join(cfg["prepared_dir"], representation or cfg["representation"])


# -- shared steps ---------------------------------------------------------------------------

def load_cohort(data_dir: str):
    """Recordings and labels from a `labels.csv` + `wav/<recording_id>.wav` directory, in id order."""
    labels_path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(labels_path):
        raise ValidationError(f"{data_dir} has no labels.csv; run 'synth' first or point [paths] data_dir at a cohort")
    readings = read_label_manifest(labels_path)
    recordings, labels = {}, {}
    for rid in sorted(readings):
        path = os.path.join(data_dir, "wav", f"{rid}.wav")
        if not os.path.exists(path):
            log.warning("Skipping %s: no WAV at %s", rid, path)
            continue
        recordings[rid] = load_recording(path)
        labels[rid] = label_from_bp(readings[rid])
    return recordings, labels


def prepare_dataset(cfg: dict) -> PreparedDataset:
    recordings, labels = load_cohort(cfg["data_dir"])
    data = prepare_cohort(recordings, labels, cfg)
    out_dir = prepared_path(cfg)
    storage.save_prepared(out_dir, data)
    if cfg["dump_views"]:
        dump_views(data, os.path.join(out_dir, "dumps"))
    write_resolved_config(cfg, out_dir)
    return data


def dump_views(data: PreparedDataset, out_dir: str) -> None:
    from tfr import REPRESENTATION_KINDS, View, dump_view

    os.makedirs(out_dir, exist_ok=True)
    kinds = REPRESENTATION_KINDS[data.representation]
    for sid, stack in zip(data.sample_ids, data.views):
        for w, window in enumerate(stack):
            for kind, grid in zip(kinds, window):
                dump_view(os.path.join(out_dir, f"{sid}_w{w}_{kind.name.lower()}.tfv"),
                          View(grid=grid.astype(np.float64), kind=kind, normalized=True))
    log.info("Dumped %d view grids to %s", data.views.shape[0] * data.views.shape[1] * len(kinds), out_dir)


def load_or_prepare(cfg: dict, representation: Optional[str] = None) -> PreparedDataset:
    """Prepared views for the representation, preparing them from the cohort on first use."""
    path = prepared_path(cfg, representation)
    if os.path.exists(os.path.join(path, "prepared.json")):
        data = storage.load_prepared(path)
        if data.representation != (representation or cfg["representation"]):
            raise ValidationError(f"{path} holds {data.representation} views; rerun 'prepare --force'")
        return data
    log.info("No prepared %s views in %s; preparing from %s", representation or cfg["representation"], path,
             cfg["data_dir"])
    return prepare_dataset(dict(cfg, representation=representation or cfg["representation"]))


def write_run_outputs(out_dir: str, result, cfg: dict, checkpoints: bool = True) -> List[Dict]:
    """scores, ledger, summary and loss history of one configuration's cross-validation."""
    storage.write_scores(os.path.join(out_dir, "scores.csv"), result.score_rows())
    ledger = storage.create_storage_backend(cfg, out_dir)
    ledger.write_results(result.result_rows())
    storage.write_history(os.path.join(out_dir, "loss_history.csv"), result.history_rows())
    if checkpoints:
        for fold in result.folds:
            fold.model.save(os.path.join(out_dir, f"fold{fold.fold_index}.npz"))
    rows = list(ledger.read_results().values())
    summary = summarize_results([r for r in rows if r["config_name"] == result.config_name])
    storage.write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, summary)
    return summary


# -- commands -------------------------------------------------------------------------------

def cmd_synth(cfg: dict, args) -> int:
    from synth import CohortConfig, dataset_checksum, generate_cohort

    out_dir = args.out or cfg["data_dir"]
    cohort_cfg = CohortConfig.from_config(cfg)
    generate_cohort(cohort_cfg, out_dir=out_dir)
    write_resolved_config(cfg, out_dir)
    n_norm, n_hyp = cohort_cfg.counts
    print(f"✅ Cohort written to {out_dir}: {n_norm} normotensive, {n_hyp} hypertensive")
    print(f"checksum={dataset_checksum(out_dir)}")
    return 0


def cmd_prepare(cfg: dict, args) -> int:
    path = prepared_path(cfg)
    if os.path.exists(os.path.join(path, "prepared.json")) and not cfg["force"]:
        print(f"Prepared views already in {path} (use --force to rebuild)")
        data = storage.load_prepared(path)
    else:
        data = prepare_dataset(cfg)
    print(f"✅ {len(data)} samples from {len(set(data.recording_ids))} recordings "
          f"({data.representation}, {data.channels} channel(s)) in {path}")
    print(f"checksum={storage.prepared_checksum(data)}")
    return 0


def _parse_folds(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"--folds expects comma-separated integers, got {text!r}")


def cmd_train(cfg: dict, args) -> int:
    colored = cfg["colored_output"]
    data = load_or_prepare(cfg)
    name = args.name or config_name(cfg)
    out_dir = os.path.join(cfg["output_dir"], name)
    write_resolved_config(cfg, out_dir)
    result = run_cross_validation(data, cfg, name, folds=_parse_folds(args.folds))
    summary = write_run_outputs(out_dir, result, cfg)
    print(format_summary_table(summary, colored))
    print(f"Mean {colorize_metric('AUROC', result.mean_auroc(), colored)} over {len(result.folds)} folds")
    print(f"Outputs written to {out_dir}")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    scores_path = args.scores or os.path.join(cfg["output_dir"], config_name(cfg), "scores.csv")
    out_dir = args.out or os.path.dirname(os.path.abspath(scores_path))
    name = args.name or os.path.basename(out_dir)
    reports = evaluate_scores(storage.read_scores(scores_path), cfg)
    rows = [r.to_row(name) for r in reports]
    storage.write_csv(os.path.join(out_dir, "eval_results.csv"), storage.RESULT_FIELDS, rows)
    write_resolved_config(cfg, out_dir)
    print(format_summary_table(summarize_results(rows), cfg["colored_output"]))
    for r in reports:
        if r.undefined:
            print(Colors.warning(f"fold {r.fold_index} target {r.target:.2f}: undefined {', '.join(r.undefined)}",
                                 cfg["colored_output"]))
    return 0


def _yaml_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def load_matrix(path: str, base_cfg: dict) -> Tuple[str, Dict[str, dict]]:
    """(reference, {cell name: resolved cfg}); every malformed cell is reported before anything runs."""
    if not os.path.exists(path):
        raise ValidationError(f"ablation matrix {path} not found")
    with open(path, encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: malformed YAML ({e})")
    cells = doc.get("cells") if isinstance(doc, dict) else None
    if not isinstance(cells, dict) or not cells:
        raise ConfigError(f"{path}: expected a non-empty 'cells' mapping")
    reference = str(doc.get("reference") or next(iter(cells)))
    if reference not in cells:
        raise ConfigError(f"{path}: reference cell {reference!r} is not defined")

    resolved, issues = {}, []
    for name, overrides in cells.items():
        if overrides is not None and not isinstance(overrides, dict):
            issues.append(f"{name}: overrides must be a mapping")
            continue
        try:
            cell_cfg = apply_overrides(base_cfg, {str(k): _yaml_text(v) for k, v in (overrides or {}).items()})
        except HypeError as e:
            issues.append(f"{name}: {e}")
            continue
        issues.extend(f"{name}: {issue}" for issue in validate_config(cell_cfg))
        resolved[str(name)] = cell_cfg
    if issues:
        raise ConfigError(f"{path}: {len(issues)} invalid cell(s): " + "; ".join(issues))
    return reference, resolved


def cmd_ablate(cfg: dict, args) -> int:
    colored = cfg["colored_output"]
    reference, cells = load_matrix(args.matrix, cfg)
    if args.only:
        wanted = {n.strip() for n in args.only.split(",") if n.strip()}
        unknown = wanted - set(cells)
        if unknown:
            raise ConfigError(f"--only names unknown cells: {', '.join(sorted(unknown))}")
        cells = {n: c for n, c in cells.items() if n in wanted or n == reference}

    out_dir = os.path.join(cfg["output_dir"], "ablation")
    write_resolved_config(cfg, out_dir)
    ledger = storage.create_storage_backend(cfg, out_dir)
    datasets = {rep: load_or_prepare(cfg, rep) for rep in sorted({c["representation"] for c in cells.values()})}

    work = []
    for name, cell_cfg in cells.items():
        data = datasets[cell_cfg["representation"]]
        done = set() if cfg["force"] else set(ledger.completed_folds(name))
        splits = stratified_kfold(data.recording_labels(), cell_cfg["folds"], cell_cfg["seed"])
        skipped = [s.fold_index for s in splits if s.fold_index in done]
        if skipped:
            log.info("%s: folds %s already in the ledger, skipping", name, skipped)
        work.extend((name, split) for split in splits if split.fold_index not in done)
    print(f"Ablation: {len(cells)} cells, {len(work)} (cell, fold) runs, reference={reference}")

    write_lock = threading.Lock()

    def run_cell(item):
        name, split = item
        cell_cfg = cells[name]
        outcome = train_fold(datasets[cell_cfg["representation"]], split, cell_cfg)
        cell_dir = os.path.join(out_dir, name)
        with write_lock:
            ledger.write_results(r.to_row(name) for r in outcome.reports)
            storage.write_csv(os.path.join(cell_dir, f"scores_fold{split.fold_index}.csv"),
                              storage.SCORE_FIELDS, outcome.scores)
            storage.write_history(os.path.join(cell_dir, f"loss_history_fold{split.fold_index}.csv"),
                                  [dict(fold=split.fold_index, **row) for row in outcome.history.rows])
            write_resolved_config(cell_cfg, cell_dir)
        return name, split.fold_index

    run_parallel(run_cell, work, args.jobs or thread_count())

    rows = [r for r in ledger.read_results().values() if r["config_name"] in cells]
    summary = summarize_results(rows, reference)
    storage.write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, summary)
    print(format_summary_table(summary, colored))
    print(f"Summary written to {os.path.join(out_dir, 'summary.csv')}")
    return 0


def cmd_analyze(cfg: dict, args) -> int:
    from analytics import beat_power_rows, entropy_report, write_entropy_report, write_rows
    from plots import plot_entropy_profiles

    data = load_or_prepare(cfg)
    out_dir = args.out or os.path.join(cfg["output_dir"], "analysis", data.representation)
    report = entropy_report(data, cfg)
    paths = write_entropy_report(report, out_dir)
    beat_path = os.path.join(out_dir, "beat_power.csv")
    beat_rows = beat_power_rows(data, cfg)
    if beat_rows:
        write_rows(beat_path, beat_rows)
        paths.append(beat_path)
    else:
        log.warning("No beats detected; %s not written", beat_path)
    paths += plot_entropy_profiles(report, out_dir)
    write_resolved_config(cfg, out_dir)
    for path in paths:
        print(f"   • {path}")
    return 0


def _default_checkpoint(cfg: dict) -> str:
    return os.path.join(cfg["output_dir"], config_name(cfg), "fold0.npz")


def cmd_export(cfg: dict, args) -> int:
    from deploy import export_bundle
    from model_han import HanModel
    from tfr import TfrConfig

    checkpoint = args.checkpoint or _default_checkpoint(cfg)
    if not os.path.exists(checkpoint):
        raise ValidationError(f"checkpoint {checkpoint} not found; run 'train' first")
    model = HanModel.load(checkpoint)
    if not model.inputs:
        log.warning("%s does not record its input settings; using the current [tfr] section", checkpoint)
        model.inputs = {"representation": cfg["representation"], "tfr": asdict(TfrConfig.from_config(cfg))}
    out = args.out or os.path.splitext(checkpoint)[0] + ".hype"
    bundle = export_bundle(model, out)
    write_resolved_config(cfg, os.path.dirname(os.path.abspath(out)))
    print(f"✅ Bundle written to {out} ({bundle.parameter_count:,} parameters, {os.path.getsize(out):,} bytes)")
    return 0


def cmd_bench(cfg: dict, args) -> int:
    from deploy import benchmark_inference, load_bundle

    bundle_path = args.bundle or os.path.splitext(_default_checkpoint(cfg))[0] + ".hype"
    bundle = load_bundle(bundle_path)
    data = load_or_prepare(cfg, bundle.manifest["representation"])
    if len(data) == 0:
        raise ValidationError("no prepared samples to benchmark on")
    result = benchmark_inference(bundle, data.views[0], cfg["n_trials"], cfg["warmup_runs"])
    out_dir = args.out or os.path.dirname(os.path.abspath(bundle_path))
    row = dict(result.to_row(), n_trials=cfg["n_trials"], bundle_bytes=os.path.getsize(bundle_path))
    storage.write_csv(os.path.join(out_dir, "bench.csv"), list(row), [row])
    write_resolved_config(cfg, out_dir)
    print(f"Inference latency: {result.mean_ms:.2f} ± {result.sd_ms:.2f} ms over {cfg['n_trials']} trials "
          f"(p50 {result.p50_ms:.2f}, p95 {result.p95_ms:.2f})")
    return 0


def cmd_plot(cfg: dict, args) -> int:
    from plots import plot_curves

    scores_path = args.scores or os.path.join(cfg["output_dir"], config_name(cfg), "scores.csv")
    out_dir = args.out or os.path.dirname(os.path.abspath(scores_path))
    paths = plot_curves(storage.read_scores(scores_path), out_dir, title=os.path.basename(out_dir))
    write_resolved_config(cfg, out_dir)
    for path in paths:
        print(f"   • {path}")
    return 0


HANDLERS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "analyze": cmd_analyze, "export": cmd_export, "bench": cmd_bench, "plot": cmd_plot,
}


# -- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to INI config (built-in defaults when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override any config key (repeatable)")
    common.add_argument("--seed", type=int, help="Override [train] seed")
    common.add_argument("--representation", help="Override [tfr] representation")
    common.add_argument("--objective", help="Override [objective] objective")
    common.add_argument("--scheduler", help="Override [objective] scheduler")
    common.add_argument("--variant", help="Override [model] variant")
    common.add_argument("--epochs", type=int, help="Set pretrain, finetune and supervised epochs at once")
    common.add_argument("--force", action="store_true", help="Rebuild or rerun even when outputs exist")

    parser = argparse.ArgumentParser(prog="hype", description="Hypertension screening from Doppler ultrasound")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="Generate the synthetic cohort")
    p.add_argument("--out", help="Cohort directory (default: [paths] data_dir)")

    sub.add_parser("prepare", parents=[common], help="Resample, gate, window and transform the cohort")

    p = sub.add_parser("train", parents=[common], help="Cross-validate one configuration")
    p.add_argument("--name", help="Run name (default: representation-objective-variant)")
    p.add_argument("--folds", help="Comma-separated fold indices to run (default: all)")

    p = sub.add_parser("eval", parents=[common], help="Recompute metrics from a scores.csv")
    p.add_argument("--scores", help="scores.csv to evaluate")
    p.add_argument("--name", help="Config name written to the results rows")
    p.add_argument("--out", help="Output directory (default: next to the scores)")

    p = sub.add_parser("ablate", parents=[common], help="Run an ablation matrix")
    p.add_argument("--matrix", default="ablations.yml", help="YAML matrix of named override cells")
    p.add_argument("--only", help="Comma-separated cell names to run (the reference always runs)")
    p.add_argument("--jobs", type=int, help="Concurrent (cell, fold) runs (default: HYPE_THREADS)")

    p = sub.add_parser("analyze", parents=[common], help="Entropy and beat-power reports")
    p.add_argument("--out", help="Report directory")

    p = sub.add_parser("export", parents=[common], help="Export a checkpoint as an inference bundle")
    p.add_argument("--checkpoint", help="Model checkpoint (.npz)")
    p.add_argument("--out", help="Bundle path (default: checkpoint with .hype suffix)")

    p = sub.add_parser("bench", parents=[common], help="Benchmark bundle inference latency")
    p.add_argument("--bundle", help="Inference bundle path")
    p.add_argument("--out", help="Directory for bench.csv")

    p = sub.add_parser("plot", parents=[common], help="ROC and precision-recall images from scores.csv")
    p.add_argument("--scores", help="scores.csv to plot")
    p.add_argument("--out", help="Image directory")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg, issues = resolve_config(args)
    except HypeError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    if issues:
        print(ConfigError("; ".join(issues)).one_line(), file=sys.stderr)
        return 2

    setup_logging(cfg["log_level"], cfg["colored_output"])
    try:
        return HANDLERS[args.command](cfg, args)
    except HypeError as e:
        print(e.one_line(), file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: validation: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
