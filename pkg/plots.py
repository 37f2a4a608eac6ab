#!/usr/bin/env python3
"""Static ROC/PR and entropy images. Agg backend only; nothing is ever shown interactively."""
import logging
import os
from typing import Dict, Iterable, List, Mapping, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from analytics import CLASS_NAMES, EntropyReport  # noqa: E402
from errors import ReportError  # noqa: E402
from train_eval import roc_auc  # noqa: E402

log = logging.getLogger(__name__)

_PNG_METADATA = {"Software": None}


def _arrays(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=int).reshape(-1)
    if s.shape != y.shape:
        raise ReportError(f"{len(s)} scores for {len(y)} labels")
    if y.sum() == 0 or y.sum() == len(y):
        raise ReportError("curves need both classes")
    return s, y


def roc_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) from (0, 0) to (1, 1), one point per distinct score."""
    s, y = _arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return np.r_[0.0, fp / (len(y) - y.sum())], np.r_[0.0, tp / y.sum()]


def pr_curve(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    """(recall, precision) over distinct thresholds, highest threshold first."""
    s, y = _arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    return tp / y.sum(), tp / (last + 1)


def _by_fold(rows: Iterable[Mapping]) -> Dict[int, Tuple[List[float], List[int]]]:
    folds: Dict[int, Tuple[List[float], List[int]]] = {}
    for row in rows:
        scores, labels = folds.setdefault(int(row["fold"]), ([], []))
        scores.append(float(row["score"]))
        labels.append(int(row["label"]))
    return folds


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
    log.info("Wrote %s", path)
    return path


def plot_curves(score_rows: Iterable[Mapping], out_dir: str, title: str = "") -> List[str]:
    """`roc.png` and `pr.png`: one thin line per fold plus the pooled curve."""
    rows = list(score_rows)
    if not rows:
        raise ReportError("no scores to plot")
    folds = _by_fold(rows)
    pooled_s = [float(r["score"]) for r in rows]
    pooled_y = [int(r["label"]) for r in rows]

    fig, ax = plt.subplots(figsize=(5, 5))
    for fold, (s, y) in sorted(folds.items()):
        if 0 < sum(y) < len(y):
            fpr, tpr = roc_curve(s, y)
            ax.plot(fpr, tpr, lw=0.8, alpha=0.5, label=f"fold {fold} (AUROC {roc_auc(s, y):.2f})")
    fpr, tpr = roc_curve(pooled_s, pooled_y)
    ax.plot(fpr, tpr, lw=2.0, color="black", label=f"pooled (AUROC {roc_auc(pooled_s, pooled_y):.2f})")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(f"ROC {title}".strip())
    ax.legend(loc="lower right", fontsize=7)
    paths = [_save(fig, os.path.join(out_dir, "roc.png"))]

    fig, ax = plt.subplots(figsize=(5, 5))
    for fold, (s, y) in sorted(folds.items()):
        if 0 < sum(y) < len(y):
            recall, precision = pr_curve(s, y)
            ax.step(recall, precision, where="post", lw=0.8, alpha=0.5, label=f"fold {fold}")
    recall, precision = pr_curve(pooled_s, pooled_y)
    ax.step(recall, precision, where="post", lw=2.0, color="black", label="pooled")
    prevalence = float(np.mean(pooled_y))
    ax.axhline(prevalence, ls="--", lw=0.8, color="grey", label=f"prevalence {prevalence:.3f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"Precision-recall {title}".strip())
    ax.legend(loc="upper right", fontsize=7)
    paths.append(_save(fig, os.path.join(out_dir, "pr.png")))
    return paths


def plot_entropy_profiles(report: EntropyReport, out_dir: str) -> List[str]:
    """One image per view: per-scale sample entropy (mean ± sd) of both classes and their difference."""
    paths = []
    for kind, diff in report.differences.items():
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
        for profile in (p for p in report.profiles if p.kind is kind):
            scales = np.arange(len(profile.means))
            top.plot(scales, profile.means, label=profile.class_name)
            top.fill_between(scales, profile.means - profile.sds, profile.means + profile.sds, alpha=0.2)
        top.set_ylabel("sample entropy")
        top.legend(fontsize=7)
        bottom.bar(np.arange(len(diff)), np.nan_to_num(diff), color="tab:red")
        bottom.axhline(0.0, color="black", lw=0.6)
        bottom.set_xlabel("scale index")
        bottom.set_ylabel("hypertensive - normotensive")
        top.set_title(f"{kind.name.lower()} view")
        paths.append(_save(fig, os.path.join(out_dir, f"entropy_{kind.name.lower()}.png")))

    fig, ax = plt.subplots(figsize=(6, 4))
    for (kind, label), values in report.image_entropy.items():
        ax.hist(values, bins=30, alpha=0.5, label=f"{kind.name.lower()} / {CLASS_NAMES[label]}")
    ax.set_xlabel("image entropy (bits)")
    ax.set_ylabel("windows")
    ax.legend(fontsize=7)
    paths.append(_save(fig, os.path.join(out_dir, "image_entropy.png")))
    return paths
