#!/usr/bin/env python3
"""Cross-validation harness: preparation, training phases, metrics and significance.

Splits are made per recording, so every augmented sample of a recording stays on
one side of a fold. Test scores are averaged per recording before any metric.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

import seeds
from errors import (
    ArgumentError, DegenerateBatchError, StratificationError, TrainingError, UndefinedMetricError,
)
from model_han import HanConfig, HanModel, build_variant, predict
from objectives import (
    PROTOTYPE_OBJECTIVES, TemperatureSchedule, adaptive_tau, bce_loss, clamp_adaptive_tau, contrastive_loss,
    init_prototypes, temperature,
)
from signal_ingest import (
    GateConfig, HypertensionLabel, RecordingSample, Waveform, assemble_recording_samples, quality_gate, resample,
    segment_windows,
)
from tensor_autodiff import Adam, Graph, Tensor
from tfr import REPRESENTATION_CHANNELS, TfrConfig, build_views
from workers import run_parallel

log = logging.getLogger(__name__)

METRIC_FIELDS = ("auroc", "f1", "sensitivity", "specificity", "npv", "balanced_accuracy", "accuracy")


# -- prepared data ------------------------------------------------------------------------

@dataclass
class PreparedDataset:
    """Sample-level view tensors (N x S x C x H x W, float32) with their recording ids and labels."""
    sample_ids: List[str]
    recording_ids: List[str]
    labels: np.ndarray
    views: np.ndarray
    representation: str = "multiview"
    window_offsets: List[List[float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def channels(self) -> int:
        return int(self.views.shape[2])

    def recording_labels(self) -> Dict[str, int]:
        """Label per recording, in first-seen order."""
        out: Dict[str, int] = {}
        for rid, label in zip(self.recording_ids, self.labels):
            out.setdefault(rid, int(label))
        return out

    def indices_for(self, recording_ids: Iterable[str]) -> np.ndarray:
        wanted = set(recording_ids)
        return np.array([i for i, rid in enumerate(self.recording_ids) if rid in wanted], dtype=int)


def sample_views(sample: RecordingSample, representation: str, cfg: TfrConfig) -> np.ndarray:
    """S x C x H x W stack for one RecordingSample."""
    return np.stack([
        build_views(w, representation, cfg, window_ref=f"{sample.sample_id}/w{i}").as_array()
        for i, w in enumerate(sample.windows)
    ])


def prepare_recording(wav: Waveform, recording_id: str, label: HypertensionLabel,
                      cfg: dict) -> Tuple[List[RecordingSample], np.ndarray, Dict[str, int]]:
    """Resample, segment, gate, group and transform one recording."""
    prepared = resample(wav, cfg["target_rate"], cfg["kaiser_beta"])
    windows = segment_windows(prepared, cfg["window_s"], cfg["stride_s"])
    gate = GateConfig.from_config(cfg)
    gated = [w for w in windows if quality_gate(w, gate)]
    samples = assemble_recording_samples(gated, label, cfg["max_batches"], recording_id=recording_id,
                                         windows_per_sample=cfg["windows_per_sample"])
    tfr_cfg = TfrConfig.from_config(cfg)
    channels = REPRESENTATION_CHANNELS[cfg["representation"]]
    if samples:
        views = np.stack([sample_views(s, cfg["representation"], tfr_cfg) for s in samples])
    else:
        views = np.zeros((0, cfg["windows_per_sample"], channels, cfg["n_scales"], cfg["n_time_bins"]),
                         dtype=np.float32)
    return samples, views, {"windows": len(windows), "gated": len(gated), "samples": len(samples)}


def prepare_cohort(recordings: Mapping[str, Waveform], labels: Mapping[str, HypertensionLabel], cfg: dict,
                   max_concurrent: Optional[int] = None) -> PreparedDataset:
    """Prepare every recording (in parallel) into one PreparedDataset, in recording order."""
    rids = list(recordings)
    results = run_parallel(lambda rid: prepare_recording(recordings[rid], rid, labels[rid], cfg), rids,
                           max_concurrent)
    sample_ids, recording_ids, sample_labels, views, offsets = [], [], [], [], []
    totals = {"windows": 0, "gated": 0, "samples": 0, "dropped": 0}
    for rid, (samples, arr, counters) in zip(rids, results):
        for key in ("windows", "gated", "samples"):
            totals[key] += counters[key]
        if not samples:
            totals["dropped"] += 1
            continue
        for s in samples:
            sample_ids.append(s.sample_id)
            recording_ids.append(rid)
            sample_labels.append(s.label.value)
            offsets.append(s.window_offsets)
        views.append(arr)
    log.info("Prepared %d samples from %d recordings: %d/%d windows passed the gate, %d recordings dropped",
             totals["samples"], len(rids), totals["gated"], totals["windows"], totals["dropped"])
    channels = REPRESENTATION_CHANNELS[cfg["representation"]]
    stacked = np.concatenate(views) if views else np.zeros(
        (0, cfg["windows_per_sample"], channels, cfg["n_scales"], cfg["n_time_bins"]), dtype=np.float32)
    return PreparedDataset(sample_ids=sample_ids, recording_ids=recording_ids,
                           labels=np.array(sample_labels, dtype=int), views=stacked,
                           representation=cfg["representation"], window_offsets=offsets)


# -- folds and batches ----------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]


def stratified_kfold(labels: Mapping[str, int], k: int = 5, seed: int = 0) -> List[FoldSplit]:
    """Recording-level stratified folds.

    Each class is shuffled with its own named stream and dealt round-robin; the deal
    for a class starts where the previous class stopped so fold sizes stay even.
    """
    if k < 2:
        raise ArgumentError(f"k must be >= 2, got {k}")
    by_class: Dict[int, List[str]] = {0: [], 1: []}
    for rid in sorted(labels):
        by_class.setdefault(int(labels[rid]), []).append(rid)
    for cls, members in sorted(by_class.items()):
        if len(members) < k:
            raise StratificationError(f"class {cls} has {len(members)} recordings, need at least {k}")

    tests: List[List[str]] = [[] for _ in range(k)]
    start = 0
    for cls, members in sorted(by_class.items()):
        order = seeds.rng(seed, "folds", cls).permutation(len(members))
        for j, idx in enumerate(order):
            tests[(start + j) % k].append(members[idx])
        start = (start + len(members)) % k

    every = sorted(labels)
    splits = []
    for i in range(k):
        test = set(tests[i])
        splits.append(FoldSplit(fold_index=i, train_ids=tuple(r for r in every if r not in test),
                                test_ids=tuple(sorted(test))))
    return splits


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Index batches that spread positives so each batch gets at least two where the supply allows."""
    labels = np.asarray(labels)
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels != 1))
    n_batches = max(1, math.ceil(len(labels) / batch_size))
    pos_groups = min(n_batches, max(1, len(pos) // 2))
    pos_chunks = np.array_split(pos, pos_groups) + [np.zeros(0, dtype=int)] * (n_batches - pos_groups)
    neg_chunks = np.array_split(neg, n_batches)
    batches = []
    for p, n in zip(pos_chunks, neg_chunks):
        batch = np.concatenate([p, n]).astype(int)
        if len(batch):
            batches.append(rng.permutation(batch))
    return batches


# -- training -------------------------------------------------------------------------------

@dataclass
class TrainingHistory:
    rows: List[Dict] = field(default_factory=list)

    def add(self, phase: str, epoch: int, loss: float, tau: Optional[float] = None) -> None:
        self.rows.append({"phase": phase, "epoch": epoch, "loss": loss, "tau": "" if tau is None else tau})

    def losses(self, phase: str) -> List[float]:
        return [r["loss"] for r in self.rows if r["phase"] == phase]


@dataclass
class PretrainResult:
    prototypes: Optional[Tensor]
    tau: Optional[Tensor]
    history: TrainingHistory


class _Plateau:
    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.stale = 0

    def update(self, loss: float) -> bool:
        """True once the loss has not improved for `patience` epochs."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.patience > 0 and self.stale >= self.patience


def _check_loss(loss: Tensor, step: int, phase: str) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"{phase} loss diverged ({value})", step=step)
    return value


def _progress(phase: str, epoch: int, epochs: int, loss: float, every: int) -> None:
    if every > 0 and (epoch % every == 0 or epoch == epochs - 1):
        log.info("%s epoch %d/%d: loss %.4f", phase, epoch + 1, epochs, loss)


def pretrain_contrastive(model: HanModel, data: PreparedDataset, indices: np.ndarray, objective: str,
                         epochs: int, schedule: TemperatureSchedule, cfg: dict, stream: str = "",
                         history: Optional[TrainingHistory] = None) -> PretrainResult:
    """Optimise a contrastive loss on recording embeddings; updates the encoder in place."""
    history = history or TrainingHistory()
    seed = cfg["seed"]
    labels = data.labels[indices]
    class_counts = {int(c): int(n) for c, n in zip(*np.unique(labels, return_counts=True))}
    prototypes = None
    if objective in PROTOTYPE_OBJECTIVES:
        prototypes = init_prototypes(2, model.cfg.recording_embedding_dim, seeds.rng(seed, stream, "prototypes"))
    tau_param = adaptive_tau(schedule.tau_fixed) if schedule.kind == "adaptive" else None
    params = dict(model.encoder_params)
    if prototypes is not None:
        params["prototypes"] = prototypes
    if tau_param is not None:
        params["tau"] = tau_param
    optimizer = Adam(cfg["learning_rate"])
    plateau = _Plateau(cfg["patience"])
    step = 0

    for epoch in range(epochs):
        tau_value = tau_param if tau_param is not None else temperature(schedule, epoch)
        rng = seeds.rng(seed, stream, "pretrain", epoch)
        epoch_losses = []
        for batch in stratified_batches(labels, cfg["batch_size"], rng):
            g = Graph(training=True, seed=seeds.derive_seed(seed, stream), step=step)
            out = model.encode(g, data.views[indices[batch]])
            try:
                loss = contrastive_loss(g, objective, out.embedding, labels[batch], tau_value, prototypes,
                                        class_counts, cfg["margin"], cfg["cb_beta"])
            except DegenerateBatchError as e:
                log.warning("Skipping contrastive batch at step %d: %s", step, e)
                step += 1
                continue
            epoch_losses.append(_check_loss(loss, step, "pretrain"))
            grads = g.backward(loss, wrt=params.values())
            optimizer.step(params, grads)
            g.commit_buffers()
            if tau_param is not None:
                clamp_adaptive_tau(tau_param)
            step += 1
        if not epoch_losses:
            continue
        mean_loss = float(np.mean(epoch_losses))
        tau_now = tau_param.item() if tau_param is not None else tau_value
        history.add("pretrain", epoch, mean_loss, tau_now)
        _progress("pretrain", epoch, epochs, mean_loss, cfg["log_progress_every_n"])
        if plateau.update(mean_loss):
            log.info("Pretraining stopped early at epoch %d (no improvement for %d epochs)",
                     epoch + 1, cfg["patience"])
            break
    return PretrainResult(prototypes=prototypes, tau=tau_param, history=history)


def _train_head(model: HanModel, embeddings: np.ndarray, labels: np.ndarray, epochs: int, cfg: dict,
                stream: str, history: TrainingHistory) -> None:
    params = model.head_params
    optimizer = Adam(cfg["learning_rate"])
    plateau = _Plateau(cfg["patience"])
    step = 0
    for epoch in range(epochs):
        rng = seeds.rng(cfg["seed"], stream, "finetune", epoch)
        epoch_losses = []
        for batch in stratified_batches(labels, cfg["batch_size"], rng):
            g = Graph(training=True, seed=seeds.derive_seed(cfg["seed"], stream), step=step)
            loss = bce_loss(g, model.project_and_classify(g, embeddings[batch]), labels[batch])
            epoch_losses.append(_check_loss(loss, step, "finetune"))
            optimizer.step(params, g.backward(loss, wrt=params.values()))
            step += 1
        mean_loss = float(np.mean(epoch_losses))
        history.add("finetune", epoch, mean_loss)
        _progress("finetune", epoch, epochs, mean_loss, cfg["log_progress_every_n"])
        if plateau.update(mean_loss):
            log.info("Fine-tuning stopped early at epoch %d", epoch + 1)
            break


def freeze_and_finetune(model: HanModel, data: PreparedDataset, indices: np.ndarray, epochs: int, cfg: dict,
                        stream: str = "", history: Optional[TrainingHistory] = None) -> HanModel:
    """Train only the projector and classifier on embeddings from the frozen (eval-mode) encoder."""
    history = history or TrainingHistory()
    _, embeddings = predict(model, data.views[indices])
    _train_head(model, embeddings, data.labels[indices], epochs, cfg, stream, history)
    return model


def train_supervised(model: HanModel, data: PreparedDataset, indices: np.ndarray, epochs: int, cfg: dict,
                     stream: str = "", history: Optional[TrainingHistory] = None) -> HanModel:
    """End-to-end BCE training of every parameter (the no-pretraining baseline)."""
    history = history or TrainingHistory()
    seed = cfg["seed"]
    labels = data.labels[indices]
    params = model.params
    optimizer = Adam(cfg["learning_rate"])
    plateau = _Plateau(cfg["patience"])
    step = 0
    for epoch in range(epochs):
        rng = seeds.rng(seed, stream, "supervised", epoch)
        epoch_losses = []
        for batch in stratified_batches(labels, cfg["batch_size"], rng):
            g = Graph(training=True, seed=seeds.derive_seed(seed, stream), step=step)
            out = model.forward(g, data.views[indices[batch]])
            loss = bce_loss(g, out.probability, labels[batch])
            epoch_losses.append(_check_loss(loss, step, "supervised"))
            optimizer.step(params, g.backward(loss, wrt=params.values()))
            g.commit_buffers()
            step += 1
        mean_loss = float(np.mean(epoch_losses))
        history.add("supervised", epoch, mean_loss)
        _progress("supervised", epoch, epochs, mean_loss, cfg["log_progress_every_n"])
        if plateau.update(mean_loss):
            log.info("Supervised training stopped early at epoch %d", epoch + 1)
            break
    return model


# -- metrics --------------------------------------------------------------------------------

def _split_classes(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ArgumentError(f"{len(scores)} scores but {len(labels)} labels")
    return scores[labels == 1], scores[labels != 1]


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties between a positive and a negative count one half."""
    pos, neg = _split_classes(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    at_or_below = np.searchsorted(neg_sorted, pos, side="right")
    # twice the Mann-Whitney U, kept integral
    doubled = int(np.sum(below) * 2 + np.sum(at_or_below - below))
    return doubled / (2.0 * len(pos) * len(neg))


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    target: float


def threshold_at_sensitivity(scores, labels, target: float = 0.80) -> OperatingPoint:
    """Largest observed score t such that predicting score >= t reaches `target` sensitivity.

    The all-negative point above the maximum score is never returned, so target 0
    yields the maximum score.
    """
    if not 0 <= target <= 1:
        raise ArgumentError(f"sensitivity target must be in [0, 1], got {target}")
    pos, neg = _split_classes(scores, labels)
    if len(pos) == 0:
        raise UndefinedMetricError("threshold search needs at least one positive")
    candidates = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    caught = len(pos_sorted) - np.searchsorted(pos_sorted, candidates, side="left")
    sens = caught / len(pos_sorted)
    # sensitivity only grows as t falls, and reaches 1 at the smallest candidate
    idx = int(np.argmax(sens >= target))
    t = float(candidates[idx])
    spec = float(np.mean(neg < t)) if len(neg) else 0.0
    return OperatingPoint(threshold=t, sensitivity=float(sens[idx]), specificity=spec, target=target)


@dataclass(frozen=True)
class MetricsReport:
    auroc: float
    f1: float
    sensitivity: float
    specificity: float
    npv: float
    balanced_accuracy: float
    accuracy: float
    threshold: float
    fold_index: int = 0
    target: float = 0.80
    undefined: Tuple[str, ...] = ()

    def to_row(self, config_name: str) -> Dict:
        row = {"config_name": config_name, "fold_index": self.fold_index, "target": f"{self.target:.2f}",
               "threshold": self.threshold}
        row.update({name: getattr(self, name) for name in METRIC_FIELDS})
        row["undefined"] = ";".join(self.undefined)
        return row


def _ratio(num: float, den: float, name: str, undefined: List[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def confusion_metrics(scores, labels, t: float, fold_index: int = 0, target: float = 0.80) -> MetricsReport:
    """Metrics from the 2x2 table at threshold t. Zero-denominator metrics read 0 and are listed in `undefined`."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pred = scores >= t
    actual = labels == 1
    tp = int(np.sum(pred & actual))
    fp = int(np.sum(pred & ~actual))
    tn = int(np.sum(~pred & ~actual))
    fn = int(np.sum(~pred & actual))
    undefined: List[str] = []
    sens = _ratio(tp, tp + fn, "sensitivity", undefined)
    spec = _ratio(tn, tn + fp, "specificity", undefined)
    npv = _ratio(tn, tn + fn, "npv", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    acc = _ratio(tp + tn, len(labels), "accuracy", undefined)
    try:
        auroc = roc_auc(scores, labels)
    except UndefinedMetricError:
        undefined.append("auroc")
        auroc = 0.0
    return MetricsReport(auroc=auroc, f1=f1, sensitivity=sens, specificity=spec, npv=npv,
                         balanced_accuracy=(sens + spec) / 2, accuracy=acc, threshold=float(t),
                         fold_index=fold_index, target=target, undefined=tuple(undefined))


def paired_ttest(metric_a: Sequence[float], metric_b: Sequence[float]) -> float:
    """Two-sided paired t-test p-value on fold-wise differences.

    Zero-variance differences give p = 1.0 when the mean difference is 0 and p = 0.0 otherwise.
    """
    a = np.asarray(metric_a, dtype=np.float64)
    b = np.asarray(metric_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"paired t-test needs equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise ArgumentError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return 1.0 if mean == 0 else 0.0
    t = mean / (sd / math.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))


# -- cross-validation -----------------------------------------------------------------------

def recording_scores(probabilities: np.ndarray, recording_ids: Sequence[str]) -> Dict[str, float]:
    """Mean probability over every sample of a recording."""
    sums: Dict[str, List[float]] = {}
    for p, rid in zip(probabilities, recording_ids):
        sums.setdefault(rid, []).append(float(p))
    return {rid: float(np.mean(v)) for rid, v in sums.items()}


def sensitivity_targets(cfg: dict) -> List[float]:
    targets = [cfg["sensitivity_target"]]
    targets += [t for t in cfg["extra_sensitivity_targets"] if t not in targets]
    return targets


def fold_reports(test_scores: Mapping[str, float], test_labels: Mapping[str, int], fold_index: int, cfg: dict,
                 train_scores: Optional[Mapping[str, float]] = None,
                 train_labels: Optional[Mapping[str, int]] = None) -> List[MetricsReport]:
    """One report per sensitivity target; thresholds come from test or train scores per `threshold_source`."""
    rids = sorted(test_scores)
    scores = [test_scores[r] for r in rids]
    labels = [test_labels[r] for r in rids]
    reports = []
    for target in sensitivity_targets(cfg):
        if cfg["threshold_source"] == "train" and train_scores:
            tr = sorted(train_scores)
            op = threshold_at_sensitivity([train_scores[r] for r in tr], [train_labels[r] for r in tr], target)
        else:
            op = threshold_at_sensitivity(scores, labels, target)
        reports.append(confusion_metrics(scores, labels, op.threshold, fold_index, target))
    return reports


@dataclass
class FoldOutcome:
    fold_index: int
    reports: List[MetricsReport]
    scores: List[Dict]
    history: TrainingHistory
    model: HanModel


def train_fold(data: PreparedDataset, split: FoldSplit, cfg: dict) -> FoldOutcome:
    """Build, train and score one fold; every random draw is keyed by the fold index."""
    stream = f"fold{split.fold_index}"
    model_cfg = HanConfig.from_config(cfg, channels=data.channels)
    model = build_variant(model_cfg, seed=seeds.derive_seed(cfg["seed"], stream))
    model.inputs = {"representation": data.representation, "tfr": asdict(TfrConfig.from_config(cfg))}
    train_idx = data.indices_for(split.train_ids)
    test_idx = data.indices_for(split.test_ids)
    if len(test_idx) == 0 or len(train_idx) == 0:
        raise StratificationError(f"fold {split.fold_index} has no prepared samples on one side")
    history = TrainingHistory()

    if cfg["objective"] == "none":
        train_supervised(model, data, train_idx, cfg["supervised_epochs"], cfg, stream, history)
    else:
        total = max(cfg["pretrain_epochs"], 1)
        schedule = TemperatureSchedule.from_config(cfg, total_steps=total)
        pretrain_contrastive(model, data, train_idx, cfg["objective"], cfg["pretrain_epochs"], schedule, cfg,
                             stream, history)
        freeze_and_finetune(model, data, train_idx, cfg["finetune_epochs"], cfg, stream, history)

    labels_by_rid = data.recording_labels()
    test_probs, _ = predict(model, data.views[test_idx])
    test_scores = recording_scores(test_probs, [data.recording_ids[i] for i in test_idx])
    train_scores = None
    if cfg["threshold_source"] == "train":
        train_probs, _ = predict(model, data.views[train_idx])
        train_scores = recording_scores(train_probs, [data.recording_ids[i] for i in train_idx])
    reports = fold_reports(test_scores, labels_by_rid, split.fold_index, cfg, train_scores, labels_by_rid)
    primary = reports[0]
    log.info("Fold %d: AUROC %.3f, sensitivity %.2f, specificity %.2f at threshold %.3f",
             split.fold_index, primary.auroc, primary.sensitivity, primary.specificity, primary.threshold)
    scores = [{"recording_id": rid, "fold": split.fold_index, "label": labels_by_rid[rid], "score": s}
              for rid, s in sorted(test_scores.items())]
    return FoldOutcome(split.fold_index, reports, scores, history, model)


@dataclass
class CrossValidationResult:
    config_name: str
    folds: List[FoldOutcome]

    @property
    def reports(self) -> List[MetricsReport]:
        return [r for f in self.folds for r in f.reports]

    def primary_reports(self, target: Optional[float] = None) -> List[MetricsReport]:
        return [f.reports[0] if target is None else next(r for r in f.reports if r.target == target)
                for f in self.folds]

    def result_rows(self) -> List[Dict]:
        return [r.to_row(self.config_name) for r in self.reports]

    def score_rows(self) -> List[Dict]:
        return [row for f in self.folds for row in f.scores]

    def history_rows(self) -> List[Dict]:
        return [dict(fold=f.fold_index, **row) for f in self.folds for row in f.history.rows]

    def mean_auroc(self) -> float:
        return float(np.mean([r.auroc for r in self.primary_reports()]))


def run_cross_validation(data: PreparedDataset, cfg: dict, config_name: str = "default",
                         folds: Optional[Sequence[int]] = None,
                         max_concurrent: Optional[int] = None) -> CrossValidationResult:
    """k-fold CV over recordings; folds run in parallel and results come back in fold order."""
    splits = stratified_kfold(data.recording_labels(), cfg["folds"], cfg["seed"])
    if folds is not None:
        splits = [s for s in splits if s.fold_index in set(folds)]
    log.info("Cross-validating %s: %d folds, objective=%s, variant=%s, representation=%s",
             config_name, len(splits), cfg["objective"], cfg["variant"], data.representation)
    outcomes = run_parallel(lambda split: train_fold(data, split, cfg), splits, max_concurrent)
    return CrossValidationResult(config_name=config_name, folds=outcomes)


def evaluate_scores(rows: Iterable[Mapping], cfg: dict) -> List[MetricsReport]:
    """Recompute fold reports from saved `recording_id,fold,label,score` rows."""
    by_fold: Dict[int, Dict[str, Tuple[float, int]]] = {}
    for row in rows:
        by_fold.setdefault(int(row["fold"]), {})[row["recording_id"]] = (float(row["score"]), int(row["label"]))
    reports = []
    test_only = dict(cfg, threshold_source="test")
    for fold, entries in sorted(by_fold.items()):
        scores = {rid: s for rid, (s, _) in entries.items()}
        labels = {rid: y for rid, (_, y) in entries.items()}
        reports.extend(fold_reports(scores, labels, fold, test_only))
    return reports
