import itertools

import numpy as np
import pytest
from scipy import stats

from config import apply_overrides, default_config
from errors import ArgumentError, StratificationError, TrainingError, UndefinedMetricError
from model_han import HanConfig, build_variant
from objectives import TemperatureSchedule
from signal_ingest import HypertensionLabel, Waveform
from train_eval import (
    METRIC_FIELDS, PreparedDataset, confusion_metrics, evaluate_scores, fold_reports, freeze_and_finetune,
    paired_ttest, prepare_cohort, pretrain_contrastive, recording_scores, roc_auc, run_cross_validation,
    stratified_batches, stratified_kfold, threshold_at_sensitivity, train_fold, train_supervised,
)

TINY_MODEL = {
    "model.conv_filters": "3, 4", "model.lstm_hidden": "5", "model.attention_units": "4",
    "model.embedding_dim": "8", "model.spatial_dropout": "0.0",
    "tfr.n_scales": "4", "tfr.n_time_bins": "4",
}


def tiny_cfg(tmp_path, **overrides):
    base = dict(TINY_MODEL)
    base.update({
        "train.folds": "2", "train.pretrain_epochs": "2", "train.finetune_epochs": "2",
        "train.supervised_epochs": "2", "train.batch_size": "8", "train.learning_rate": "0.01",
        "monitoring.log_progress_every_n": "0",
    })
    base.update(overrides)
    return apply_overrides(default_config(str(tmp_path)), base)


def tiny_dataset(n_per_class: int = 4, samples_per_recording: int = 2) -> PreparedDataset:
    rng = np.random.default_rng(0)
    sample_ids, recording_ids, labels, views = [], [], [], []
    for label in (0, 1):
        for r in range(n_per_class):
            rid = f"{'nt' if label == 0 else 'ht'}{r:02d}"
            for b in range(samples_per_recording):
                sample_ids.append(f"{rid}_b{b}")
                recording_ids.append(rid)
                labels.append(label)
                views.append(rng.random((10, 2, 4, 4)) * 0.5 + 0.5 * label)
    return PreparedDataset(sample_ids=sample_ids, recording_ids=recording_ids, labels=np.array(labels),
                           views=np.array(views, dtype=np.float32), representation="multiview")


# -- AUROC and thresholds -----------------------------------------------------------------------

def brute_force_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("seed", range(5))
def test_auroc_matches_pairwise_count_with_ties(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.random(40), 1)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    assert roc_auc(scores, labels) == pytest.approx(brute_force_auroc(scores, labels))


def test_auroc_extremes_and_errors():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ArgumentError):
        roc_auc([0.1, 0.2], [1])


SCORES = [0.9, 0.8, 0.7, 0.6, 0.5]
LABELS = [1, 0, 1, 0, 1]


def test_threshold_at_sensitivity_examples():
    op = threshold_at_sensitivity(SCORES, LABELS, 0.8)
    assert (op.threshold, op.sensitivity, op.specificity) == (0.5, 1.0, 0.0)
    op = threshold_at_sensitivity(SCORES, LABELS, 0.6)
    assert op.threshold == 0.7
    assert op.sensitivity == pytest.approx(2 / 3)
    assert op.specificity == 0.5
    assert threshold_at_sensitivity(SCORES, LABELS, 0.0).threshold == 0.9


def test_threshold_reaches_target_on_random_scores(rng):
    for _ in range(20):
        scores = rng.random(30)
        labels = rng.integers(0, 2, 30)
        labels[0] = 1
        for target in (0.7, 0.8, 0.9):
            op = threshold_at_sensitivity(scores, labels, target)
            assert op.sensitivity >= target
            assert np.mean(scores[labels == 1] >= op.threshold) == pytest.approx(op.sensitivity)


def test_threshold_argument_errors():
    with pytest.raises(ArgumentError):
        threshold_at_sensitivity(SCORES, LABELS, 1.5)
    with pytest.raises(UndefinedMetricError):
        threshold_at_sensitivity([0.1, 0.2], [0, 0])


def test_confusion_metrics_table():
    report = confusion_metrics(SCORES, LABELS, 0.7, fold_index=3)
    # tp=2 fp=1 tn=1 fn=1
    assert report.sensitivity == pytest.approx(2 / 3)
    assert report.specificity == pytest.approx(0.5)
    assert report.npv == pytest.approx(0.5)
    assert report.f1 == pytest.approx(4 / 6)
    assert report.accuracy == pytest.approx(0.6)
    assert report.balanced_accuracy == pytest.approx((report.sensitivity + report.specificity) / 2)
    assert report.undefined == ()
    row = report.to_row("cfg")
    assert row["fold_index"] == 3 and row["target"] == "0.80"
    assert all(name in row for name in METRIC_FIELDS)


def test_confusion_metrics_marks_undefined_ratios():
    report = confusion_metrics([0.2, 0.4], [0, 0], 0.3)
    assert report.sensitivity == 0.0
    assert "sensitivity" in report.undefined
    assert "auroc" in report.undefined
    assert report.specificity == 0.5


# -- paired t-test ------------------------------------------------------------------------------

def test_paired_ttest_matches_scipy(rng):
    a = rng.random(5)
    b = rng.random(5)
    assert paired_ttest(a, b) == pytest.approx(stats.ttest_rel(a, b).pvalue)


def test_paired_ttest_known_value():
    # d = 1..4, t = 2.5 / (sd / 2) with sd = sqrt(5/3)
    t = 2.5 / (np.sqrt(5 / 3) / 2)
    assert paired_ttest([1, 2, 3, 4], [0, 0, 0, 0]) == pytest.approx(2 * stats.t.sf(t, 3))


def test_paired_ttest_zero_variance_and_errors():
    assert paired_ttest([0.8, 0.7], [0.8, 0.7]) == 1.0
    assert paired_ttest([1.0, 2.0], [0.5, 1.5]) == 0.0
    with pytest.raises(ArgumentError):
        paired_ttest([0.5], [0.4])
    with pytest.raises(ArgumentError):
        paired_ttest([0.5, 0.6], [0.4])


def test_paired_ttest_is_calibrated_under_the_null():
    rng = np.random.default_rng(99)
    p = np.array([paired_ttest(rng.normal(size=5), rng.normal(size=5)) for _ in range(2000)])
    assert 0.03 < np.mean(p < 0.05) < 0.07


# -- folds and batches --------------------------------------------------------------------------

def _labels(n_neg: int, n_pos: int):
    labels = {f"n{i:02d}": 0 for i in range(n_neg)}
    labels.update({f"p{i:02d}": 1 for i in range(n_pos)})
    return labels


def test_stratified_kfold_partitions_recordings():
    labels = _labels(15, 5)
    splits = stratified_kfold(labels, k=5, seed=1)
    assert [s.fold_index for s in splits] == list(range(5))
    seen = []
    for s in splits:
        assert not set(s.train_ids) & set(s.test_ids)
        assert set(s.train_ids) | set(s.test_ids) == set(labels)
        assert sum(labels[r] for r in s.test_ids) == 1
        assert len(s.test_ids) == 4
        seen.extend(s.test_ids)
    assert sorted(seen) == sorted(labels)


def test_stratified_kfold_is_seeded():
    labels = _labels(12, 6)
    assert stratified_kfold(labels, 3, seed=4) == stratified_kfold(labels, 3, seed=4)
    assert stratified_kfold(labels, 3, seed=4) != stratified_kfold(labels, 3, seed=5)


def test_stratified_kfold_needs_k_members_per_class():
    with pytest.raises(StratificationError):
        stratified_kfold(_labels(10, 3), k=5)
    with pytest.raises(ArgumentError):
        stratified_kfold(_labels(10, 3), k=1)


def test_stratified_batches_cover_indices_and_spread_positives():
    labels = np.array([1] * 6 + [0] * 34)
    batches = stratified_batches(labels, 10, np.random.default_rng(0))
    assert len(batches) == 4
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(40))
    assert sum(1 for b in batches if labels[b].sum() >= 2) == 3


def test_stratified_batches_small_input():
    batches = stratified_batches(np.array([0, 1, 0]), 32, np.random.default_rng(0))
    assert len(batches) == 1
    assert sorted(batches[0].tolist()) == [0, 1, 2]


# -- scoring helpers ----------------------------------------------------------------------------

def test_recording_scores_average_samples():
    scores = recording_scores(np.array([0.2, 0.4, 0.9]), ["a", "a", "b"])
    assert scores == pytest.approx({"a": 0.3, "b": 0.9})


def test_fold_reports_one_per_target(tmp_path):
    cfg = tiny_cfg(tmp_path)
    scores = dict(zip("abcde", SCORES))
    labels = dict(zip("abcde", LABELS))
    reports = fold_reports(scores, labels, 2, cfg)
    assert [r.target for r in reports] == [0.80, 0.70, 0.90]
    assert reports[0].threshold == 0.5


def test_fold_reports_can_take_thresholds_from_training_scores(tmp_path):
    cfg = tiny_cfg(tmp_path, **{"train.threshold_source": "train"})
    test = {"a": 0.6, "b": 0.4, "c": 0.7}
    labels = {"a": 1, "b": 0, "c": 0, "x": 1, "y": 0}
    reports = fold_reports(test, labels, 0, cfg, train_scores={"x": 0.65, "y": 0.1}, train_labels=labels)
    assert reports[0].threshold == 0.65
    assert reports[0].sensitivity == 0.0


def test_evaluate_scores_recomputes_per_fold(tmp_path):
    cfg = tiny_cfg(tmp_path)
    rows = [{"recording_id": f"a{i}", "fold": 0, "label": y, "score": s}
            for i, (s, y) in enumerate(zip(SCORES, LABELS))]
    rows += [{"recording_id": f"b{i}", "fold": 1, "label": y, "score": s}
             for i, (s, y) in enumerate(zip([0.3, 0.1, 0.8], [0, 1, 1]))]
    reports = evaluate_scores(rows, cfg)
    assert sorted({r.fold_index for r in reports}) == [0, 1]
    assert len(reports) == 2 * 3


# -- preparation --------------------------------------------------------------------------------

def test_prepare_cohort_groups_gates_and_drops(tmp_path):
    cfg = tiny_cfg(tmp_path, **{
        "tfr.representation": "scalogram", "tfr.n_scales": "8", "tfr.n_time_bins": "10",
        "ingest.windows_per_sample": "2", "ingest.max_batches": "3",
    })
    t = np.arange(8 * 8000) / 8000
    tone = Waveform(samples=0.1 * np.sin(2 * np.pi * 50 * t), rate=8000)
    recordings = {"ht": tone, "nt": tone, "silent": Waveform(samples=np.zeros_like(t), rate=8000)}
    labels = {"ht": HypertensionLabel.HYPERTENSIVE, "nt": HypertensionLabel.NORMOTENSIVE,
              "silent": HypertensionLabel.NORMOTENSIVE}
    data = prepare_cohort(recordings, labels, cfg, max_concurrent=1)
    assert data.views.shape == (4, 2, 1, 8, 10)
    assert data.views.dtype == np.float32
    assert data.recording_ids == ["ht", "ht", "ht", "nt"]
    assert data.labels.tolist() == [1, 1, 1, 0]
    assert data.recording_labels() == {"ht": 1, "nt": 0}
    assert data.indices_for(["nt"]).tolist() == [3]
    assert len(data) == 4 and data.channels == 1


# -- end-to-end cross-validation ----------------------------------------------------------------

@pytest.mark.parametrize("objective", ["pcl", "none"])
def test_cross_validation_on_tiny_data(objective, tmp_path):
    cfg = tiny_cfg(tmp_path, **{"objective.objective": objective})
    data = tiny_dataset()
    result = run_cross_validation(data, cfg, config_name="tiny", max_concurrent=1)
    assert [f.fold_index for f in result.folds] == [0, 1]
    assert len(result.result_rows()) == 2 * 3
    scored = [row["recording_id"] for row in result.score_rows()]
    assert sorted(scored) == sorted(data.recording_labels())
    phases = {row["phase"] for row in result.history_rows()}
    assert phases == ({"pretrain", "finetune"} if objective == "pcl" else {"supervised"})
    assert 0.0 <= result.mean_auroc() <= 1.0


def test_cross_validation_is_reproducible(tmp_path):
    cfg = tiny_cfg(tmp_path)
    data = tiny_dataset()
    a = run_cross_validation(data, cfg, folds=[1], max_concurrent=1)
    b = run_cross_validation(data, cfg, folds=[1], max_concurrent=2)
    assert [f.fold_index for f in a.folds] == [1]
    assert a.score_rows() == b.score_rows()


# -- training phases ----------------------------------------------------------------------------

def tiny_model(cfg, seed=0):
    return build_variant(HanConfig.from_config(cfg, channels=2), seed=seed)


def snapshot(model, names=None):
    names = names or list(model.params)
    state = {f"param/{k}": model.params[k].data.tobytes() for k in names}
    state.update({f"buffer/{k}": v.tobytes() for k, v in model.buffers.items()})
    return state


def test_finetune_touches_only_the_head(tmp_path):
    cfg = tiny_cfg(tmp_path)
    data = tiny_dataset()
    model = tiny_model(cfg)
    encoder_before = snapshot(model, list(model.encoder_params))
    head_before = {k: p.data.copy() for k, p in model.head_params.items()}
    freeze_and_finetune(model, data, np.arange(len(data)), 3, cfg)
    assert snapshot(model, list(model.encoder_params)) == encoder_before
    assert any(not np.array_equal(p.data, head_before[k]) for k, p in model.head_params.items())


def test_zero_epochs_leave_the_model_untouched(tmp_path):
    cfg = tiny_cfg(tmp_path)
    data = tiny_dataset()
    idx = np.arange(len(data))
    model = tiny_model(cfg)
    before = snapshot(model)
    schedule = TemperatureSchedule.from_config(cfg, total_steps=1)
    result = pretrain_contrastive(model, data, idx, "pcl", 0, schedule, cfg)
    freeze_and_finetune(model, data, idx, 0, cfg)
    train_supervised(model, data, idx, 0, cfg)
    assert snapshot(model) == before
    assert result.history.losses("pretrain") == []


def test_contrastive_loss_falls_on_separable_data(tmp_path):
    cfg = tiny_cfg(tmp_path, **{"objective.scheduler": "fixed", "train.patience": "0"})
    data = tiny_dataset()
    model = tiny_model(cfg)
    schedule = TemperatureSchedule.from_config(cfg, total_steps=10)
    result = pretrain_contrastive(model, data, np.arange(len(data)), "supcon", 10, schedule, cfg)
    losses = result.history.losses("pretrain")
    assert len(losses) == 10
    assert losses[-1] < losses[0]


def test_non_finite_contrastive_loss_stops_training(tmp_path):
    cfg = tiny_cfg(tmp_path)
    data = tiny_dataset()
    data.views[...] = np.nan
    schedule = TemperatureSchedule.from_config(cfg, total_steps=1)
    with pytest.raises(TrainingError) as e:
        pretrain_contrastive(tiny_model(cfg), data, np.arange(len(data)), "supcon", 1, schedule, cfg)
    assert e.value.step == 0
    assert e.value.one_line().startswith("error: training: pretrain loss diverged")


def test_trained_fold_records_its_inputs(tmp_path):
    cfg = tiny_cfg(tmp_path, **{"train.pretrain_epochs": "1", "train.finetune_epochs": "1"})
    data = tiny_dataset()
    (split, _) = stratified_kfold(data.recording_labels(), k=2, seed=cfg["seed"])
    outcome = train_fold(data, split, cfg)
    assert outcome.model.inputs["representation"] == "multiview"
    assert outcome.model.inputs["tfr"]["n_scales"] == 4
    assert outcome.model.inputs["tfr"]["omega0"] == cfg["omega0"]
