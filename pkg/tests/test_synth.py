import csv

import numpy as np
import pytest

from signal_ingest import (
    GateConfig, HypertensionLabel, Waveform, label_from_bp, load_recording, quality_gate, read_label_manifest,
    resample, segment_windows,
)
from synth import (
    CohortConfig, dataset_checksum, envelope_band_energy, generate_cohort, generate_recording, memory_checksum,
    recording_ids,
)
from train_eval import roc_auc


def small(**kw):
    base = dict(n_normotensive=4, n_hypertensive=2, duration_s=6.0, seed=7)
    base.update(kw)
    return CohortConfig(**base)


def test_same_config_same_checksum(tmp_path):
    a = generate_cohort(small(), out_dir=str(tmp_path / "a"))
    b = generate_cohort(small(), out_dir=str(tmp_path / "b"))
    assert memory_checksum(a) == memory_checksum(b)
    assert dataset_checksum(str(tmp_path / "a")) == dataset_checksum(str(tmp_path / "b"))


def test_different_seed_different_checksum():
    assert memory_checksum(generate_cohort(small(seed=1))) != memory_checksum(generate_cohort(small(seed=2)))


def test_parallel_matches_sequential():
    assert memory_checksum(generate_cohort(small(), max_concurrent=1)) == \
        memory_checksum(generate_cohort(small(), max_concurrent=4))


def test_adding_recordings_keeps_existing():
    a = generate_cohort(small(n_normotensive=2))
    b = generate_cohort(small(n_normotensive=5))
    np.testing.assert_array_equal(a.recordings["N0001"].samples, b.recordings["N0001"].samples)
    np.testing.assert_array_equal(a.recordings["H0001"].samples, b.recordings["H0001"].samples)


def test_default_counts():
    ids = recording_ids(CohortConfig())
    labels = [label for _, label in ids]
    assert labels.count(HypertensionLabel.NORMOTENSIVE) == 742
    assert labels.count(HypertensionLabel.HYPERTENSIVE) == 33


def test_scale_factor():
    ids = recording_ids(CohortConfig(scale=200 / 742))
    labels = [label for _, label in ids]
    assert labels.count(HypertensionLabel.NORMOTENSIVE) == 200
    assert labels.count(HypertensionLabel.HYPERTENSIVE) == 9


def test_written_cohort_readable(tmp_path):
    cfg = small()
    generate_cohort(cfg, out_dir=str(tmp_path))
    readings = read_label_manifest(str(tmp_path / "labels.csv"))
    assert len(readings) == 6
    assert sum(label_from_bp(bp) is HypertensionLabel.HYPERTENSIVE for bp in readings.values()) == 2
    w = load_recording(str(tmp_path / "wav" / "H0000.wav"))
    assert w.rate == 8000
    assert len(w.samples) == 48000
    assert CohortConfig.from_text((tmp_path / "cohort.cfg").read_text()) == cfg


def test_bp_always_matches_label():
    cfg = small(n_normotensive=60, n_hypertensive=60, duration_s=0.5)
    for rid, label in recording_ids(cfg):
        _, bp = generate_recording(rid, label, cfg)
        assert label_from_bp(bp) is label


def test_ground_truth_names_perturbed_scales(tmp_path):
    generate_cohort(small(), out_dir=str(tmp_path))
    with open(tmp_path / "ground_truth.csv", newline="") as f:
        rows = {row["perturbation"]: row for row in csv.DictReader(f)}
    assert set(rows) == {"floor", "flutter", "burst_width", "beat_jitter"}
    assert rows["floor"]["scale_indices"]
    assert float(rows["flutter"]["strength"]) == pytest.approx(0.4)


def test_artifacts_trip_quality_gate():
    cfg = small(artifact_rate=60.0, duration_s=20.0)
    pcm, _ = generate_recording("N0000", HypertensionLabel.NORMOTENSIVE, cfg)
    windows = segment_windows(resample(Waveform(samples=pcm / 32768.0, rate=8000), 4000))
    gate = GateConfig()
    assert not all(quality_gate(w, gate) for w in windows)


def test_envelope_feature_separates_classes():
    cfg = CohortConfig(n_normotensive=100, n_hypertensive=100, class_effect=0.5, snr_db=10.0,
                       duration_s=15.0, seed=11)
    data = generate_cohort(cfg)
    scores = [envelope_band_energy(data.recordings[rid]) for rid in data.recording_ids]
    labels = [data.labels[rid].value for rid in data.recording_ids]
    assert roc_auc(scores, labels) >= 0.7

