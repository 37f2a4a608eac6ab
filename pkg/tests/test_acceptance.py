"""Desk-scale end-to-end runs on the frozen benchmark configs (pytest -m slow)."""
import os

import numpy as np
import pytest

from config import apply_overrides, load_config
from deploy import bundle_from_model, decode_bundle, encode_bundle, forward
from model_han import predict
from synth import CohortConfig, generate_cohort
from train_eval import prepare_cohort, run_cross_validation

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")

pytestmark = pytest.mark.slow


def cohort_cfg(name, tmp_path, **overrides):
    cfg = load_config(os.path.join(CONFIG_DIR, name))
    paths = {"paths.data_dir": str(tmp_path / "cohort"), "paths.prepared_dir": str(tmp_path / "prepared"),
             "paths.output_dir": str(tmp_path / "runs")}
    return apply_overrides(cfg, dict(paths, **overrides))


def prepared(cfg):
    cohort = generate_cohort(CohortConfig.from_config(cfg))
    return prepare_cohort(cohort.recordings, cohort.labels, cfg)


def test_null_effect_stays_near_chance(tmp_path):
    cfg = cohort_cfg("null_effect.ini", tmp_path)
    result = run_cross_validation(prepared(cfg), cfg, "null")
    assert 0.4 <= result.mean_auroc() <= 0.6


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("benchmark")
    cfg = cohort_cfg("benchmark.ini", tmp_path)
    data = prepared(cfg)
    multiview = run_cross_validation(data, cfg, "multiview_pcl")
    base_cfg = apply_overrides(cfg, {"tfr.representation": "scalogram", "objective.objective": "none"})
    scalogram = run_cross_validation(prepared(base_cfg), base_cfg, "scalogram_none")
    return data, multiview, scalogram


def test_multiview_prototype_pipeline_recovers_the_signal(benchmark_runs):
    _, multiview, scalogram = benchmark_runs
    assert multiview.mean_auroc() >= 0.85
    assert multiview.mean_auroc() >= scalogram.mean_auroc()


def test_exported_bundle_matches_on_a_hundred_samples(benchmark_runs):
    data, multiview, _ = benchmark_runs
    model = multiview.folds[0].model
    batch = data.views[:100]
    assert len(batch) == 100
    expected, _ = predict(model, batch)
    bundle = decode_bundle(encode_bundle(bundle_from_model(model)))
    np.testing.assert_allclose(forward(bundle, batch), expected, atol=1e-6, rtol=0)
