import os

import numpy as np
import pytest

from analytics import EntropyProfile, EntropyReport
from errors import ReportError
from plots import plot_curves, plot_entropy_profiles, pr_curve, roc_curve
from tfr import ViewKind
from train_eval import roc_auc


def test_roc_curve_endpoints_and_area(rng):
    scores = rng.random(50)
    labels = (rng.random(50) < 0.4).astype(int)
    labels[:2] = [0, 1]
    fpr, tpr = roc_curve(scores, labels)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert area == pytest.approx(roc_auc(scores, labels))


def test_roc_curve_groups_tied_scores():
    fpr, tpr = roc_curve([0.5, 0.5, 0.9], [0, 1, 1])
    np.testing.assert_allclose(fpr, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(tpr, [0.0, 0.5, 1.0])


def test_pr_curve_example():
    recall, precision = pr_curve([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    np.testing.assert_allclose(recall, [0.5, 0.5, 1.0, 1.0])
    np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3, 0.5])


def test_curves_need_both_classes():
    with pytest.raises(ReportError):
        roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(ReportError):
        pr_curve([0.1, 0.2], [1])


def test_plot_curves_writes_images(tmp_path, rng):
    rows = [{"recording_id": f"r{i}", "fold": i % 3, "label": int(i % 4 == 0), "score": float(s)}
            for i, s in enumerate(rng.random(36))]
    paths = plot_curves(rows, str(tmp_path / "plots"), title="multiview-pcl-full")
    assert [os.path.basename(p) for p in paths] == ["roc.png", "pr.png"]
    for p in paths:
        with open(p, "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"
    with pytest.raises(ReportError):
        plot_curves([], str(tmp_path))


def test_plot_entropy_profiles(tmp_path):
    profiles = [EntropyProfile(ViewKind.SCALOGRAM, label, np.array([0.5, 0.7 + 0.1 * label]),
                               np.array([0.1, 0.1]), np.array([4, 4]), np.array([0, 0]))
                for label in (0, 1)]
    report = EntropyReport(profiles=profiles, differences={ViewKind.SCALOGRAM: np.array([0.0, 0.1])},
                           image_entropy={(ViewKind.SCALOGRAM, 0): np.array([3.0, 3.5]),
                                          (ViewKind.SCALOGRAM, 1): np.array([4.0, 4.2])})
    paths = plot_entropy_profiles(report, str(tmp_path))
    assert sorted(os.path.basename(p) for p in paths) == ["entropy_scalogram.png", "image_entropy.png"]
    assert all(os.path.getsize(p) > 0 for p in paths)
