import os

import numpy as np
import pytest

from errors import ConfigError, ValidationError
from storage import (
    CSVResultsStorage, SQLiteResultsStorage, create_storage_backend, load_prepared, prepared_checksum, read_csv,
    read_scores, save_prepared, write_scores,
)
from train_eval import PreparedDataset


def result_row(name="multiview-pcl-full", fold=0, target=0.8, auroc=0.75):
    return {"config_name": name, "fold_index": fold, "target": target, "threshold": 0.4, "auroc": auroc,
            "f1": 0.2, "sensitivity": 0.8, "specificity": 0.6, "npv": 0.99, "balanced_accuracy": 0.7,
            "accuracy": 0.61, "undefined": ""}


@pytest.fixture(params=["csv", "sqlite"])
def ledger(request, tmp_path):
    return create_storage_backend({"storage_type": request.param}, str(tmp_path))


def test_backend_factory(tmp_path):
    assert isinstance(create_storage_backend({}, str(tmp_path)), CSVResultsStorage)
    assert isinstance(create_storage_backend({"storage_type": "SQLite"}, str(tmp_path)), SQLiteResultsStorage)
    with pytest.raises(ConfigError):
        create_storage_backend({"storage_type": "parquet"}, str(tmp_path))


def test_ledger_starts_empty(ledger):
    assert not ledger.exists()
    assert ledger.read_results() == {}
    assert ledger.completed_folds("anything") == []


def test_ledger_upserts_by_config_fold_and_target(ledger):
    ledger.write_results([result_row(fold=0), result_row(fold=1), result_row(fold=1, target=0.9)])
    ledger.write_results([result_row(fold=1, auroc=0.9)])
    rows = ledger.read_results()
    assert ledger.exists()
    assert len(rows) == 3
    assert rows[("multiview-pcl-full", 1, "0.80")]["auroc"] == pytest.approx(0.9)
    assert rows[("multiview-pcl-full", 1, "0.90")]["auroc"] == pytest.approx(0.75)
    assert ledger.completed_folds("multiview-pcl-full") == [0, 1]
    assert ledger.completed_folds("scalogram-none-full") == []


def test_ledger_keeps_undefined_metric_names(ledger):
    ledger.write_results([dict(result_row(), undefined="sensitivity;auroc")])
    (row,) = ledger.read_results().values()
    assert row["undefined"] == "sensitivity;auroc"
    assert row["fold_index"] == 0 and row["target"] == "0.80"


def test_csv_ledger_is_sorted_and_written_atomically(tmp_path):
    store = CSVResultsStorage(str(tmp_path / "results.csv"))
    store.write_results([result_row(name="b"), result_row(name="a", fold=2), result_row(name="a", fold=1)])
    rows = read_csv(store.csv_path)
    assert [(r["config_name"], r["fold_index"]) for r in rows] == [("a", "1"), ("a", "2"), ("b", "0")]
    assert not os.path.exists(store.csv_path + ".tmp")


def test_scores_round_trip_sorted(tmp_path):
    path = str(tmp_path / "scores.csv")
    write_scores(path, [{"recording_id": "b", "fold": 1, "label": 0, "score": 0.25},
                        {"recording_id": "a", "fold": 1, "label": 1, "score": 0.5},
                        {"recording_id": "z", "fold": 0, "label": 0, "score": 0.125}])
    rows = read_scores(path)
    assert [r["recording_id"] for r in rows] == ["z", "a", "b"]
    assert rows[1] == {"recording_id": "a", "fold": 1, "label": 1, "score": 0.5}


def test_read_scores_validates_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("recording_id,score\nr1,0.5\n")
    with pytest.raises(ValidationError):
        read_scores(str(path))
    with pytest.raises(ValidationError):
        read_scores(str(tmp_path / "absent.csv"))


def prepared(seed=0):
    rng = np.random.default_rng(seed)
    return PreparedDataset(
        sample_ids=["ht01_b0", "ht01_b1", "nt01_b0"], recording_ids=["ht01", "ht01", "nt01"],
        labels=np.array([1, 1, 0]), views=rng.random((3, 2, 2, 4, 5)).astype(np.float32),
        representation="multiview",
        window_offsets=[[0.0, 0.75], [1.5, 2.25], [0.0, 0.75]],
    )


def test_prepared_round_trip(tmp_path):
    data = prepared()
    save_prepared(str(tmp_path), data)
    assert sorted(os.listdir(tmp_path / "views")) == ["ht01.npz", "nt01.npz"]
    loaded = load_prepared(str(tmp_path))
    assert loaded.sample_ids == data.sample_ids
    assert loaded.recording_ids == data.recording_ids
    assert loaded.labels.tolist() == [1, 1, 0]
    assert loaded.representation == "multiview"
    assert loaded.window_offsets == data.window_offsets
    np.testing.assert_array_equal(loaded.views, data.views)
    assert prepared_checksum(loaded) == prepared_checksum(data)


def test_prepared_checksum_tracks_content():
    a, b = prepared(0), prepared(0)
    assert prepared_checksum(a) == prepared_checksum(b)
    b.views[0, 0, 0, 0, 0] += 1e-3
    assert prepared_checksum(a) != prepared_checksum(b)
    assert prepared_checksum(a) != prepared_checksum(prepared(1))


def test_load_prepared_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_prepared(str(tmp_path))
    save_prepared(str(tmp_path), prepared())
    os.remove(tmp_path / "views" / "nt01.npz")
    with pytest.raises(FileNotFoundError):
        load_prepared(str(tmp_path))
