#!/usr/bin/env python3
import csv
import hashlib
import json
import os
import sqlite3
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from errors import ConfigError, ValidationError
from signal_ingest import HypertensionLabel
from train_eval import METRIC_FIELDS, PreparedDataset

RESULT_FIELDS = ["config_name", "fold_index", "target", "threshold", *METRIC_FIELDS, "undefined"]
SCORE_FIELDS = ["recording_id", "fold", "label", "score"]
HISTORY_FIELDS = ["fold", "phase", "epoch", "loss", "tau"]
MANIFEST_FIELDS = ["sample_id", "recording_id", "label", "window_offsets"]

ResultKey = Tuple[str, int, str]


def result_key(row: Mapping) -> ResultKey:
    return str(row["config_name"]), int(row["fold_index"]), f"{float(row['target']):.2f}"


def _typed_result(row: Mapping) -> Dict:
    out = {"config_name": row["config_name"], "fold_index": int(row["fold_index"]),
           "target": f"{float(row['target']):.2f}", "threshold": float(row["threshold"])}
    for name in METRIC_FIELDS:
        out[name] = float(row[name])
    out["undefined"] = row.get("undefined") or ""
    return out


class ResultsStorage(ABC):
    """Per-(config, fold, target) results ledger"""

    @abstractmethod
    def read_results(self) -> Dict[ResultKey, Dict]:
        """Read every ledger row keyed by (config_name, fold_index, target)"""
        pass

    @abstractmethod
    def write_results(self, rows: Iterable[Mapping]) -> None:
        """Upsert rows into the ledger"""
        pass

    @abstractmethod
    def exists(self) -> bool:
        """Check if storage exists (for first-run detection)"""
        pass

    def completed_folds(self, config_name: str) -> List[int]:
        return sorted({fold for name, fold, _ in self.read_results() if name == config_name})


class CSVResultsStorage(ResultsStorage):
    """CSV file backend; the whole ledger is rewritten atomically on every write"""

    def __init__(self, csv_path: str):
        self.csv_path = csv_path

    def read_results(self) -> Dict[ResultKey, Dict]:
        ledger: Dict[ResultKey, Dict] = {}
        if not os.path.exists(self.csv_path):
            return ledger
        with open(self.csv_path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                if not (row.get("config_name") or "").strip():
                    continue
                typed = _typed_result(row)
                ledger[result_key(typed)] = typed
        return ledger

    def write_results(self, rows: Iterable[Mapping]) -> None:
        ledger = self.read_results()
        for row in rows:
            typed = _typed_result(row)
            ledger[result_key(typed)] = typed
        write_csv(self.csv_path, RESULT_FIELDS, [ledger[k] for k in sorted(ledger)])

    def exists(self) -> bool:
        return os.path.exists(self.csv_path)


class SQLiteResultsStorage(ResultsStorage):
    """SQLite backend for ledgers shared by many runs"""

    def __init__(self, db_path: str):
        self.db_path = db_path
        os.makedirs(os.path.dirname(db_path) or ".", exist_ok=True)
        self._init_db()

    def _init_db(self):
        metric_columns = ", ".join(f"{name} REAL" for name in METRIC_FIELDS)
        with sqlite3.connect(self.db_path) as conn:
            conn.execute(f"""
                CREATE TABLE IF NOT EXISTS results (
                    config_name TEXT NOT NULL,
                    fold_index INTEGER NOT NULL,
                    target TEXT NOT NULL,
                    threshold REAL,
                    {metric_columns},
                    undefined TEXT,
                    PRIMARY KEY (config_name, fold_index, target)
                )
            """)
            conn.execute("CREATE INDEX IF NOT EXISTS idx_results_config ON results (config_name)")
            conn.commit()

    def read_results(self) -> Dict[ResultKey, Dict]:
        ledger: Dict[ResultKey, Dict] = {}
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            for row in conn.execute("SELECT * FROM results ORDER BY config_name, fold_index, target"):
                typed = _typed_result(dict(row))
                ledger[result_key(typed)] = typed
        return ledger

    def write_results(self, rows: Iterable[Mapping]) -> None:
        placeholders = ", ".join("?" for _ in RESULT_FIELDS)
        with sqlite3.connect(self.db_path) as conn:
            for row in rows:
                typed = _typed_result(row)
                conn.execute(f"INSERT OR REPLACE INTO results ({', '.join(RESULT_FIELDS)}) VALUES ({placeholders})",
                             [typed[name] for name in RESULT_FIELDS])
            conn.commit()

    def exists(self) -> bool:
        if not os.path.exists(self.db_path):
            return False
        try:
            with sqlite3.connect(self.db_path) as conn:
                return conn.execute("SELECT COUNT(*) FROM results").fetchone()[0] > 0
        except sqlite3.Error:
            return False


def create_storage_backend(cfg: dict, directory: str) -> ResultsStorage:
    """Factory function to create appropriate storage backend based on config"""
    storage_type = cfg.get("storage_type", "csv").lower()

    if storage_type == "sqlite":
        return SQLiteResultsStorage(os.path.join(directory, "results.db"))
    elif storage_type == "csv":
        return CSVResultsStorage(os.path.join(directory, "results.csv"))
    else:
        raise ConfigError(f"Unknown storage type: {storage_type}. Use 'csv' or 'sqlite'.")


def write_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Mapping]) -> None:
    """Write rows to CSV atomically."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    os.replace(tmp_path, path)


def read_csv(path: str) -> List[Dict[str, str]]:
    if not os.path.exists(path):
        raise ValidationError(f"Missing file: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_scores(path: str, rows: Iterable[Mapping]) -> None:
    write_csv(path, SCORE_FIELDS, sorted(rows, key=lambda r: (int(r["fold"]), r["recording_id"])))


def read_scores(path: str) -> List[Dict]:
    rows = read_csv(path)
    missing = set(SCORE_FIELDS) - set(rows[0] if rows else SCORE_FIELDS)
    if missing:
        raise ValidationError(f"{path}: missing columns {', '.join(sorted(missing))}")
    return [{"recording_id": r["recording_id"], "fold": int(r["fold"]), "label": int(r["label"]),
             "score": float(r["score"])} for r in rows]


def write_history(path: str, rows: Iterable[Mapping]) -> None:
    write_csv(path, HISTORY_FIELDS, rows)


# -- prepared datasets ----------------------------------------------------------------------

def save_prepared(directory: str, data: PreparedDataset) -> None:
    """`samples.csv` manifest plus one compressed .npz of views per recording."""
    views_dir = os.path.join(directory, "views")
    os.makedirs(views_dir, exist_ok=True)
    by_recording: Dict[str, List[int]] = {}
    for i, rid in enumerate(data.recording_ids):
        by_recording.setdefault(rid, []).append(i)
    for rid, idx in by_recording.items():
        path = os.path.join(views_dir, f"{rid}.npz")
        tmp_path = os.path.join(views_dir, f"{rid}.tmp.npz")
        np.savez_compressed(tmp_path, views=data.views[idx],
                            sample_ids=np.array([data.sample_ids[i] for i in idx]))
        os.replace(tmp_path, path)
    offsets = data.window_offsets or [[] for _ in data.sample_ids]
    rows = [{"sample_id": sid, "recording_id": rid, "label": HypertensionLabel(int(y)).name.lower(),
             "window_offsets": ";".join(f"{o:.2f}" for o in offs)}
            for sid, rid, y, offs in zip(data.sample_ids, data.recording_ids, data.labels, offsets)]
    write_csv(os.path.join(directory, "samples.csv"), MANIFEST_FIELDS, rows)
    with open(os.path.join(directory, "prepared.json"), "w", encoding="utf-8") as f:
        json.dump({"representation": data.representation, "samples": len(data),
                   "shape": list(data.views.shape[1:])}, f, indent=2, sort_keys=True)


def load_prepared(directory: str) -> PreparedDataset:
    meta_path = os.path.join(directory, "prepared.json")
    if not os.path.exists(meta_path):
        raise ValidationError(f"{directory} is not a prepared dataset (no prepared.json); run 'prepare' first")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    rows = read_csv(os.path.join(directory, "samples.csv"))
    cache: Dict[str, Dict[str, np.ndarray]] = {}
    views = []
    for row in rows:
        rid = row["recording_id"]
        if rid not in cache:
            with np.load(os.path.join(directory, "views", f"{rid}.npz"), allow_pickle=False) as f:
                cache[rid] = {str(sid): v for sid, v in zip(f["sample_ids"], f["views"])}
        try:
            views.append(cache[rid][row["sample_id"]])
        except KeyError:
            raise ValidationError(f"{directory}: views for sample {row['sample_id']} missing")
    shape = tuple(meta["shape"])
    stacked = np.stack(views).astype(np.float32) if views else np.zeros((0,) + shape, dtype=np.float32)
    return PreparedDataset(
        sample_ids=[r["sample_id"] for r in rows], recording_ids=[r["recording_id"] for r in rows],
        labels=np.array([HypertensionLabel.parse(r["label"]).value for r in rows], dtype=int),
        views=stacked, representation=meta["representation"],
        window_offsets=[[float(o) for o in (r.get("window_offsets") or "").split(";") if o] for r in rows],
    )


def prepared_checksum(data: PreparedDataset) -> str:
    """SHA-256 over ids, labels and view values (independent of .npz container metadata)."""
    h = hashlib.sha256()
    for sid, rid, y in zip(data.sample_ids, data.recording_ids, data.labels):
        h.update(f"{sid},{rid},{int(y)}\n".encode("utf-8"))
    h.update(np.ascontiguousarray(data.views, dtype="<f4").tobytes())
    return h.hexdigest()
