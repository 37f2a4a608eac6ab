#!/usr/bin/env python3
"""Signal characterisation of prepared views: sample entropy per scale, image entropy, beat power."""
import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import find_peaks

from errors import ArgumentError, ContractError, ReportError
from signal_ingest import HypertensionLabel, WINDOW_S
from tfr import REPRESENTATION_KINDS, View, ViewKind
from train_eval import PreparedDataset
from workers import run_parallel

log = logging.getLogger(__name__)

CLASS_NAMES = {
    HypertensionLabel.NORMOTENSIVE.value: "normotensive",
    HypertensionLabel.HYPERTENSIVE.value: "hypertensive",
}


def _match_counts(x: np.ndarray, m: int, r: float) -> Tuple[int, int]:
    """(A, B): template pairs i < j within Chebyshev distance r at lengths m + 1 and m.

    Both lengths use the same N - m template start positions.
    """
    n = len(x) - m
    dist = np.zeros((n, n))
    for k in range(m):
        seg = x[k:k + n]
        np.maximum(dist, np.abs(seg[:, None] - seg[None, :]), out=dist)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    b = int(np.count_nonzero((dist <= r) & upper))
    tail = x[m:m + n]
    dist_next = np.maximum(dist, np.abs(tail[:, None] - tail[None, :]))
    a = int(np.count_nonzero((dist_next <= r) & upper))
    return a, b


def sample_entropy(series, m: int = 2, r: Optional[float] = None, r_factor: float = 0.2) -> float:
    """SampEn(m, r) = -ln(A / B); NaN when either count is zero.

    `r` is an absolute tolerance; when omitted it is `r_factor` times the series' standard deviation.
    """
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    if m < 1:
        raise ArgumentError(f"template length m must be >= 1, got {m}")
    if len(x) < m + 2:
        raise ArgumentError(f"sample entropy needs at least {m + 2} points, got {len(x)}")
    if r is None:
        r = r_factor * float(np.std(x))
    a, b = _match_counts(x, m, r)
    if a == 0 or b == 0:
        return float("nan")
    return float(-np.log(a / b))


def image_entropy(v: View, bins: int = 64) -> float:
    """Shannon entropy in bits of the `bins`-bin histogram of a normalised view over [0, 1]."""
    if not v.normalized:
        raise ContractError("image entropy expects a normalized view")
    counts, _ = np.histogram(np.asarray(v.grid).reshape(-1), bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


@dataclass
class EntropyProfile:
    kind: ViewKind
    label: int
    means: np.ndarray
    sds: np.ndarray
    defined: np.ndarray
    undefined: np.ndarray

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass
class EntropyReport:
    profiles: List[EntropyProfile]
    differences: Dict[ViewKind, np.ndarray]
    image_entropy: Dict[Tuple[ViewKind, int], np.ndarray]

    def profile(self, kind: ViewKind, label: int) -> EntropyProfile:
        return next(p for p in self.profiles if p.kind is kind and p.label == label)

    def profile_rows(self) -> List[Dict]:
        rows = []
        for p in self.profiles:
            for scale in range(len(p.means)):
                rows.append({
                    "view": p.kind.name.lower(), "class": p.class_name, "scale": scale,
                    "mean": p.means[scale], "sd": p.sds[scale], "n": int(p.defined[scale]),
                    "undefined": int(p.undefined[scale]),
                })
        return rows

    def difference_rows(self) -> List[Dict]:
        return [{"view": kind.name.lower(), "scale": s, "difference": float(d)}
                for kind, diff in self.differences.items() for s, d in enumerate(diff)]

    def image_entropy_rows(self) -> List[Dict]:
        rows = []
        for (kind, label), values in self.image_entropy.items():
            rows.append({
                "view": kind.name.lower(), "class": CLASS_NAMES[label], "n": len(values),
                "mean": float(np.mean(values)), "sd": float(np.std(values)),
                "median": float(np.median(values)), "min": float(np.min(values)), "max": float(np.max(values)),
            })
        return rows


def _selected_windows(data: PreparedDataset, max_windows: int) -> List[Tuple[int, int]]:
    """(sample, window) pairs, at most `max_windows` per recording, in dataset order."""
    taken: Dict[str, int] = {}
    pairs = []
    for i, rid in enumerate(data.recording_ids):
        for w in range(data.views.shape[1]):
            if taken.get(rid, 0) >= max_windows:
                break
            taken[rid] = taken.get(rid, 0) + 1
            pairs.append((i, w))
    return pairs


def _window_entropies(grid: np.ndarray, m: int, r_factor: float) -> np.ndarray:
    return np.array([sample_entropy(row, m, r_factor=r_factor) for row in grid])


def entropy_report(data: PreparedDataset, cfg: dict, kinds: Optional[Sequence[ViewKind]] = None,
                   max_concurrent: Optional[int] = None) -> EntropyReport:
    """Per-class, per-view, per-scale sample-entropy profiles plus image-entropy distributions."""
    labels_present = set(int(x) for x in data.labels)
    missing = set(CLASS_NAMES) - labels_present
    if missing:
        raise ReportError(f"entropy report needs both classes; missing {', '.join(CLASS_NAMES[c] for c in missing)}")
    kinds = tuple(kinds or REPRESENTATION_KINDS[data.representation])
    if len(kinds) != data.channels:
        raise ContractError(f"{len(kinds)} view kinds for {data.channels} channels")
    pairs = _selected_windows(data, cfg["max_windows_per_recording"])
    log.info("Computing entropy profiles over %d windows and %d views", len(pairs), len(kinds))

    def work(pair):
        i, w = pair
        stack = data.views[i, w]
        sampen = np.stack([_window_entropies(stack[c], cfg["sampen_m"], cfg["sampen_r"])
                           for c in range(len(kinds))])
        img = np.array([image_entropy(View(grid=stack[c], kind=k, normalized=True), cfg["image_bins"])
                        for c, k in enumerate(kinds)])
        return sampen, img

    results = run_parallel(work, pairs, max_concurrent)
    window_labels = np.array([int(data.labels[i]) for i, _ in pairs])
    sampen = np.stack([r[0] for r in results])
    images = np.stack([r[1] for r in results])

    profiles, differences, image_ent = [], {}, {}
    for c, kind in enumerate(kinds):
        by_label = {}
        for label in sorted(CLASS_NAMES):
            values = sampen[window_labels == label, c]
            defined = np.isfinite(values)
            counts = defined.sum(axis=0)
            with np.errstate(invalid="ignore"):
                means = np.where(counts > 0, np.nansum(values, axis=0) / np.maximum(counts, 1), np.nan)
                sds = np.array([np.std(col[np.isfinite(col)]) if np.isfinite(col).any() else np.nan
                                for col in values.T])
            undefined = (~defined).sum(axis=0)
            if undefined.any():
                log.info("%s %s: %d undefined sample-entropy values excluded", kind.name.lower(),
                         CLASS_NAMES[label], int(undefined.sum()))
            profiles.append(EntropyProfile(kind, label, means, sds, counts, undefined))
            by_label[label] = means
            image_ent[(kind, label)] = images[window_labels == label, c]
        ht, nt = HypertensionLabel.HYPERTENSIVE.value, HypertensionLabel.NORMOTENSIVE.value
        differences[kind] = by_label[ht] - by_label[nt]
    return EntropyReport(profiles=profiles, differences=differences, image_entropy=image_ent)


def beat_segments(envelope: np.ndarray, bin_rate: float, refractory_s: float = 0.25) -> List[Tuple[int, int]]:
    """Beat chunks as [start, stop) bin ranges split halfway between envelope peaks.

    The envelope is a moving RMS (about 50 ms) of the per-bin energy; peaks closer than
    the refractory period are merged.
    """
    env = np.asarray(envelope, dtype=np.float64)
    width = max(1, int(round(0.05 * bin_rate)))
    smooth = np.sqrt(np.convolve(env * env, np.ones(width) / width, mode="same"))
    distance = max(1, int(round(refractory_s * bin_rate)))
    peaks, _ = find_peaks(smooth, distance=distance, prominence=0.1 * (smooth.max() - smooth.min() + 1e-12))
    if len(peaks) == 0:
        return []
    bounds = [0] + [int((a + b) // 2) for a, b in zip(peaks[:-1], peaks[1:])] + [len(env)]
    return [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def beat_power_rows(data: PreparedDataset, cfg: dict, kinds: Optional[Sequence[ViewKind]] = None) -> List[Dict]:
    """Mean per-scale power of every beat chunk, normalised per beat and per window."""
    kinds = tuple(kinds or REPRESENTATION_KINDS[data.representation])
    magnitude = [c for c, k in enumerate(kinds) if k in (ViewKind.SCALOGRAM, ViewKind.SPECTROGRAM, ViewKind.RECIPROCAL)]
    base = next((c for c in magnitude if kinds[c] is not ViewKind.RECIPROCAL), None)
    bin_rate = data.views.shape[-1] / WINDOW_S
    rows = []
    for i, w in _selected_windows(data, cfg["max_windows_per_recording"]):
        stack = data.views[i, w].astype(np.float64)
        energy = stack[base].sum(axis=0) if base is not None else (1.0 - stack[magnitude[0]]).sum(axis=0)
        for beat, (lo, hi) in enumerate(beat_segments(energy, bin_rate, cfg["refractory_s"])):
            for c in magnitude:
                per_scale = stack[c][:, lo:hi].mean(axis=1)
                window_scale = stack[c].mean(axis=1)
                beat_total = per_scale.sum()
                window_total = window_scale.sum()
                for scale, value in enumerate(per_scale):
                    rows.append({
                        "recording_id": data.recording_ids[i], "sample_id": data.sample_ids[i], "window": w,
                        "beat": beat, "class": CLASS_NAMES[int(data.labels[i])], "view": kinds[c].name.lower(),
                        "scale": scale, "mean_power": float(value),
                        "power_beat_norm": float(value / beat_total) if beat_total > 0 else 0.0,
                        "power_window_norm": float(value / window_total) if window_total > 0 else 0.0,
                    })
    return rows


def write_rows(path: str, rows: List[Dict]) -> None:
    """CSV with the first row's keys as header, written atomically."""
    if not rows:
        raise ReportError(f"nothing to write to {path}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp_path, path)


def write_entropy_report(report: EntropyReport, out_dir: str) -> List[str]:
    paths = []
    for name, rows in (("entropy_profiles.csv", report.profile_rows()),
                       ("entropy_difference.csv", report.difference_rows()),
                       ("image_entropy.csv", report.image_entropy_rows())):
        path = os.path.join(out_dir, name)
        write_rows(path, rows)
        paths.append(path)
    return paths
