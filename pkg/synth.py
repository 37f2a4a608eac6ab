#!/usr/bin/env python3
"""Deterministic synthetic Doppler cohort.

Each recording is a quasi-periodic train of Gaussian-windowed bursts (fundamental
1.8-3.0 beats/s, carrier 55-75 Hz plus its second harmonic) in white noise at
`snr_db`. Hypertensive recordings are perturbed in proportion to `class_effect`:

  * shorter bursts (wider burst spectrum),
  * larger inter-beat jitter,
  * 15-45 Hz amplitude flutter on the bursts,
  * a weak continuous floor in the 160-195 Hz band.

With class_effect == 0 both classes share one signal distribution; only the
blood-pressure readings differ.
"""
import csv
import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import hilbert

import seeds
from errors import ValidationError
from signal_ingest import BloodPressureReading, HypertensionLabel, Waveform, label_from_bp
from workers import run_parallel

log = logging.getLogger(__name__)

FLUTTER_BAND = (15.0, 45.0)
FLOOR_BAND = (160.0, 195.0)
CLEAN_RMS = 0.1
PEAK_LIMIT = 0.9


@dataclass(frozen=True)
class CohortConfig:
    n_normotensive: int = 742
    n_hypertensive: int = 33
    seed: int = 42
    class_effect: float = 0.5
    snr_db: float = 10.0
    duration_s: float = 45.0
    sample_rate: int = 8000
    artifact_rate: float = 0.0
    scale: float = 1.0

    def validate(self) -> None:
        if self.n_normotensive < 0 or self.n_hypertensive < 0:
            raise ValidationError("cohort counts must be >= 0")
        if self.class_effect < 0:
            raise ValidationError("class_effect must be >= 0")
        if self.sample_rate <= 0 or self.duration_s <= 0 or self.scale <= 0:
            raise ValidationError("sample_rate, duration_s and scale must be > 0")

    @property
    def counts(self) -> Tuple[int, int]:
        return (int(round(self.n_normotensive * self.scale)), int(round(self.n_hypertensive * self.scale)))

    @classmethod
    def from_config(cls, cfg: dict) -> "CohortConfig":
        return cls(
            n_normotensive=cfg["n_normotensive"], n_hypertensive=cfg["n_hypertensive"],
            seed=cfg["seed"], class_effect=cfg["class_effect"], snr_db=cfg["snr_db"],
            duration_s=cfg["duration_s"], sample_rate=cfg["sample_rate"],
            artifact_rate=cfg["artifact_rate"], scale=cfg["scale"],
        )

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "CohortConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValidationError(f"Unknown cohort key: {key}")
            values[key] = int(raw) if types[key] in (int, "int") else float(raw)
        return cls(**values)


@dataclass
class CohortDataset:
    config: CohortConfig
    recordings: Dict[str, Waveform]
    readings: Dict[str, BloodPressureReading]
    labels: Dict[str, HypertensionLabel]

    @property
    def recording_ids(self) -> List[str]:
        return list(self.recordings)


def recording_ids(cfg: CohortConfig) -> List[Tuple[str, HypertensionLabel]]:
    n_norm, n_hyp = cfg.counts
    ids = [(f"N{i:04d}", HypertensionLabel.NORMOTENSIVE) for i in range(n_norm)]
    ids += [(f"H{i:04d}", HypertensionLabel.HYPERTENSIVE) for i in range(n_hyp)]
    return ids


def _band_noise(rng: np.random.Generator, n: int, rate: float, band: Tuple[float, float]) -> np.ndarray:
    """Unit-variance Gaussian noise confined to `band` (Hz) by spectral masking."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spectrum[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spectrum, n)
    sd = np.std(x)
    return x / sd if sd > 0 else x


def _draw_bp(rng: np.random.Generator, label: HypertensionLabel) -> BloodPressureReading:
    if label is HypertensionLabel.NORMOTENSIVE:
        sbp = rng.integers(95, 140, size=2)
        dbp = rng.integers(55, 90, size=2)
    else:
        sbp = rng.integers(118, 176, size=2)
        dbp = rng.integers(68, 106, size=2)
        if sbp.max() < 140 and dbp.max() < 90:
            arm = int(rng.integers(0, 2))
            if rng.random() < 0.5:
                sbp[arm] = rng.integers(140, 176)
            else:
                dbp[arm] = rng.integers(90, 106)
    bp = BloodPressureReading(float(sbp[0]), float(dbp[0]), float(sbp[1]), float(dbp[1]))
    if label_from_bp(bp) is not label:
        raise AssertionError(f"generated BP {bp} does not match {label}")
    return bp


def generate_recording(
    rid: str, label: HypertensionLabel, cfg: CohortConfig
) -> Tuple[np.ndarray, BloodPressureReading]:
    """One recording as int16 PCM plus its blood-pressure reading."""
    rng = seeds.rng(cfg.seed, "synth", "signal", rid)
    bp = _draw_bp(seeds.rng(cfg.seed, "synth", "bp", rid), label)

    effect = cfg.class_effect if label is HypertensionLabel.HYPERTENSIVE else 0.0
    fs = float(cfg.sample_rate)
    n = int(round(cfg.duration_s * fs))
    t = np.arange(n) / fs

    f0 = rng.uniform(1.8, 3.0)
    carrier = rng.uniform(55.0, 75.0)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    jitter = 0.03 + 0.06 * effect
    width = 0.04 * (1.0 - 0.35 * effect)

    clean = np.zeros(n)
    beat = rng.uniform(0, 1.0 / f0)
    half = int(math.ceil(4 * width * fs))
    while beat < cfg.duration_s:
        centre = int(round(beat * fs))
        lo, hi = max(0, centre - half), min(n, centre + half + 1)
        if lo < hi:
            tt = t[lo:hi] - beat
            envelope = (1.0 + 0.1 * rng.standard_normal()) * np.exp(-0.5 * (tt / width) ** 2)
            tone = np.sin(2 * np.pi * carrier * tt + phases[0]) + 0.5 * np.sin(4 * np.pi * carrier * tt + phases[1])
            clean[lo:hi] += envelope * tone
        beat += max(0.5 / f0, (1.0 + jitter * rng.standard_normal()) / f0)

    # Draws below happen for every recording so both classes consume the stream identically
    flutter = _band_noise(rng, n, fs, FLUTTER_BAND)
    floor = _band_noise(rng, n, fs, FLOOR_BAND)
    noise = rng.standard_normal(n)

    clean *= 1.0 + 0.8 * effect * flutter
    clean_rms = np.sqrt(np.mean(clean ** 2))
    clean *= CLEAN_RMS / clean_rms if clean_rms > 0 else 0.0
    clean += 0.05 * effect * CLEAN_RMS * floor

    x = clean + noise * CLEAN_RMS * 10 ** (-cfg.snr_db / 20.0)
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > PEAK_LIMIT:
        x *= PEAK_LIMIT / peak

    n_artifacts = rng.poisson(cfg.artifact_rate * cfg.duration_s / 60.0) if cfg.artifact_rate > 0 else 0
    for _ in range(n_artifacts):
        start = int(rng.integers(0, max(1, n - int(fs))))
        seg = slice(start, min(n, start + int(fs)))
        x[seg] = np.sign(np.sin(2 * np.pi * 3.0 * t[seg]) + 1e-9)

    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    return pcm, bp


def generate_cohort(cfg: CohortConfig, out_dir: str = None, max_concurrent: int = None) -> CohortDataset:
    """Generate (and optionally write) the cohort; output depends only on `cfg`."""
    cfg.validate()
    ids = recording_ids(cfg)
    results = run_parallel(lambda item: generate_recording(item[0], item[1], cfg), ids, max_concurrent)

    recordings, readings, labels = {}, {}, {}
    for (rid, label), (pcm, bp) in zip(ids, results):
        recordings[rid] = Waveform(samples=pcm.astype(np.float64) / 32768.0, rate=float(cfg.sample_rate))
        readings[rid] = bp
        labels[rid] = label
    dataset = CohortDataset(config=cfg, recordings=recordings, readings=readings, labels=labels)

    if out_dir:
        write_cohort(out_dir, cfg, ids, results)
    n_norm, n_hyp = cfg.counts
    log.info("Generated %d normotensive + %d hypertensive recordings (class_effect=%.2f, snr=%.1f dB)",
             n_norm, n_hyp, cfg.class_effect, cfg.snr_db)
    return dataset


def write_cohort(out_dir: str, cfg: CohortConfig, ids, results) -> None:
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    for (rid, _), (pcm, _) in zip(ids, results):
        wavfile.write(os.path.join(wav_dir, f"{rid}.wav"), cfg.sample_rate, pcm)

    tmp_path = os.path.join(out_dir, "labels.csv.tmp")
    with open(tmp_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["recording_id", "sbp_left", "dbp_left", "sbp_right", "dbp_right"])
        for (rid, _), (_, bp) in zip(ids, results):
            writer.writerow([rid, f"{bp.sbp_left:g}", f"{bp.dbp_left:g}", f"{bp.sbp_right:g}", f"{bp.dbp_right:g}"])
    os.replace(tmp_path, os.path.join(out_dir, "labels.csv"))

    with open(os.path.join(out_dir, "cohort.cfg"), "w", encoding="utf-8") as f:
        f.write(cfg.to_text())
    write_ground_truth(os.path.join(out_dir, "ground_truth.csv"), cfg)


def perturbed_scale_indices(center_freqs: np.ndarray, band: Tuple[float, float] = FLOOR_BAND) -> List[int]:
    return [i for i, f in enumerate(center_freqs) if band[0] <= f <= band[1]]


def write_ground_truth(path: str, cfg: CohortConfig) -> None:
    from tfr import center_frequencies

    freqs = center_frequencies()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["perturbation", "band_lo_hz", "band_hi_hz", "strength", "scale_indices"])
        writer.writerow(["floor", *FLOOR_BAND, 0.05 * cfg.class_effect,
                         ";".join(str(i) for i in perturbed_scale_indices(freqs, FLOOR_BAND))])
        writer.writerow(["flutter", *FLUTTER_BAND, 0.8 * cfg.class_effect, ""])
        writer.writerow(["burst_width", "", "", 0.35 * cfg.class_effect, ""])
        writer.writerow(["beat_jitter", "", "", 0.06 * cfg.class_effect, ""])


def dataset_checksum(directory: str) -> str:
    """SHA-256 over labels.csv, cohort.cfg and every WAV, in sorted order."""
    h = hashlib.sha256()
    names = ["labels.csv", "cohort.cfg"]
    wav_dir = os.path.join(directory, "wav")
    if os.path.isdir(wav_dir):
        names += [os.path.join("wav", n) for n in sorted(os.listdir(wav_dir))]
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            continue
        h.update(name.encode("utf-8"))
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def memory_checksum(dataset: CohortDataset) -> str:
    h = hashlib.sha256()
    for rid in dataset.recordings:
        h.update(rid.encode("utf-8"))
        h.update(np.ascontiguousarray(dataset.recordings[rid].samples).tobytes())
        bp = dataset.readings[rid]
        h.update(np.array([bp.sbp_left, bp.dbp_left, bp.sbp_right, bp.dbp_right]).tobytes())
    return h.hexdigest()


def envelope_band_energy(w: Waveform, band: Tuple[float, float] = FLUTTER_BAND) -> float:
    """Share of envelope power (Hilbert magnitude, DC removed) falling inside `band`."""
    env = np.abs(hilbert(w.samples))
    env = env - env.mean()
    power = np.abs(np.fft.rfft(env)) ** 2
    freqs = np.fft.rfftfreq(len(env), 1.0 / w.rate)
    total = power[1:].sum()
    if total <= 0:
        return 0.0
    return float(power[(freqs >= band[0]) & (freqs <= band[1])].sum() / total)
