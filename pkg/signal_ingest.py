#!/usr/bin/env python3
"""Recordings in, labelled groups of quality-gated windows out.

WAV -> Waveform (scaled to [-1, 1)) -> resample to 4 kHz -> 3.75 s windows with a
0.75 s stride -> quality gate -> disjoint groups of ten windows per RecordingSample.
"""
import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from errors import ArgumentError, UnsupportedLayoutError, ValidationError, WavFormatError

log = logging.getLogger(__name__)

PREPARED_RATE = 4000
WINDOW_S = 3.75
STRIDE_S = 0.75
SBP_THRESHOLD = 140.0
DBP_THRESHOLD = 90.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    rate: float

    def __post_init__(self):
        if self.rate <= 0:
            raise ValidationError(f"Waveform rate must be > 0, got {self.rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("Waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate


@dataclass(frozen=True)
class Window:
    samples: np.ndarray
    rate: float
    origin_offset: float


@dataclass(frozen=True)
class BloodPressureReading:
    sbp_left: float
    dbp_left: float
    sbp_right: float
    dbp_right: float

    def validate(self) -> None:
        for name in ("sbp_left", "dbp_left", "sbp_right", "dbp_right"):
            value = getattr(self, name)
            if not 30 <= value <= 300:
                raise ValidationError(f"{name}={value} mmHg outside [30, 300]")
        if self.sbp_left <= self.dbp_left:
            raise ValidationError(f"left arm SBP {self.sbp_left} must exceed DBP {self.dbp_left}")
        if self.sbp_right <= self.dbp_right:
            raise ValidationError(f"right arm SBP {self.sbp_right} must exceed DBP {self.dbp_right}")


class HypertensionLabel(Enum):
    NORMOTENSIVE = 0
    HYPERTENSIVE = 1

    @classmethod
    def parse(cls, text: str) -> "HypertensionLabel":
        text = str(text).strip().lower()
        for member in cls:
            if text in (member.name.lower(), str(member.value)):
                return member
        raise ValidationError(f"Unknown label: {text!r}")


@dataclass(frozen=True)
class GateConfig:
    min_rms: float = 0.005
    max_rms: float = 0.5
    max_clip: float = 0.01
    clip_level: float = 0.99

    @classmethod
    def from_config(cls, cfg: dict) -> "GateConfig":
        return cls(min_rms=cfg["min_rms"], max_rms=cfg["max_rms"], max_clip=cfg["max_clip"])


@dataclass
class RecordingSample:
    """Ten consecutive gated windows of one recording; the unit of classification."""
    sample_id: str
    recording_id: str
    label: HypertensionLabel
    windows: List[Window] = field(default_factory=list)

    @property
    def window_offsets(self) -> List[float]:
        return [w.origin_offset for w in self.windows]


def load_recording(path: str) -> Waveform:
    """Read a mono 16-bit PCM WAV and scale samples by 1/32768."""
    try:
        with warnings.catch_warnings():
            # scipy warns on unknown chunks; the data chunk is what matters
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as e:
        raise WavFormatError(f"{path}: {e}")

    if data.dtype != np.int16:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        if data.ndim == 2 and data.shape[1] == 1:
            data = data[:, 0]
        else:
            raise UnsupportedLayoutError(f"{path}: {data.shape[1]} channels, only mono is supported")
    return Waveform(samples=data.astype(np.float64) / 32768.0, rate=float(rate))


def resample(w: Waveform, target_rate: float, kaiser_beta: float = 8.0) -> Waveform:
    """Band-limited rate change by polyphase windowed-sinc filtering.

    The anti-alias cutoff sits at the lower of the two Nyquist frequencies; the FIR
    taps use a Kaiser window with `kaiser_beta`.
    """
    if target_rate <= 0:
        raise ArgumentError(f"target_rate must be > 0, got {target_rate}")
    if float(target_rate) == float(w.rate):
        return Waveform(samples=np.array(w.samples, copy=True), rate=float(w.rate))

    ratio = Fraction(str(target_rate)) / Fraction(str(w.rate))
    ratio = ratio.limit_denominator(1_000_000)
    up, down = ratio.numerator, ratio.denominator
    n_in = len(w.samples)
    n_out = -(-n_in * up // down)
    if n_in == 0:
        return Waveform(samples=np.zeros(0), rate=float(target_rate))

    # Point-reflect the edges so the FIR sees a continued signal instead of zeros.
    # The pad is a multiple of `down` input samples so it maps to whole output samples.
    half_len_in = 10 * max(up, down) / up
    pad = down * int(math.ceil((half_len_in + 1) / down))
    padded = np.pad(w.samples, pad, mode="reflect", reflect_type="odd")
    out = resample_poly(padded, up, down, window=("kaiser", kaiser_beta))
    skip = pad * up // down
    out = out[skip:skip + n_out]
    return Waveform(samples=np.asarray(out, dtype=np.float64), rate=float(target_rate))


def window_count(n_samples: int, rate: float, win_s: float = WINDOW_S, stride_s: float = STRIDE_S) -> int:
    win = int(round(win_s * rate))
    stride = int(round(stride_s * rate))
    if n_samples < win:
        return 0
    return (n_samples - win) // stride + 1


def segment_windows(w: Waveform, win_s: float = WINDOW_S, stride_s: float = STRIDE_S) -> List[Window]:
    """Overlapping windows; window i covers [i*stride_s, i*stride_s + win_s)."""
    if w.rate != PREPARED_RATE:
        raise ArgumentError(f"segment_windows expects {PREPARED_RATE} Hz input, got {w.rate}")
    win = int(round(win_s * w.rate))
    stride = int(round(stride_s * w.rate))
    n = window_count(len(w.samples), w.rate, win_s, stride_s)
    return [
        Window(samples=w.samples[i * stride:i * stride + win], rate=w.rate, origin_offset=i * stride / w.rate)
        for i in range(n)
    ]


def window_rms(samples: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(samples)))) if len(samples) else 0.0


def quality_gate(win: Window, cfg: GateConfig) -> bool:
    """RMS inside [min_rms, max_rms] and clipping fraction below max_clip."""
    rms = window_rms(win.samples)
    clip_fraction = float(np.mean(np.abs(win.samples) > cfg.clip_level)) if len(win.samples) else 1.0
    return cfg.min_rms <= rms <= cfg.max_rms and clip_fraction < cfg.max_clip


def label_from_bp(bp: BloodPressureReading) -> HypertensionLabel:
    """Hypertensive iff the higher arm reaches SBP >= 140 or DBP >= 90 mmHg."""
    bp.validate()
    if max(bp.sbp_left, bp.sbp_right) >= SBP_THRESHOLD or max(bp.dbp_left, bp.dbp_right) >= DBP_THRESHOLD:
        return HypertensionLabel.HYPERTENSIVE
    return HypertensionLabel.NORMOTENSIVE


def assemble_recording_samples(
    windows: Sequence[Window],
    label: HypertensionLabel,
    max_batches: int = 5,
    recording_id: str = "",
    windows_per_sample: int = 10,
) -> List[RecordingSample]:
    """Disjoint consecutive groups of `windows_per_sample` gated windows.

    Hypertensive recordings yield up to `max_batches` samples, normotensive ones a single sample.
    """
    groups = len(windows) // windows_per_sample
    if groups == 0:
        log.info("Dropping recording %s: %d gated windows, need %d",
                 recording_id or "<unnamed>", len(windows), windows_per_sample)
        return []
    limit = max_batches if label is HypertensionLabel.HYPERTENSIVE else 1
    samples = []
    for g in range(min(groups, limit)):
        chunk = list(windows[g * windows_per_sample:(g + 1) * windows_per_sample])
        samples.append(RecordingSample(
            sample_id=f"{recording_id}_b{g}", recording_id=recording_id, label=label, windows=chunk,
        ))
    return samples


def read_label_manifest(path: str) -> Dict[str, BloodPressureReading]:
    """`recording_id,sbp_left,dbp_left,sbp_right,dbp_right` rows keyed by recording id."""
    readings: Dict[str, BloodPressureReading] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = {"recording_id", "sbp_left", "dbp_left", "sbp_right", "dbp_right"} - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {', '.join(sorted(missing))}")
        for line, row in enumerate(reader, start=2):
            rid = (row.get("recording_id") or "").strip()
            if not rid:
                continue
            try:
                readings[rid] = BloodPressureReading(
                    sbp_left=float(row["sbp_left"]), dbp_left=float(row["dbp_left"]),
                    sbp_right=float(row["sbp_right"]), dbp_right=float(row["dbp_right"]),
                )
            except ValueError as e:
                raise ValidationError(f"{path}:{line}: {e}")
    return readings


def write_sample_manifest(path: str, samples: Sequence[RecordingSample]) -> None:
    """Prepared-sample manifest CSV, written atomically."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "recording_id", "label", "window_offsets"])
        for s in samples:
            offsets = ";".join(f"{o:.2f}" for o in s.window_offsets)
            writer.writerow([s.sample_id, s.recording_id, s.label.name.lower(), offsets])
    os.replace(tmp_path, path)


def read_sample_manifest(path: str) -> List[Tuple[str, str, HypertensionLabel, List[float]]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            offsets = [float(o) for o in row["window_offsets"].split(";") if o]
            rows.append((row["sample_id"], row["recording_id"], HypertensionLabel.parse(row["label"]), offsets))
    return rows


def ingest_recording(
    path: str,
    recording_id: str,
    bp: BloodPressureReading,
    cfg: dict,
) -> Tuple[List[RecordingSample], Dict[str, int]]:
    """Full per-recording chain; returns samples and gate counters for the run summary."""
    label = label_from_bp(bp)
    wav = resample(load_recording(path), cfg["target_rate"], cfg["kaiser_beta"])
    windows = segment_windows(wav, cfg["window_s"], cfg["stride_s"])
    gate = GateConfig.from_config(cfg)
    gated = [w for w in windows if quality_gate(w, gate)]
    samples = assemble_recording_samples(
        gated, label, cfg["max_batches"], recording_id=recording_id,
        windows_per_sample=cfg["windows_per_sample"],
    )
    return samples, {"windows": len(windows), "gated": len(gated), "samples": len(samples)}
