#!/usr/bin/env python3
"""Time-frequency views of one 3.75 s window.

All view grids are time_bins x columns (250 x 40). Column 0 is the highest
frequency for both the Morlet scalogram (scales increase along columns) and the
spectrogram, so the two representations are interchangeable channel-for-channel.
"""
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy.signal import get_window

from errors import ArgumentError, ContractError, DomainError, ShapeError, ValidationError
from signal_ingest import PREPARED_RATE, WINDOW_S, Window

log = logging.getLogger(__name__)

VIEW_MAGIC = b"TFRV"
VIEW_VERSION = 1
_VIEW_HEADER = struct.Struct("<4sIIIB")


@dataclass(frozen=True)
class TfrConfig:
    n_scales: int = 40
    n_time_bins: int = 250
    omega0: float = 6.0
    fmin: float = 1.0
    fmax: float = 200.0
    support_sigmas: float = 4.0
    reciprocal_eps: float = 1e-6
    stft_nperseg: int = 800
    stft_hop: int = 60

    @classmethod
    def from_config(cls, cfg: dict) -> "TfrConfig":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


class ViewKind(Enum):
    SCALOGRAM = 0
    RECIPROCAL = 1
    PHASE = 2
    SPECTROGRAM = 3


# Channel rank; a base view (scalogram or spectrogram) always comes first
_CHANNEL_RANK = {ViewKind.SCALOGRAM: 0, ViewKind.SPECTROGRAM: 0, ViewKind.RECIPROCAL: 1, ViewKind.PHASE: 2}


@dataclass(frozen=True)
class ComplexCoefficients:
    """Decimated CWT coefficients (time_bins x scales).

    `grid` holds the complex coefficient at each block centre; `magnitude`, when
    present, is the mean |c| over each block and is what `scalogram` reports.
    """
    grid: np.ndarray
    scales: np.ndarray
    center_freqs: np.ndarray
    magnitude: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grid.ndim != 2 or self.grid.shape[1] != len(self.scales):
            raise ShapeError(f"coefficient grid {self.grid.shape} does not match {len(self.scales)} scales")
        if len(self.scales) > 1 and not np.all(np.diff(self.scales) > 0):
            raise ValidationError("scales must be strictly increasing")
        if not np.all(np.isfinite(self.grid)):
            raise ValidationError("non-finite CWT coefficient")


@dataclass(frozen=True)
class View:
    grid: np.ndarray
    kind: ViewKind
    normalized: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.grid)):
            raise ValidationError(f"non-finite entries in {self.kind.name.lower()} view")


@dataclass(frozen=True)
class MultiViewInput:
    channels: Tuple[View, ...]
    window_ref: str = ""

    @property
    def kinds(self) -> Tuple[ViewKind, ...]:
        return tuple(v.kind for v in self.channels)

    def as_array(self, dtype=np.float32) -> np.ndarray:
        """Model layout: channels x frequency x time (C x 40 x 250)."""
        return np.stack([v.grid.T for v in self.channels]).astype(dtype)


def center_frequencies(n_scales: int = 40, fmin: float = 1.0, fmax: float = 200.0) -> np.ndarray:
    """Log-spaced centre frequencies, highest first (matching increasing scales)."""
    return np.geomspace(fmax, fmin, n_scales)


def scales_for(freqs: np.ndarray, omega0: float = 6.0) -> np.ndarray:
    """Scale (seconds) whose Morlet centre frequency omega0/(2*pi*s) is each of `freqs`."""
    return omega0 / (2.0 * np.pi * np.asarray(freqs, dtype=np.float64))


def morlet_kernel(scale: float, rate: float, omega0: float = 6.0, support_sigmas: float = 4.0,
                  max_half: Optional[int] = None) -> np.ndarray:
    """Sampled, L1-normalised Morlet: (dt/s) * pi^-1/4 * exp(i w0 t) * exp(-t^2/2), t = m dt / s."""
    dt = 1.0 / rate
    half = int(np.ceil(support_sigmas * scale / dt))
    if max_half is not None:
        half = min(half, max_half)
    t = np.arange(-half, half + 1) * dt / scale
    return (dt / scale) * np.pi ** -0.25 * np.exp(1j * omega0 * t) * np.exp(-0.5 * t * t)


@lru_cache(maxsize=8)
def _filter_bank(n: int, rate: float, scales: Tuple[float, ...], omega0: float,
                 support_sigmas: float) -> Tuple[np.ndarray, np.ndarray, int]:
    kernels = [morlet_kernel(s, rate, omega0, support_sigmas, max_half=max(n - 1, 0)) for s in scales]
    halves = np.array([(len(k) - 1) // 2 for k in kernels])
    nfft = sp_fft.next_fast_len(n + max(len(k) for k in kernels) - 1)
    bank = np.stack([sp_fft.fft(k, nfft) for k in kernels])
    bank.setflags(write=False)
    halves.setflags(write=False)
    return bank, halves, nfft


def cwt_coefficients(samples: np.ndarray, rate: float, scales: Sequence[float], omega0: float = 6.0,
                     support_sigmas: float = 4.0) -> np.ndarray:
    """Full-resolution CWT (scales x N), each row the 'same'-centred convolution with its kernel."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    bank, halves, nfft = _filter_bank(n, float(rate), tuple(float(s) for s in scales), float(omega0),
                                      float(support_sigmas))
    full = sp_fft.ifft(sp_fft.fft(x, nfft)[None, :] * bank, axis=1)
    out = np.empty((len(scales), n), dtype=np.complex128)
    for i, h in enumerate(halves):
        out[i] = full[i, h:h + n]
    return out


def _block_edges(n: int, n_bins: int) -> np.ndarray:
    return (np.arange(n_bins + 1) * n) // n_bins


def morlet_cwt(win: Window, n_scales: int = 40, n_time_bins: int = 250, cfg: TfrConfig = None) -> ComplexCoefficients:
    cfg = cfg or TfrConfig(n_scales=n_scales, n_time_bins=n_time_bins)
    expected = int(round(WINDOW_S * PREPARED_RATE))
    if win.rate != PREPARED_RATE or len(win.samples) != expected:
        raise ShapeError(f"morlet_cwt expects {expected} samples at {PREPARED_RATE} Hz, "
                         f"got {len(win.samples)} at {win.rate} Hz")
    return cwt_window(win.samples, win.rate, cfg)


def cwt_window(samples: np.ndarray, rate: float, cfg: TfrConfig) -> ComplexCoefficients:
    """CWT of any length, pooled into `cfg.n_time_bins` blocks."""
    n = len(samples)
    if n < cfg.n_time_bins:
        raise ShapeError(f"{n} samples cannot fill {cfg.n_time_bins} time bins")
    freqs = center_frequencies(cfg.n_scales, cfg.fmin, cfg.fmax)
    scales = scales_for(freqs, cfg.omega0)
    coeffs = cwt_coefficients(samples, rate, scales, cfg.omega0, cfg.support_sigmas)

    edges = _block_edges(n, cfg.n_time_bins)
    centres = (edges[:-1] + edges[1:]) // 2
    pooled = np.add.reduceat(np.abs(coeffs), edges[:-1], axis=1) / np.diff(edges)[None, :]
    return ComplexCoefficients(grid=coeffs[:, centres].T, scales=scales, center_freqs=freqs, magnitude=pooled.T)


def scalogram(c: ComplexCoefficients) -> View:
    grid = c.magnitude if c.magnitude is not None else np.abs(c.grid)
    return View(grid=np.array(grid, dtype=np.float64), kind=ViewKind.SCALOGRAM)


def reciprocal_view(v: View, eps: float = 1e-6) -> View:
    """g(S) = 1 / (S + eps); accepts a raw scalogram or spectrogram."""
    if v.kind not in (ViewKind.SCALOGRAM, ViewKind.SPECTROGRAM):
        raise ContractError(f"reciprocal view needs a scalogram, got {v.kind.name.lower()}")
    if v.normalized:
        raise ContractError("reciprocal view must be taken before normalization")
    if eps <= 0:
        raise ArgumentError(f"eps must be > 0, got {eps}")
    if np.any(v.grid < 0):
        raise DomainError("reciprocal view of negative magnitudes")
    return View(grid=1.0 / (v.grid + eps), kind=ViewKind.RECIPROCAL)


def phase_view(c: ComplexCoefficients) -> View:
    """atan2(Im, Re) in [-pi, pi]; the negative real axis maps to +pi."""
    return View(grid=np.arctan2(c.grid.imag, c.grid.real), kind=ViewKind.PHASE)


def spectrogram_freqs(cfg: TfrConfig = None, rate: float = PREPARED_RATE) -> np.ndarray:
    """Column frequencies of `stft_spectrogram`, highest first."""
    cfg = cfg or TfrConfig()
    return (np.arange(cfg.n_scales, 0, -1) * rate / cfg.stft_nperseg).astype(np.float64)


def stft_energy_scale(cfg: TfrConfig = None) -> float:
    """Two-sided sum of |X|^2 over all frames per unit signal energy (interior samples)."""
    cfg = cfg or TfrConfig()
    w = get_window("hann", cfg.stft_nperseg)
    return cfg.stft_nperseg * float(np.sum(w * w)) / cfg.stft_hop


def stft_spectrogram(win: Window, cfg: TfrConfig = None) -> View:
    """Hann STFT magnitude; frames centred on the CWT block centres, bins 1..n_scales.

    With nperseg 800 at 4 kHz the bin width is 5 Hz, so bins 1..40 cover 5-200 Hz.
    """
    cfg = cfg or TfrConfig()
    x = np.asarray(win.samples, dtype=np.float64)
    n = len(x)
    half = cfg.stft_nperseg // 2
    padded = np.pad(x, half)
    edges = _block_edges(n, cfg.n_time_bins)
    centres = (edges[:-1] + edges[1:]) // 2
    # centre c in signal coordinates starts at c in padded coordinates
    idx = centres[:, None] + np.arange(cfg.stft_nperseg)[None, :]
    frames = padded[idx] * get_window("hann", cfg.stft_nperseg)[None, :]
    spectrum = np.abs(sp_fft.rfft(frames, axis=1))
    if cfg.n_scales >= spectrum.shape[1]:
        raise ShapeError(f"nperseg {cfg.stft_nperseg} has too few bins for {cfg.n_scales} columns")
    return View(grid=spectrum[:, cfg.n_scales:0:-1].copy(), kind=ViewKind.SPECTROGRAM)


def minmax_normalize(v: View) -> View:
    """(x - min) / (max - min); a constant grid maps to all zeros."""
    lo, hi = float(np.min(v.grid)), float(np.max(v.grid))
    if hi > lo:
        grid = (v.grid - lo) / (hi - lo)
    else:
        grid = np.zeros_like(v.grid, dtype=np.float64)
    return View(grid=grid, kind=v.kind, normalized=True)


def assemble_multiview(views: Sequence[View], window_ref: str = "") -> MultiViewInput:
    if not views:
        raise ArgumentError("at least one view is required")
    kinds = [v.kind for v in views]
    if len(set(kinds)) != len(kinds):
        raise ArgumentError(f"duplicate view kinds: {', '.join(k.name.lower() for k in kinds)}")
    for v in views:
        if not v.normalized:
            raise ContractError(f"{v.kind.name.lower()} view is not normalized")
    shape = views[0].grid.shape
    if any(v.grid.shape != shape for v in views):
        raise ShapeError("views differ in dimensions")
    ranks = [_CHANNEL_RANK[k] for k in kinds]
    if ranks != sorted(ranks) or len(set(ranks)) != len(ranks):
        raise ArgumentError(f"views out of canonical order: {', '.join(k.name.lower() for k in kinds)}")
    return MultiViewInput(channels=tuple(views), window_ref=window_ref)


REPRESENTATION_KINDS = {
    "scalogram": (ViewKind.SCALOGRAM,),
    "reciprocal": (ViewKind.RECIPROCAL,),
    "multiview": (ViewKind.SCALOGRAM, ViewKind.RECIPROCAL),
    "multiview_phase": (ViewKind.SCALOGRAM, ViewKind.RECIPROCAL, ViewKind.PHASE),
    "spectrogram": (ViewKind.SPECTROGRAM, ViewKind.RECIPROCAL),
}
REPRESENTATION_CHANNELS = {name: len(kinds) for name, kinds in REPRESENTATION_KINDS.items()}


def build_views(win: Window, representation: str, cfg: TfrConfig = None, window_ref: str = "") -> MultiViewInput:
    """Normalized channel stack for one window under a named representation."""
    cfg = cfg or TfrConfig()
    if representation not in REPRESENTATION_CHANNELS:
        raise ArgumentError(f"unknown representation: {representation}")

    if representation == "spectrogram":
        base = stft_spectrogram(win, cfg)
        views = [base, reciprocal_view(base, cfg.reciprocal_eps)]
    else:
        coeffs = morlet_cwt(win, cfg.n_scales, cfg.n_time_bins, cfg)
        base = scalogram(coeffs)
        if representation == "scalogram":
            views = [base]
        elif representation == "reciprocal":
            views = [reciprocal_view(base, cfg.reciprocal_eps)]
        else:
            views = [base, reciprocal_view(base, cfg.reciprocal_eps)]
            if representation == "multiview_phase":
                views.append(phase_view(coeffs))
    return assemble_multiview([minmax_normalize(v) for v in views], window_ref)


def dump_view(path: str, v: View) -> None:
    """Flat binary: magic, version, rows, cols, kind, then row-major float32."""
    rows, cols = v.grid.shape
    with open(path, "wb") as f:
        f.write(_VIEW_HEADER.pack(VIEW_MAGIC, VIEW_VERSION, rows, cols, v.kind.value))
        f.write(np.ascontiguousarray(v.grid, dtype="<f4").tobytes())


def load_view(path: str, normalized: bool = True) -> View:
    with open(path, "rb") as f:
        header = f.read(_VIEW_HEADER.size)
        if len(header) != _VIEW_HEADER.size:
            raise ValidationError(f"{path}: truncated view header")
        magic, version, rows, cols, kind = _VIEW_HEADER.unpack(header)
        if magic != VIEW_MAGIC or version != VIEW_VERSION:
            raise ValidationError(f"{path}: not a view dump (magic {magic!r}, version {version})")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ValidationError(f"{path}: expected {rows * cols} values, found {data.size}")
    return View(grid=data.reshape(rows, cols).astype(np.float64), kind=ViewKind(kind), normalized=normalized)
