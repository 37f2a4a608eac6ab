#!/usr/bin/env python3
"""Frozen inference bundles: export, load, forward-only inference and latency benchmark.

Layout (little-endian): b"HYPE", u32 version, u64 payload length, payload, u32 CRC-32C of the
payload. Payload: u32 manifest length, UTF-8 JSON manifest, u32 tensor count, then per
tensor u16 name length, name, u8 ndim, u32 dims, float32 values.

Nothing here imports the training engine; a loaded bundle runs on plain numpy.
"""
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple, Union

import crc32c
import numpy as np

from errors import BundleError, ConfigError, ValidationError
from signal_ingest import RecordingSample

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"HYPE"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_TRAILER = struct.Struct("<I")


@dataclass(frozen=True)
class InferenceBundle:
    manifest: Dict
    tensors: Dict[str, np.ndarray]

    @property
    def channels(self) -> int:
        return int(self.manifest["channels"])

    @property
    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


# -- export -------------------------------------------------------------------------------------

def _fold_batch_norm(params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray], i: int,
                     eps: float) -> Dict[str, np.ndarray]:
    """conv{i} followed by eval-mode bn{i} as one affine conv."""
    w = params[f"conv{i}.w"].astype(np.float64)
    b = params[f"conv{i}.b"].astype(np.float64)
    scale = params[f"bn{i}.gamma"].astype(np.float64) / np.sqrt(buffers[f"bn{i}.var"].astype(np.float64) + eps)
    shift = params[f"bn{i}.beta"].astype(np.float64) - buffers[f"bn{i}.mean"].astype(np.float64) * scale
    return {f"conv{i}.w": (w * scale[:, None, None, None]).astype(np.float32),
            f"conv{i}.b": (b * scale + shift).astype(np.float32)}


def _input_settings(model, representation: Optional[str], reciprocal_eps: Optional[float]) -> Tuple[str, Dict]:
    """Representation and tfr settings for the bundle, preferring what the model was trained on."""
    from tfr import REPRESENTATION_CHANNELS, TfrConfig

    cfg = model.cfg
    recorded = getattr(model, "inputs", None) or {}
    trained_on = recorded.get("representation")
    if representation is not None and trained_on is not None and representation != trained_on:
        raise ValidationError(f"model was trained on {trained_on} views, not {representation}")
    representation = representation or trained_on or "multiview"
    if representation not in REPRESENTATION_CHANNELS:
        raise ValidationError(f"unknown representation: {representation}")
    if REPRESENTATION_CHANNELS[representation] != cfg.channels:
        raise ValidationError(f"{representation} views have {REPRESENTATION_CHANNELS[representation]} "
                              f"channel(s) but the model takes {cfg.channels}")

    if "tfr" in recorded:
        tfr = asdict(TfrConfig(**recorded["tfr"]))
        if reciprocal_eps is not None and reciprocal_eps != tfr["reciprocal_eps"]:
            raise ValidationError(f"model was trained with reciprocal_eps={tfr['reciprocal_eps']}, "
                                  f"not {reciprocal_eps}")
    else:
        eps = 1e-6 if reciprocal_eps is None else reciprocal_eps
        tfr = asdict(TfrConfig(n_scales=cfg.height, n_time_bins=cfg.width, reciprocal_eps=eps))
    if (tfr["n_scales"], tfr["n_time_bins"]) != (cfg.height, cfg.width):
        raise ValidationError(f"tfr grid {tfr['n_scales']}x{tfr['n_time_bins']} does not match "
                              f"the model input {cfg.height}x{cfg.width}")
    return representation, tfr


def bundle_from_model(model, representation: Optional[str] = None,
                      reciprocal_eps: Optional[float] = None) -> InferenceBundle:
    """Frozen tensors of a trained HanModel: dropout dropped, batch norm folded into the convolutions."""
    cfg = model.cfg
    representation, tfr = _input_settings(model, representation, reciprocal_eps)
    params = {name: np.asarray(t.data) for name, t in model.params.items()}
    tensors: Dict[str, np.ndarray] = {}
    n_blocks = len(cfg.conv_filters) if cfg.structure["conv"] else 0
    for i in range(n_blocks):
        tensors.update(_fold_batch_norm(params, model.buffers, i, cfg.bn_eps))
    for name, value in params.items():
        if not name.startswith(("conv", "bn")):
            tensors[name] = value.astype(np.float32)
    manifest = {
        "format": "hype-inference",
        "variant": cfg.variant,
        "structure": dict(cfg.structure),
        "channels": cfg.channels,
        "height": cfg.height,
        "width": cfg.width,
        "windows_per_sample": cfg.windows_per_sample,
        "conv_blocks": n_blocks,
        "representation": representation,
        "normalization": "minmax",
        "reciprocal_eps": tfr["reciprocal_eps"],
        "tfr": tfr,
        "parameter_count": int(sum(t.size for t in tensors.values())),
        "tensors": sorted(tensors),
    }
    return InferenceBundle(manifest=manifest, tensors=tensors)


def encode_bundle(bundle: InferenceBundle) -> bytes:
    manifest = json.dumps(bundle.manifest, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(manifest)), manifest, struct.pack("<I", len(bundle.tensors))]
    for name in sorted(bundle.tensors):
        arr = np.ascontiguousarray(bundle.tensors[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return (_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, len(payload)) + payload
            + _TRAILER.pack(crc32c.crc32c(payload)))


def export_bundle(model, path: str, representation: Optional[str] = None,
                  reciprocal_eps: Optional[float] = None) -> InferenceBundle:
    """Write the frozen bundle of `model` to `path` atomically."""
    bundle = bundle_from_model(model, representation, reciprocal_eps)
    data = encode_bundle(bundle)
    tmp_path = path + ".tmp"
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(tmp_path, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except OSError as e:
        raise BundleError(f"could not write bundle {path}: {e}")
    log.info("Exported %s bundle to %s (%d parameters, %.1f KiB)", bundle.manifest["variant"], path,
             bundle.parameter_count, len(data) / 1024)
    return bundle


# -- load -----------------------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise BundleError("bundle payload truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BundleError("bundle payload truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def decode_bundle(data: bytes) -> InferenceBundle:
    if len(data) < _HEADER.size + _TRAILER.size:
        raise BundleError("file too short for a bundle")
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != BUNDLE_MAGIC:
        raise BundleError(f"bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {version}")
    if len(data) != _HEADER.size + length + _TRAILER.size:
        raise BundleError(f"payload length {length} does not match file size {len(data)}")
    payload = data[_HEADER.size:_HEADER.size + length]
    (stored,) = _TRAILER.unpack_from(data, _HEADER.size + length)
    if crc32c.crc32c(payload) != stored:
        raise BundleError("checksum mismatch")

    reader = _Reader(payload)
    (manifest_len,) = reader.take("<I")
    try:
        manifest = json.loads(reader.raw(manifest_len).decode("utf-8"))
    except ValueError as e:
        raise BundleError(f"unreadable manifest: {e}")
    (count,) = reader.take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.raw(name_len).decode("utf-8")
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.raw(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if reader.pos != len(payload):
        raise BundleError("trailing bytes after tensor table")
    return InferenceBundle(manifest=manifest, tensors=tensors)


def load_bundle(path: str) -> InferenceBundle:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise BundleError(f"could not read bundle {path}: {e}")
    return decode_bundle(data)


# -- forward --------------------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _conv_relu_pool(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    f, k = w.shape[0], w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((n, c, k, k, h, wd), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + wd]
    out = np.einsum("fk,nkhw->nfhw", w.reshape(f, c * k * k), cols.reshape(n, c * k * k, h, wd), optimize=True)
    out = np.maximum(out + b[None, :, None, None], 0)
    h2, w2 = h // 2, wd // 2
    return out[:, :, :h2 * 2, :w2 * 2].reshape(n, f, h2, 2, w2, 2).max(axis=(3, 5))


def _lstm(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, steps, _ = x.shape
    hid = wh.shape[0]
    h = np.zeros((n, hid), dtype=x.dtype)
    c = np.zeros((n, hid), dtype=x.dtype)
    out = np.empty((n, steps, hid), dtype=x.dtype)
    xw = x @ wx + b
    for t in range(steps):
        z = xw[:, t] + h @ wh
        i, f, o = _sigmoid(z[:, :hid]), _sigmoid(z[:, hid:2 * hid]), _sigmoid(z[:, 3 * hid:])
        c = f * c + i * np.tanh(z[:, 2 * hid:3 * hid])
        h = o * np.tanh(c)
        out[:, t] = h
    return out


def _attend(h: np.ndarray, t: Dict[str, np.ndarray], prefix: str) -> np.ndarray:
    scores = (np.tanh(h @ t[f"{prefix}.w"] + t[f"{prefix}.b"]) @ t[f"{prefix}.u"].reshape(-1, 1))[..., 0]
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)
    return (weights[..., None] * h).sum(axis=1)


def _window_stage(bundle: InferenceBundle, x: np.ndarray) -> np.ndarray:
    t, m = bundle.tensors, bundle.manifest
    mode = m["structure"]["window"]
    if m["structure"]["conv"]:
        for i in range(m["conv_blocks"]):
            x = _conv_relu_pool(x, t[f"conv{i}.w"], t[f"conv{i}.b"])
    n, f, h, w = x.shape
    feats = x.transpose(0, 3, 1, 2).reshape(n, w, f * h)
    if mode == "mean":
        return feats.mean(axis=1)
    if mode == "attention":
        return _attend(feats, t, "window_attention")
    hs = _lstm(feats, t["window_lstm.wx"], t["window_lstm.wh"], t["window_lstm.b"])
    if mode == "lstm_last":
        return hs[:, -1]
    if mode == "lstm_mean":
        return hs.mean(axis=1)
    return _attend(hs, t, "window_attention")


def forward(bundle: InferenceBundle, batch: np.ndarray) -> np.ndarray:
    """Probabilities for N x S x C x H x W input."""
    t, m = bundle.tensors, bundle.manifest
    x = np.asarray(batch, dtype=np.float32)
    expected = (m["windows_per_sample"], m["channels"], m["height"], m["width"])
    if x.ndim != 5 or x.shape[1:] != expected:
        raise ConfigError(f"bundle expects N x {' x '.join(map(str, expected))} input, got {x.shape}")
    n, s, c, h, w = x.shape
    sequence = m["structure"]["sequence"]
    if sequence == "collapsed":
        rec = _window_stage(bundle, x.transpose(0, 2, 3, 1, 4).reshape(n, c, h, s * w))
    else:
        win = _window_stage(bundle, x.reshape(n * s, c, h, w)).reshape(n, s, -1)
        if sequence == "mean":
            rec = win.mean(axis=1)
        elif sequence == "attention":
            rec = _attend(win, t, "sequence_attention")
        else:
            hs = _lstm(win, t["sequence_lstm.wx"], t["sequence_lstm.wh"], t["sequence_lstm.b"])
            rec = _attend(hs, t, "sequence_attention")
    hidden = np.tanh(rec @ t["projector.w"] + t["projector.b"])
    return _sigmoid(hidden @ t["classifier.w"] + t["classifier.b"])[:, 0]


def sample_array(bundle: InferenceBundle, sample: RecordingSample) -> np.ndarray:
    """View stack for a raw RecordingSample under the bundle's representation."""
    from tfr import TfrConfig, build_views

    m = bundle.manifest
    if "tfr" in m:
        tfr_cfg = TfrConfig(**m["tfr"])
    else:
        tfr_cfg = TfrConfig(n_scales=m["height"], n_time_bins=m["width"], reciprocal_eps=m["reciprocal_eps"])
    return np.stack([build_views(w, m["representation"], tfr_cfg).as_array() for w in sample.windows])


def infer(bundle: InferenceBundle, sample: Union[RecordingSample, np.ndarray]) -> float:
    """Probability of hypertension for one sample (S x C x H x W array or RecordingSample)."""
    arr = sample_array(bundle, sample) if isinstance(sample, RecordingSample) else np.asarray(sample)
    if arr.ndim != 4 or arr.shape[1] != bundle.channels:
        raise ConfigError(f"sample has {arr.shape[1] if arr.ndim == 4 else '?'} channels, "
                          f"bundle expects {bundle.channels}")
    return float(forward(bundle, arr[None])[0])


@dataclass(frozen=True)
class BenchmarkResult:
    mean_ms: float
    sd_ms: float
    p50_ms: float
    p95_ms: float

    def to_row(self) -> Dict[str, float]:
        return {"mean_ms": self.mean_ms, "sd_ms": self.sd_ms, "p50_ms": self.p50_ms, "p95_ms": self.p95_ms}


def benchmark_inference(bundle: InferenceBundle, sample: np.ndarray, n_trials: int = 100,
                        warmup_runs: int = 5) -> BenchmarkResult:
    """Wall-clock latency of `infer` on one sample over `n_trials` timed runs after the warm-up."""
    if n_trials < 2:
        raise ConfigError("benchmark needs at least 2 trials")
    for _ in range(warmup_runs):
        infer(bundle, sample)
    timings: List[float] = []
    for _ in range(n_trials):
        start = time.perf_counter()
        infer(bundle, sample)
        timings.append((time.perf_counter() - start) * 1000.0)
    arr = np.array(timings)
    result = BenchmarkResult(mean_ms=float(arr.mean()), sd_ms=float(arr.std(ddof=1)),
                             p50_ms=float(np.percentile(arr, 50)), p95_ms=float(np.percentile(arr, 95)))
    log.info("Inference latency over %d trials: %.2f +/- %.2f ms (p95 %.2f ms)",
             n_trials, result.mean_ms, result.sd_ms, result.p95_ms)
    return result


def bundle_size_bytes(bundle: InferenceBundle) -> int:
    return len(encode_bundle(bundle))

