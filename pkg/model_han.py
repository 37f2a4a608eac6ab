#!/usr/bin/env python3
"""Hierarchical attention network over ten multi-view windows.

window encoder (conv blocks -> LSTM -> additive attention) runs on each window,
the sequence encoder (LSTM -> additive attention) runs over the ten window
embeddings, then a tanh projector and a sigmoid classifier. Ablation variants
swap stages out as listed in VARIANT_STRUCTURE.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import seeds
from config import VARIANTS
from errors import ContractError, ShapeError, ValidationError
from tensor_autodiff import Graph, Tensor, additive_attention

log = logging.getLogger(__name__)

HEAD_PREFIXES = ("projector.", "classifier.")

# window: how a window's feature sequence becomes one vector
# sequence: how ten window vectors become one recording vector
VARIANT_STRUCTURE = {
    "full": dict(conv=True, window="lstm_attention", sequence="lstm_attention"),
    "no_window_encoder": dict(conv=True, window="mean", sequence="lstm_attention"),
    "no_recurrent": dict(conv=True, window="attention", sequence="attention"),
    "no_window_attention": dict(conv=True, window="lstm_last", sequence="lstm_attention"),
    "no_hierarchical_attention": dict(conv=True, window="lstm_mean", sequence="mean"),
    "no_sequence_encoder": dict(conv=True, window="lstm_attention", sequence="mean"),
    "no_conv_extractor": dict(conv=False, window="lstm_attention", sequence="lstm_attention"),
    "collapsed_hierarchy": dict(conv=True, window="lstm_attention", sequence="collapsed"),
}


@dataclass(frozen=True)
class HanConfig:
    variant: str = "full"
    channels: int = 2
    height: int = 40
    width: int = 250
    windows_per_sample: int = 10
    conv_filters: Tuple[int, ...] = (16, 32, 64)
    kernel_size: int = 3
    spatial_dropout: float = 0.2
    lstm_hidden: int = 64
    attention_units: int = 64
    embedding_dim: int = 64
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3

    @classmethod
    def from_config(cls, cfg: dict, channels: int) -> "HanConfig":
        return cls(
            variant=cfg["variant"], channels=channels, height=cfg["n_scales"], width=cfg["n_time_bins"],
            windows_per_sample=cfg["windows_per_sample"], conv_filters=tuple(cfg["conv_filters"]),
            kernel_size=cfg["kernel_size"], spatial_dropout=cfg["spatial_dropout"], lstm_hidden=cfg["lstm_hidden"],
            attention_units=cfg["attention_units"], embedding_dim=cfg["embedding_dim"],
            bn_momentum=cfg["bn_momentum"], bn_eps=cfg["bn_eps"],
        )

    @property
    def structure(self) -> Dict:
        return VARIANT_STRUCTURE[self.variant]

    @property
    def lstm_layers(self) -> int:
        s = self.structure
        return int(s["window"].startswith("lstm")) + int(s["sequence"] == "lstm_attention")

    @property
    def attention_layers(self) -> int:
        s = self.structure
        return int(s["window"] in ("lstm_attention", "attention")) + \
            int(s["sequence"] in ("lstm_attention", "attention"))

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant: {self.variant}")
        if not 1 <= self.channels <= 3:
            raise ValidationError(f"channels must be 1-3, got {self.channels}")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel_size must be odd for same padding")
        if self.structure["conv"]:
            if not self.conv_filters:
                raise ValidationError(f"variant {self.variant} needs at least one conv block")
            h, w = self.conv_output_hw()
            if h < 1 or w < 1:
                raise ValidationError(f"{len(self.conv_filters)} pooling blocks collapse a "
                                      f"{self.height}x{self.width} view")

    def conv_output_hw(self, width: Optional[int] = None) -> Tuple[int, int]:
        h, w = self.height, width or self.width
        for _ in self.conv_filters:
            h, w = h // 2, w // 2
        return h, w

    @property
    def window_feature_dim(self) -> int:
        if not self.structure["conv"]:
            return self.channels * self.height
        return self.conv_filters[-1] * self.conv_output_hw()[0]

    @property
    def window_embedding_dim(self) -> int:
        return self.lstm_hidden if self.structure["window"].startswith("lstm") else self.window_feature_dim

    @property
    def recording_embedding_dim(self) -> int:
        return self.embedding_dim if self.structure["sequence"] == "lstm_attention" else self.window_embedding_dim

    @property
    def sequence_length(self) -> int:
        """Time steps the window-level encoder sees."""
        width = self.width * (self.windows_per_sample if self.structure["sequence"] == "collapsed" else 1)
        return self.conv_output_hw(width)[1] if self.structure["conv"] else width


@dataclass
class ForwardResult:
    probability: Tensor
    embedding: Tensor
    window_weights: Optional[Tensor] = None
    sequence_weights: Optional[Tensor] = None


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


class HanModel:
    """Parameters, batch-norm buffers and the forward pass of one variant."""

    def __init__(self, cfg: HanConfig, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray],
                 inputs: Optional[Dict] = None):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        # representation and tfr settings the model was trained on; empty until training records them
        self.inputs = dict(inputs or {})

    # -- parameter groups -----------------------------------------------------------

    @property
    def encoder_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith(HEAD_PREFIXES)}

    @property
    def head_params(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(HEAD_PREFIXES)}

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def cast(self, dtype) -> "HanModel":
        params = {k: Tensor.parameter(v.data, name=k, dtype=dtype) for k, v in self.params.items()}
        buffers = {k: np.array(v, dtype=dtype) for k, v in self.buffers.items()}
        return HanModel(self.cfg, params, buffers, self.inputs)

    def copy(self) -> "HanModel":
        return self.cast(next(iter(self.params.values())).data.dtype)

    # -- stages -----------------------------------------------------------------------

    def _conv_features(self, g: Graph, x: Tensor) -> Tensor:
        cfg = self.cfg
        for i in range(len(cfg.conv_filters)):
            x = g.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            x = g.batch_norm(x, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                             self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"], cfg.bn_momentum, cfg.bn_eps)
            x = g.relu(x)
            x = g.spatial_dropout(x, cfg.spatial_dropout, name=f"conv{i}")
            x = g.maxpool2d(x, 2)
        n, f, h, w = x.shape
        # time axis kept; frequency x filters flattened per step
        return g.reshape(g.transpose(x, (0, 3, 1, 2)), (n, w, f * h))

    def _raw_rows(self, g: Graph, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        return g.reshape(g.transpose(x, (0, 3, 1, 2)), (n, w, c * h))

    def _attention(self, g: Graph, prefix: str, h: Tensor) -> Tuple[Tensor, Tensor]:
        weights, summary = additive_attention(
            g, h, self.params[f"{prefix}.w"], self.params[f"{prefix}.b"], self.params[f"{prefix}.u"])
        return summary, weights

    def _lstm(self, g: Graph, prefix: str, seq: Tensor) -> Tensor:
        return g.lstm(seq, self.params[f"{prefix}.wx"], self.params[f"{prefix}.wh"], self.params[f"{prefix}.b"])

    def window_encoder(self, g: Graph, x) -> Tuple[Tensor, Optional[Tensor]]:
        """Windows N x C x H x W -> (embeddings N x d_w, attention weights N x T or None)."""
        cfg = self.cfg
        x = g.lift(x)
        if x.data.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != cfg.height:
            raise ShapeError(f"window encoder expects N x {cfg.channels} x {cfg.height} x W, got {x.shape}")
        feats = self._conv_features(g, x) if cfg.structure["conv"] else self._raw_rows(g, x)
        mode = cfg.structure["window"]
        if mode == "mean":
            return g.mean(feats, axis=1), None
        if mode == "attention":
            return self._attention(g, "window_attention", feats)
        hs = self._lstm(g, "window_lstm", feats)
        if mode == "lstm_last":
            return g.index(hs, (slice(None), -1)), None
        if mode == "lstm_mean":
            return g.mean(hs, axis=1), None
        return self._attention(g, "window_attention", hs)

    def sequence_encoder(self, g: Graph, embs) -> Tuple[Tensor, Optional[Tensor]]:
        """Window embeddings N x S x d_w -> (recording embeddings, attention weights N x S or None)."""
        embs = g.lift(embs)
        if embs.data.ndim != 3 or embs.shape[1] != self.cfg.windows_per_sample:
            raise ContractError(f"sequence encoder needs {self.cfg.windows_per_sample} window embeddings, "
                                f"got shape {embs.shape}")
        mode = self.cfg.structure["sequence"]
        if mode == "mean":
            return g.mean(embs, axis=1), None
        if mode == "attention":
            return self._attention(g, "sequence_attention", embs)
        return self._attention(g, "sequence_attention", self._lstm(g, "sequence_lstm", embs))

    def project_and_classify(self, g: Graph, emb) -> Tensor:
        """tanh projector then sigmoid classifier; returns N probabilities."""
        hidden = g.tanh(g.dense(emb, self.params["projector.w"], self.params["projector.b"]))
        logit = g.dense(hidden, self.params["classifier.w"], self.params["classifier.b"])
        return g.sigmoid(g.reshape(logit, (logit.shape[0],)))

    def encode(self, g: Graph, batch) -> ForwardResult:
        """Recording embeddings for N x S x C x H x W input (probability left unset)."""
        cfg = self.cfg
        x = g.lift(batch)
        if x.data.ndim != 5 or x.shape[2:] != (cfg.channels, cfg.height, cfg.width):
            raise ShapeError(f"expected N x S x {cfg.channels} x {cfg.height} x {cfg.width}, got {x.shape}")
        n, s = x.shape[:2]
        if s != cfg.windows_per_sample:
            raise ContractError(f"a sample holds {cfg.windows_per_sample} windows, got {s}")
        if cfg.structure["sequence"] == "collapsed":
            joined = g.reshape(g.transpose(x, (0, 2, 3, 1, 4)), (n, cfg.channels, cfg.height, s * cfg.width))
            emb, w_weights = self.window_encoder(g, joined)
            return ForwardResult(probability=None, embedding=emb, window_weights=w_weights)
        w_emb, w_weights = self.window_encoder(g, g.reshape(x, (n * s, cfg.channels, cfg.height, cfg.width)))
        rec, s_weights = self.sequence_encoder(g, g.reshape(w_emb, (n, s, w_emb.shape[1])))
        return ForwardResult(probability=None, embedding=rec, window_weights=w_weights, sequence_weights=s_weights)

    def forward(self, g: Graph, batch) -> ForwardResult:
        out = self.encode(g, batch)
        out.probability = self.project_and_classify(g, out.embedding)
        return out

    # -- persistence ------------------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        arrays["config"] = np.array(json.dumps(asdict(self.cfg)))
        if self.inputs:
            arrays["inputs"] = np.array(json.dumps(self.inputs, sort_keys=True))
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path: str) -> "HanModel":
        with np.load(path, allow_pickle=False) as f:
            raw = json.loads(str(f["config"]))
            raw["conv_filters"] = tuple(raw["conv_filters"])
            cfg = HanConfig(**raw)
            params = {k[len("param/"):]: Tensor.parameter(f[k], name=k[len("param/"):], dtype=f[k].dtype)
                      for k in f.files if k.startswith("param/")}
            buffers = {k[len("buffer/"):]: np.array(f[k]) for k in f.files if k.startswith("buffer/")}
            inputs = json.loads(str(f["inputs"])) if "inputs" in f.files else None
        return cls(cfg, params, buffers, inputs)


def build_variant(cfg: HanConfig, seed: int = 0, dtype=np.float32) -> HanModel:
    """Initialise every parameter the variant uses (Glorot weights, orthogonal recurrences, zero biases)."""
    cfg.validate()
    s = cfg.structure
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def add(name: str, value: np.ndarray) -> None:
        params[name] = Tensor.parameter(value, name=name, dtype=dtype)

    def stream(name: str) -> np.random.Generator:
        return seeds.rng(seed, "init", cfg.variant, name)

    if s["conv"]:
        c_in, k = cfg.channels, cfg.kernel_size
        for i, f in enumerate(cfg.conv_filters):
            add(f"conv{i}.w", _glorot(stream(f"conv{i}"), (f, c_in, k, k), c_in * k * k, f * k * k))
            add(f"conv{i}.b", np.zeros(f))
            add(f"bn{i}.gamma", np.ones(f))
            add(f"bn{i}.beta", np.zeros(f))
            buffers[f"bn{i}.mean"] = np.zeros(f, dtype=dtype)
            buffers[f"bn{i}.var"] = np.ones(f, dtype=dtype)
            c_in = f

    def add_lstm(prefix: str, d_in: int, hidden: int) -> None:
        add(f"{prefix}.wx", _glorot(stream(prefix + ".wx"), (d_in, 4 * hidden), d_in, 4 * hidden))
        add(f"{prefix}.wh", _orthogonal(stream(prefix + ".wh"), hidden, 4 * hidden))
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        add(f"{prefix}.b", bias)

    def add_attention(prefix: str, d_in: int) -> None:
        a = cfg.attention_units
        add(f"{prefix}.w", _glorot(stream(prefix + ".w"), (d_in, a), d_in, a))
        add(f"{prefix}.b", np.zeros(a))
        add(f"{prefix}.u", _glorot(stream(prefix + ".u"), (a,), a, 1))

    feat = cfg.window_feature_dim
    if s["window"].startswith("lstm"):
        add_lstm("window_lstm", feat, cfg.lstm_hidden)
    if s["window"] in ("lstm_attention", "attention"):
        add_attention("window_attention", cfg.window_embedding_dim)
    if s["sequence"] == "lstm_attention":
        add_lstm("sequence_lstm", cfg.window_embedding_dim, cfg.embedding_dim)
        add_attention("sequence_attention", cfg.embedding_dim)
    elif s["sequence"] == "attention":
        add_attention("sequence_attention", cfg.window_embedding_dim)

    d_rec, d = cfg.recording_embedding_dim, cfg.embedding_dim
    add("projector.w", _glorot(stream("projector"), (d_rec, d), d_rec, d))
    add("projector.b", np.zeros(d))
    add("classifier.w", _glorot(stream("classifier"), (d, 1), d, 1))
    add("classifier.b", np.zeros(1))

    model = HanModel(cfg, params, buffers)
    log.debug("Built %s variant: %d parameters, %d LSTM layers", cfg.variant, model.parameter_count(),
              cfg.lstm_layers)
    return model


def predict(model: HanModel, batch: np.ndarray, chunk: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and recording embeddings for N x S x C x H x W input."""
    probs: List[np.ndarray] = []
    embs: List[np.ndarray] = []
    for start in range(0, len(batch), chunk):
        g = Graph(training=False, grad=False)
        out = model.forward(g, batch[start:start + chunk])
        probs.append(out.probability.data)
        embs.append(out.embedding.data)
    if not probs:
        return np.zeros(0, dtype=np.float32), np.zeros((0, model.cfg.recording_embedding_dim), dtype=np.float32)
    return np.concatenate(probs), np.concatenate(embs)
