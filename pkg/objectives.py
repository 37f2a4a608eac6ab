#!/usr/bin/env python3
"""Training objectives and temperature schedules.

Contrastive losses L2-normalise their embeddings themselves, so they only ever
see cosine similarities and are invariant to rescaling the encoder output.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Union

import numpy as np

from errors import ArgumentError, DegenerateBatchError, DomainError
from tensor_autodiff import Graph, Tensor

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
CONTRASTIVE_OBJECTIVES = ("cl", "supcon", "wcl", "bscl", "pcl", "pcl_am")
PROTOTYPE_OBJECTIVES = ("pcl", "pcl_am")
ADAPTIVE_TAU_FLOOR = 0.01

Temperature = Union[float, Tensor]


def bce_loss(g: Graph, p, y) -> Tensor:
    """Mean binary cross-entropy of probabilities `p` against 0/1 targets `y`.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    p = g.lift(p)
    y = np.asarray(y, dtype=g.dtype).reshape(p.shape)
    if np.any(~np.isfinite(p.data)) or np.any((p.data < 0) | (p.data > 1)):
        raise DomainError("bce_loss needs probabilities in [0, 1]")
    pc = g.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = g.mul(g.log(pc), y)
    neg = g.mul(g.log(g.sub(1.0, pc)), 1.0 - y)
    return g.neg(g.mean(g.add(pos, neg)))


def _check_batch(labels: np.ndarray):
    labels = np.asarray(labels).reshape(-1)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    has_pos = same.any(axis=1)
    if not has_pos.any():
        raise DegenerateBatchError(f"no anchor has a positive among {len(labels)} samples")
    if len(np.unique(labels)) == 1:
        log.warning("Contrastive batch holds a single class (%d samples)", len(labels))
    return labels, same, has_pos


def _similarity_logits(g: Graph, embeddings, tau: Temperature) -> Tensor:
    e = g.l2_normalize(embeddings, axis=1)
    return g.div(g.matmul(e, g.transpose(e)), tau)


def _anchor_mean(g: Graph, per_anchor: Tensor, has_pos: np.ndarray, weights: Optional[np.ndarray]) -> Tensor:
    mask = has_pos.astype(g.dtype)
    if weights is not None:
        mask = mask * weights
    return g.div(g.sum(g.mul(per_anchor, mask)), float(has_pos.sum()))


def cl_npairs_loss(g: Graph, embeddings, labels, tau: Temperature) -> Tensor:
    """N-pairs: -log(sum_pos exp(s/tau) / sum_{j != i} exp(s/tau)), averaged over anchors with positives."""
    labels, same, has_pos = _check_batch(labels)
    logits = _similarity_logits(g, embeddings, tau)
    others = ~np.eye(len(labels), dtype=bool)
    pos_mask = same | ~has_pos[:, None] & others
    per_anchor = g.sub(g.logsumexp(logits, axis=1, mask=others), g.logsumexp(logits, axis=1, mask=pos_mask))
    return _anchor_mean(g, per_anchor, has_pos, None)


def _supcon_terms(g: Graph, embeddings, labels, tau: Temperature):
    labels, same, has_pos = _check_batch(labels)
    logits = _similarity_logits(g, embeddings, tau)
    others = ~np.eye(len(labels), dtype=bool)
    denom = g.logsumexp(logits, axis=1, mask=others)
    counts = np.maximum(same.sum(axis=1), 1).astype(g.dtype)
    pos_mean = g.div(g.sum(g.mul(logits, same.astype(g.dtype)), axis=1), counts)
    return labels, has_pos, g.sub(denom, pos_mean)


def supcon_loss(g: Graph, embeddings, labels, tau: Temperature) -> Tensor:
    """Mean over anchors of -(1/|P|) sum_p log softmax_p."""
    _, has_pos, per_anchor = _supcon_terms(g, embeddings, labels, tau)
    return _anchor_mean(g, per_anchor, has_pos, None)


def effective_number(n, beta: float):
    """(1 - beta^n) / (1 - beta)."""
    n = np.asarray(n, dtype=np.float64)
    if beta == 0:
        return np.ones_like(n)
    return (1.0 - np.power(beta, n)) / (1.0 - beta)


def class_weights(labels, kind: str, class_counts: Optional[Mapping[int, int]] = None,
                  beta: float = 0.999) -> np.ndarray:
    """Per-sample weights normalised to mean 1.

    kind "inverse" uses 1/n_c; kind "effective" uses 1/effective_number(n_c).
    Counts default to the batch's own class counts.
    """
    labels = np.asarray(labels).reshape(-1)
    if class_counts is None:
        values, counts = np.unique(labels, return_counts=True)
        class_counts = dict(zip(values.tolist(), counts.tolist()))
    n = np.array([class_counts[int(c)] for c in labels], dtype=np.float64)
    if np.any(n <= 0):
        raise ArgumentError("class counts must be > 0")
    if kind == "inverse":
        w = 1.0 / n
    elif kind == "effective":
        w = 1.0 / effective_number(n, beta)
    else:
        raise ArgumentError(f"unknown weighting: {kind}")
    return w / w.mean()


def wcl_loss(g: Graph, embeddings, labels, tau: Temperature,
             class_counts: Optional[Mapping[int, int]] = None) -> Tensor:
    labels_arr, has_pos, per_anchor = _supcon_terms(g, embeddings, labels, tau)
    return _anchor_mean(g, per_anchor, has_pos, class_weights(labels_arr, "inverse", class_counts))


def bscl_loss(g: Graph, embeddings, labels, tau: Temperature,
              class_counts: Optional[Mapping[int, int]] = None, beta: float = 0.999) -> Tensor:
    labels_arr, has_pos, per_anchor = _supcon_terms(g, embeddings, labels, tau)
    return _anchor_mean(g, per_anchor, has_pos, class_weights(labels_arr, "effective", class_counts, beta))


def _prototype_cosines(g: Graph, embeddings, prototypes) -> Tensor:
    e = g.l2_normalize(embeddings, axis=1)
    p = g.l2_normalize(prototypes, axis=1)
    return g.matmul(e, g.transpose(p))


def _softmax_ce(g: Graph, logits: Tensor, onehot: np.ndarray) -> Tensor:
    true = g.sum(g.mul(logits, onehot), axis=1)
    return g.mean(g.sub(g.logsumexp(logits, axis=1), true))


def _onehot(labels, n_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ArgumentError(f"labels outside 0..{n_classes - 1}")
    return np.eye(n_classes, dtype=dtype)[labels]


def pcl_loss(g: Graph, embeddings, labels, prototypes, tau: Temperature) -> Tensor:
    """Cross-entropy of cosine-to-prototype logits scaled by 1/tau."""
    prototypes = g.lift(prototypes)
    onehot = _onehot(labels, prototypes.shape[0], g.dtype)
    cos = _prototype_cosines(g, embeddings, prototypes)
    return _softmax_ce(g, g.div(cos, tau), onehot)


def margin_cosine(g: Graph, cos_true, margin: float) -> Tensor:
    """cos(theta + m), falling back to cos(theta) - m sin(m) once theta + m would pass pi."""
    cos_true = g.lift(cos_true)
    limit = 1.0 - (1e-7 if g.dtype == np.float32 else 1e-12)
    theta = g.arccos(g.clip(cos_true, -limit, limit))
    shifted = g.cos(g.add(theta, margin))
    fallback = g.sub(cos_true, margin * math.sin(margin))
    return g.select(theta.data > math.pi - margin, fallback, shifted)


def pcl_am_loss(g: Graph, embeddings, labels, prototypes, tau: Temperature, margin: float = 0.3) -> Tensor:
    """PCL with an additive angular margin on the true-class cosine."""
    if not 0 <= margin < math.pi / 2:
        raise ArgumentError(f"margin must be in [0, pi/2), got {margin}")
    if margin == 0:
        return pcl_loss(g, embeddings, labels, prototypes, tau)
    prototypes = g.lift(prototypes)
    onehot = _onehot(labels, prototypes.shape[0], g.dtype)
    cos = _prototype_cosines(g, embeddings, prototypes)
    n = cos.shape[0]
    true = margin_cosine(g, g.sum(g.mul(cos, onehot), axis=1), margin)
    logits = g.add(g.mul(cos, 1.0 - onehot), g.mul(g.reshape(true, (n, 1)), onehot))
    return _softmax_ce(g, g.div(logits, tau), onehot)


def contrastive_loss(g: Graph, objective: str, embeddings, labels, tau: Temperature, prototypes=None,
                     class_counts: Optional[Mapping[int, int]] = None, margin: float = 0.3,
                     beta: float = 0.999) -> Tensor:
    if objective == "cl":
        return cl_npairs_loss(g, embeddings, labels, tau)
    if objective == "supcon":
        return supcon_loss(g, embeddings, labels, tau)
    if objective == "wcl":
        return wcl_loss(g, embeddings, labels, tau, class_counts)
    if objective == "bscl":
        return bscl_loss(g, embeddings, labels, tau, class_counts, beta)
    if objective in PROTOTYPE_OBJECTIVES and prototypes is None:
        raise ArgumentError(f"{objective} needs prototypes")
    if objective == "pcl":
        return pcl_loss(g, embeddings, labels, prototypes, tau)
    if objective == "pcl_am":
        return pcl_am_loss(g, embeddings, labels, prototypes, tau, margin)
    raise ArgumentError(f"unknown contrastive objective: {objective}")


def init_prototypes(n_classes: int, dim: int, rng: np.random.Generator) -> Tensor:
    """Random unit vectors, one row per class."""
    p = rng.standard_normal((n_classes, dim))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return Tensor.parameter(p, name="prototypes")


@dataclass
class TemperatureSchedule:
    kind: str = "fixed"
    tau_fixed: float = 0.1
    tau_min: float = 0.05
    tau_max: float = 0.5
    total_steps: int = 100
    period: int = 10
    block: int = 5

    def __post_init__(self):
        if not 0 < self.tau_min <= self.tau_max:
            raise ArgumentError("temperatures need 0 < tau_min <= tau_max")
        if self.kind not in ("fixed", "stepwise", "cosine", "increase", "decay", "adaptive"):
            raise ArgumentError(f"unknown scheduler: {self.kind}")

    @classmethod
    def from_config(cls, cfg: Dict, total_steps: int) -> "TemperatureSchedule":
        return cls(kind=cfg["scheduler"], tau_fixed=cfg["tau"], tau_min=cfg["tau_min"], tau_max=cfg["tau_max"],
                   total_steps=total_steps, period=cfg["tau_period_epochs"], block=cfg["tau_block_epochs"])


def temperature(s: TemperatureSchedule, step: int, learnable: Optional[Tensor] = None) -> float:
    """Temperature at `step` (an epoch index). Adaptive returns the learnable value, floored at 0.01."""
    lo, hi = s.tau_min, s.tau_max
    if s.kind == "fixed":
        return s.tau_fixed
    if s.kind == "adaptive":
        value = learnable.item() if learnable is not None else s.tau_fixed
        return max(value, ADAPTIVE_TAU_FLOOR)
    if s.kind in ("increase", "decay"):
        frac = step / (s.total_steps - 1) if s.total_steps > 1 else 0.0
        frac = min(max(frac, 0.0), 1.0)
        return lo + (hi - lo) * (frac if s.kind == "increase" else 1.0 - frac)
    if s.kind == "cosine":
        return lo + (hi - lo) * (1.0 + math.cos(2.0 * math.pi * step / max(s.period, 1))) / 2.0
    # stepwise: tau_max for even blocks, tau_min for odd blocks
    return hi if (step // max(s.block, 1)) % 2 == 0 else lo


def adaptive_tau(initial: float) -> Tensor:
    return Tensor.parameter(np.array(initial), name="tau")


def clamp_adaptive_tau(tau: Tensor) -> None:
    np.maximum(tau.data, ADAPTIVE_TAU_FLOOR, out=tau.data)
