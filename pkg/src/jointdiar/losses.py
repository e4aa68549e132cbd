"""Speaker classification (additive angular margin), VAD and OSD losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    PROB_FLOOR,
    NumericalError,
    Tensor,
    add,
    as_tensor,
    length_normalize,
    matmul,
    primitive,
    scale,
)


@dataclass(frozen=True)
class AAMConfig:
    scale_s: float = 32.0
    margin_m: float = 0.2

    def __post_init__(self):
        if self.scale_s <= 0:
            raise ValueError("scale_s must be positive")
        if not 0 <= self.margin_m < math.pi / 2:
            raise ValueError("margin_m must lie in [0, pi/2)")


@dataclass(frozen=True)
class LossWeights:
    w_aam: float = 1.0
    w_vad: float = 5.0
    w_osd: float = 2.0

    def __post_init__(self):
        if min(self.w_aam, self.w_vad, self.w_osd) < 0:
            raise ValueError("loss weights must be non-negative")


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]


def aam_cross_entropy(cosines: Tensor, labels, cfg: AAMConfig = AAMConfig()) -> Tensor:
    """Mean cross-entropy over ``s*cos(theta_j)`` logits with the target
    logit replaced by ``s*cos(theta_y + m)``."""
    cosines = as_tensor(cosines)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = cosines.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if B == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    s, m = cfg.scale_s, cfg.margin_m
    rows = np.arange(B)
    c = np.clip(cosines.data, -1.0, 1.0)
    cy = c[rows, labels]
    sin_y = np.sqrt(np.maximum(1.0 - cy * cy, 0.0))
    logits = s * c
    logits[rows, labels] = s * (cy * math.cos(m) - sin_y * math.sin(m))
    lse = _logsumexp_rows(logits)
    loss = np.mean(lse - logits[rows, labels])

    def backward(g):
        p = np.exp(logits - lse[:, None])
        dz = p
        dz[rows, labels] -= 1.0
        dz *= g / B
        dc = s * dz
        dtarget = math.cos(m) + math.sin(m) * cy / np.maximum(sin_y, 1e-12)
        dc[rows, labels] *= dtarget
        return (dc,)

    return primitive(np.asarray(loss), (cosines,), backward)


def aam_softmax_loss(embeddings: Tensor, labels, classifier: Tensor, cfg: AAMConfig = AAMConfig()) -> Tensor:
    """AAM-softmax on B x D embeddings against a C x D classifier matrix;
    both sides are length-normalised first, so the loss ignores scale."""
    cos = matmul(length_normalize(embeddings), length_normalize(classifier), transpose_b=True)
    return aam_cross_entropy(cos, labels, cfg)


def bce_with_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean binary cross-entropy over frames with ``mask == 1``, from logits.

    Returns exactly 0 when the mask selects nothing.
    """
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets, dtype=np.float64)
    w = np.ones_like(x) if mask is None else np.asarray(mask, dtype=np.float64)
    if y.shape != x.shape or w.shape != x.shape:
        raise ValueError(f"length mismatch: logits {x.shape}, labels {y.shape}, mask {w.shape}")
    n = w.sum()
    if n == 0:
        return primitive(np.asarray(0.0), (logits,), lambda g: (np.zeros_like(x),))
    per_frame = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = (per_frame * w).sum() / n

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), 1.0 - 1.0 / (1.0 + np.exp(-np.abs(x))))
        return (g * (sig - y) * w / n,)

    return primitive(np.asarray(loss), (logits,), backward)


def _bce_prob(p, y, mask=None) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    if p.shape != y.shape or w.shape != p.shape:
        raise ValueError(f"length mismatch: probs {p.shape}, labels {y.shape}, mask {w.shape}")
    n = w.sum()
    if n == 0:
        return 0.0
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    per_frame = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float((per_frame * w).sum() / n)


def vad_bce(vad_prob, labels) -> float:
    """Mean BCE over all frames, probability form."""
    return _bce_prob(vad_prob, labels)


def osd_bce(osd_prob, labels, speech_mask) -> float:
    """Mean BCE over speech frames only; 0 when there are none."""
    return _bce_prob(osd_prob, labels, speech_mask)


def combined_loss(l_aam, l_vad, l_osd, w: LossWeights = LossWeights()):
    """``w_aam*l_aam + w_vad*l_vad + w_osd*l_osd`` for floats or tensors."""
    parts = (l_aam, l_vad, l_osd)
    for p in parts:
        value = p.data if isinstance(p, Tensor) else p
        if not np.all(np.isfinite(value)):
            raise NumericalError("non-finite loss component")
    if not any(isinstance(p, Tensor) for p in parts):
        return w.w_aam * l_aam + w.w_vad * l_vad + w.w_osd * l_osd
    total = scale(as_tensor(l_aam), w.w_aam)
    total = add(total, scale(as_tensor(l_vad), w.w_vad))
    return add(total, scale(as_tensor(l_osd), w.w_osd))
