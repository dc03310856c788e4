"""Prototype extraction and matching for episodic segmentation.

Masked average pooling turns support features into per-category prototypes;
queries are scored by position-wise cosine similarity against a foreground
and a background prototype; a self-support pass re-estimates both from the
query's own initial prediction, with the background side kept per-position
(softmax-weighted combinations of the query's predicted-background vectors).

All ops are differentiable with respect to features. Binarized masks are
plain uint8 arrays and act as constants during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

NORM_FLOOR = 1e-8


class EmptyMaskError(ValueError):
    """Raised when pooling is requested over a mask with no positive cells."""


@dataclass
class PredictionPair:
    """Foreground and background similarity maps over query positions."""

    fg: Tensor
    bg: Tensor


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling with a 0.5 threshold; factor 1 is identity."""
    mask = np.asarray(mask)
    if factor == 1:
        return mask.astype(np.uint8)
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by factor {factor}")
    blocks = mask.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    return (blocks.mean(axis=(1, 3)) >= 0.5).astype(np.uint8)


def map_prototype(feature, mask: np.ndarray) -> Tensor:
    """Masked average pooling: mean feature vector over mask-positive cells."""
    feature = as_tensor(feature)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != feature.shape[1:]:
        raise ValueError(f"mask {m.shape} does not match feature grid {feature.shape[1:]}")
    total = m.sum()
    if total == 0:
        raise EmptyMaskError("masked average pooling over an all-zero mask")
    return ad.tsum(feature * m, axis=(1, 2)) * (1.0 / total)


def _cosine_vector(proto: Tensor, feature: Tensor) -> Tensor:
    c, h, w = feature.shape
    flat = feature.reshape(c, h * w)
    dot = ad.matmul(proto.reshape(1, c), flat)
    pnorm = ad.clip_min(ad.sqrt(ad.tsum(proto * proto)), NORM_FLOOR)
    fnorm = ad.clip_min(ad.sqrt(ad.tsum(flat * flat, axis=0, keepdims=True)), NORM_FLOOR)
    return (dot / (pnorm * fnorm)).reshape(h, w)


def _cosine_map(proto_map: Tensor, feature: Tensor) -> Tensor:
    dot = ad.tsum(proto_map * feature, axis=0)
    pnorm = ad.clip_min(ad.sqrt(ad.tsum(proto_map * proto_map, axis=0)), NORM_FLOOR)
    fnorm = ad.clip_min(ad.sqrt(ad.tsum(feature * feature, axis=0)), NORM_FLOOR)
    return dot / (pnorm * fnorm)


def cosine_predict(fg: Tensor, bg: Tensor, f_q) -> PredictionPair:
    """Position-wise cosine scores; bg may be a vector or a per-position map."""
    f_q = as_tensor(f_q)
    fg, bg = as_tensor(fg), as_tensor(bg)
    fg_map = _cosine_vector(fg, f_q)
    bg_map = _cosine_vector(bg, f_q) if bg.ndim == 1 else _cosine_map(bg, f_q)
    return PredictionPair(fg=fg_map, bg=bg_map)


def binarize(pair: PredictionPair) -> np.ndarray:
    """1 where fg similarity strictly exceeds bg similarity; ties give 0."""
    return (pair.fg.data > pair.bg.data).astype(np.uint8)


def self_support_fg(f_q, m_hat: np.ndarray, fallback: Tensor | None = None) -> Tensor:
    """Foreground prototype pooled from the query's own predicted mask."""
    if np.asarray(m_hat).sum() == 0:
        if fallback is None:
            raise EmptyMaskError("empty predicted foreground and no fallback prototype")
        return fallback
    return map_prototype(f_q, m_hat)


def adaptive_bg(f_q, m_hat: np.ndarray, fallback: Tensor | None = None) -> Tensor:
    """Per-position background prototypes from predicted-background vectors.

    Gathers the query columns where the predicted mask is 0, scores every
    query position against each of them, and returns the softmax-weighted
    (over the background-pixel axis) combination per position. An all-
    foreground prediction falls back to the support background prototype
    broadcast over positions.
    """
    f_q = as_tensor(f_q)
    c, h, w = f_q.shape
    m_hat = np.asarray(m_hat)
    bg_idx = np.flatnonzero(m_hat.reshape(-1) == 0)
    if bg_idx.size == 0:
        if fallback is None:
            raise EmptyMaskError("empty predicted background and no fallback prototype")
        return fallback.reshape(c, 1, 1) * np.ones((1, h, w))
    flat = f_q.reshape(c, h * w)
    bg_cols = ad.take_columns(flat, bg_idx)
    logits = ad.matmul(ad.transpose2d(bg_cols), flat)
    weights = ad.softmax(logits, axis=0)
    return ad.matmul(bg_cols, weights).reshape(c, h, w)


def kshot_average(items: list[Tensor]) -> Tensor:
    """Arithmetic mean over shots of prototypes or prototype maps."""
    if not items:
        raise ValueError("cannot average an empty shot list")
    acc = items[0]
    for item in items[1:]:
        acc = acc + item
    return acc * (1.0 / len(items))


def combine(support_part: Tensor, self_part: Tensor, alpha1: float, alpha2: float) -> Tensor:
    """alpha1*support + alpha2*self; a vector support broadcasts over a map."""
    support_part, self_part = as_tensor(support_part), as_tensor(self_part)
    if support_part.ndim == 1 and self_part.ndim == 3:
        c = support_part.shape[0]
        support_part = support_part.reshape(c, 1, 1) * np.ones((1,) + self_part.shape[1:])
    return support_part * alpha1 + self_part * alpha2


@dataclass
class QueryMatch:
    """Every intermediate of the query matching pass, for loss assembly."""

    support_fg: Tensor            # K-averaged support foreground prototype
    support_bg: Tensor            # K-averaged support background prototype
    support_pair: PredictionPair  # prediction of f_q from support prototypes only
    combined_fg: Tensor
    combined_bg: Tensor           # per-position map
    combined_pair: PredictionPair
    mask: np.ndarray


def match_query(support_features: list, support_masks: list[np.ndarray], f_q,
                alpha1: float = 0.5, alpha2: float = 0.5) -> QueryMatch:
    """Support prototypes -> per-shot self-support pass -> combined prediction."""
    f_q = as_tensor(f_q)
    fg_protos, bg_protos = [], []
    self_fgs, self_bgs = [], []
    for f_s, m_s in zip(support_features, support_masks):
        f_s = as_tensor(f_s)
        fg_k = map_prototype(f_s, m_s)
        bg_k = map_prototype(f_s, 1 - np.asarray(m_s))
        fg_protos.append(fg_k)
        bg_protos.append(bg_k)
        initial = binarize(cosine_predict(fg_k, bg_k, f_q))
        self_fgs.append(self_support_fg(f_q, initial, fallback=fg_k))
        self_bgs.append(adaptive_bg(f_q, initial, fallback=bg_k))

    support_fg = kshot_average(fg_protos)
    support_bg = kshot_average(bg_protos)
    self_fg = kshot_average(self_fgs)
    self_bg = kshot_average(self_bgs)

    combined_fg = combine(support_fg, self_fg, alpha1, alpha2)
    combined_bg = combine(support_bg, self_bg, alpha1, alpha2)

    support_pair = cosine_predict(support_fg, support_bg, f_q)
    combined_pair = cosine_predict(combined_fg, combined_bg, f_q)
    return QueryMatch(
        support_fg=support_fg,
        support_bg=support_bg,
        support_pair=support_pair,
        combined_fg=combined_fg,
        combined_bg=combined_bg,
        combined_pair=combined_pair,
        mask=binarize(combined_pair),
    )


def segment_query(support: list, f_q, alpha1: float = 0.5, alpha2: float = 0.5):
    """Full matching pipeline; returns (predicted mask, final PredictionPair).

    `support` is a list of (feature, mask) pairs at feature resolution.
    """
    features = [f for f, _ in support]
    masks = [m for _, m in support]
    match = match_query(features, masks, f_q, alpha1, alpha2)
    return match.mask, match.combined_pair
