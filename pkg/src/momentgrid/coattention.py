"""Multi-modal co-attention: query-aware video and video-aware query features.

Attention pooling on one modality produces a single attended vector, which
gates the other modality's rows by Hadamard product followed by per-row l2
normalization (epsilon 1e-8 in the denominator, so zero rows stay zero).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

NORM_EPS = 1e-8
_NEG_INF = -1e30


def l2norm_rows(x, eps=NORM_EPS):
    norm = ad.sqrt(ad.tsum(x * x, axis=-1, keepdims=True))
    return x / (norm + eps)


def _softmax_last(scores, mask=None):
    """Softmax over the last axis; masked positions get exactly zero weight."""
    if mask is not None:
        m = mask.astype(np.float64)
        scores = scores * m + _NEG_INF * (1.0 - m)
    shift = scores.data.max(axis=-1, keepdims=True)  # constant, grad-free
    e = ad.exp(scores - shift)
    if mask is not None:
        e = e * m
    return e / ad.tsum(e, axis=-1, keepdims=True)


def attend_query(q_bar, mask, store, prefix="coattn.query_score"):
    """Token attention weights and the attention-pooled query vector.

    q_bar: (B, L, C); mask: (B, L) bool with at least one True per row.
    Returns (weights (B, L), q_attn (B, C)).
    """
    if not mask.any(axis=1).all():
        raise ValidationError("attend_query: a sample has no unmasked tokens")
    scores = ad.reshape(ad.linear(q_bar, store[f"{prefix}.w"], store[f"{prefix}.b"]), mask.shape)
    weights = _softmax_last(scores, mask)
    q_attn = ad.tsum(ad.reshape(weights, weights.shape + (1,)) * q_bar, axis=1)
    return weights, q_attn


def attend_video(v_bar, store, prefix="coattn.video_score"):
    """Mirror construction over clips (no mask: every clip is real)."""
    B, T, _ = v_bar.shape
    scores = ad.reshape(ad.linear(v_bar, store[f"{prefix}.w"], store[f"{prefix}.b"]), (B, T))
    weights = _softmax_last(scores)
    v_attn = ad.tsum(ad.reshape(weights, (B, T, 1)) * v_bar, axis=1)
    return weights, v_attn


def fuse_query_to_video(v_bar, q_attn):
    """Query-aware video rows: normalize(q_attn ⊙ v_t) per clip."""
    B, C = q_attn.shape
    return l2norm_rows(ad.reshape(q_attn, (B, 1, C)) * v_bar)


def fuse_video_to_query(q_bar, mask, v_attn):
    """Video-aware query rows; padded rows remain exactly zero."""
    B, C = v_attn.shape
    fused = l2norm_rows(ad.reshape(v_attn, (B, 1, C)) * q_bar)
    return fused * mask[:, :, None].astype(np.float64)
