"""Conditioned interaction: gate moment content by boundary evidence.

Each branch reduces one modality to a single vector (max over real query
tokens, mean over clips), maps it into moment feature space, and gates the
content map with sigmoid(boundary ⊙ vector), broadcast over all grid blocks.
The two gated maps concatenate channel-wise into the aligned map.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

_NEG_INF = -1e30


def masked_max_rows(x, mask):
    """Columnwise max over unmasked rows of (B, L, C)."""
    m = mask[:, :, None].astype(np.float64)
    filled = x * m + _NEG_INF * (1.0 - m)
    return ad.amax(filled, axis=1)


def _gate_and_mix(vector, boundary, content, grid):
    B, C = vector.shape
    gate = ad.sigmoid(boundary * ad.reshape(vector, (B, 1, 1, C)))
    return gate * content * grid.mask_f64()[None, :, :, None]


def query_branch(q_tilde, mask, boundary, content, store, grid,
                 prefix="interaction.query_proj"):
    if not mask.any(axis=1).all():
        raise ValidationError("query_branch: a sample has no unmasked tokens")
    pooled = masked_max_rows(q_tilde, mask)
    vector = pooled @ store[f"{prefix}.w"] + store[f"{prefix}.b"]
    return _gate_and_mix(vector, boundary, content, grid)


def video_branch(v_tilde, boundary, content, store, grid,
                 prefix="interaction.video_proj"):
    pooled = ad.tmean(v_tilde, axis=1)
    vector = pooled @ store[f"{prefix}.w"] + store[f"{prefix}.b"]
    return _gate_and_mix(vector, boundary, content, grid)


def align(a1, a2):
    """Channel concatenation of the two branch outputs, query-aware first."""
    if a1.shape != a2.shape:
        raise ValidationError(f"branch shapes differ: {a1.shape} vs {a2.shape}")
    return ad.concat([a1, a2], axis=-1)
