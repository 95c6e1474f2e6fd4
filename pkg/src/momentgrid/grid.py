"""Sparse 2-D grid of candidate moments and their feature maps.

A grid block (i, j) with i <= j is the moment running from time i*tau to
(j+1)*tau. The lower triangle is never valid; the "sparse" scheme further
thins long moments: with base granularity G = max(1, T // 4) and moment
length l = j - i + 1, the stride is s(l) = 1 for l <= G and the smallest
power of two >= l / G otherwise, and a block is kept iff both i and j + 1
are multiples of s(l). Short moments stay dense, long ones are strided.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError


@dataclass(frozen=True)
class MomentSpan:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValidationError(f"invalid span ({self.start_s}, {self.end_s})")

    def __iter__(self):
        yield self.start_s
        yield self.end_s


@dataclass(frozen=True)
class CandidateGrid:
    T: int
    valid: np.ndarray  # (T, T) bool, False everywhere below the diagonal
    tau: float  # seconds per clip

    @property
    def n_valid(self):
        return int(self.valid.sum())

    @property
    def duration(self):
        return self.T * self.tau

    def valid_blocks(self):
        """(N_A, 2) array of valid (i, j) pairs in row-major order."""
        return np.argwhere(self.valid)

    def span_of(self, i, j):
        return span_of_block(i, j, self.tau)

    def mask_f64(self):
        return self.valid.astype(np.float64)


def stride_for_length(length, T):
    base = max(1, T // 4)
    if length <= base:
        return 1
    s = 1
    while base * s < length:
        s *= 2
    return s


def build_grid(T, duration, scheme="sparse"):
    """Construct the validity mask for a T x T candidate grid."""
    if T < 1:
        raise ValidationError("grid side T must be >= 1")
    if duration <= 0:
        raise ValidationError("duration must be positive")
    valid = np.zeros((T, T), dtype=bool)
    for i in range(T):
        for j in range(i, T):
            if scheme == "dense":
                valid[i, j] = True
            elif scheme == "sparse":
                s = stride_for_length(j - i + 1, T)
                valid[i, j] = (i % s == 0) and ((j + 1) % s == 0)
            else:
                raise ValidationError(f"unknown grid scheme {scheme!r}")
    return CandidateGrid(T=T, valid=valid, tau=duration / T)


def span_of_block(i, j, tau):
    """Time span covered by grid block (i, j): [i*tau, (j+1)*tau)."""
    if i > j:
        raise ValidationError(f"block ({i}, {j}) has start index past end index")
    if i < 0:
        raise ValidationError("block indices must be non-negative")
    return MomentSpan(i * tau, (j + 1) * tau)


def temporal_iou(a, b):
    """Intersection-over-union of two time spans; 0 when disjoint."""
    (a0, a1), (b0, b1) = tuple(a), tuple(b)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def _batched(v):
    if isinstance(v, ad.Tensor):
        if v.ndim == 2:
            return ad.reshape(v, (1,) + v.shape), True
        return v, False
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        return ad.Tensor(v[None]), True
    return ad.Tensor(v), False


def content_map(v_hat, grid):
    """Content-level moment features: columnwise max over each span.

    v_hat: (T, C) or (B, T, C). Invalid blocks are exactly zero.
    """
    v, squeeze = _batched(v_hat)
    full = ad.span_max_map(v)
    masked = full * grid.mask_f64()[None, :, :, None]
    return masked[0] if squeeze else masked


def boundary_map(v_hat, grid):
    """Boundary-level moment features: start-clip + end-clip rows."""
    v, squeeze = _batched(v_hat)
    B, T, C = v.shape
    vi = ad.reshape(v, (B, T, 1, C))
    vj = ad.reshape(v, (B, 1, T, C))
    full = vi + vj
    masked = full * grid.mask_f64()[None, :, :, None]
    return masked[0] if squeeze else masked
