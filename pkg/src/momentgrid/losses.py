"""Supervision labels (threshold-scaled IoU) and the alignment loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .grid import span_of_block, temporal_iou

CLIP_EPS = 1e-7


def scale_labels(grid, gt_span, theta_min, theta_max):
    """Per-block targets: IoU against the ground-truth span, remapped by the
    two thresholds into [0, 1] (zero below theta_min, one at or above
    theta_max, linear between). Invalid blocks stay zero.
    """
    if not theta_min < theta_max:
        raise ValidationError("theta_min must be < theta_max")
    y = np.zeros((grid.T, grid.T))
    span = tuple(gt_span)
    for i, j in grid.valid_blocks():
        o = temporal_iou(span_of_block(i, j, grid.tau), span)
        if o <= theta_min:
            continue
        y[i, j] = 1.0 if o >= theta_max else (o - theta_min) / (theta_max - theta_min)
    return y


def alignment_loss(scores, labels, grid):
    """Binary cross-entropy over the N_A valid candidates, averaged per
    sample then over the batch. Scores are clipped to [1e-7, 1 - 1e-7];
    invalid blocks contribute exactly nothing.
    """
    if isinstance(scores, np.ndarray):
        scores = ad.Tensor(scores)
    squeeze = scores.ndim == 2
    if squeeze:
        scores = ad.reshape(scores, (1,) + scores.shape)
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    mask = grid.mask_f64()[None]
    p = ad.clip(scores, CLIP_EPS, 1.0 - CLIP_EPS)
    per_block = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    per_sample = ad.tsum(per_block * mask, axis=(1, 2)) * (-1.0 / grid.n_valid)
    return ad.tmean(per_sample)
