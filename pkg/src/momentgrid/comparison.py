"""Choice comparison stack and the sigmoid ranker.

The fused map enters four convolution blocks (grouped 7x7 convolution,
batch normalization, ReLU); invalid grid blocks are re-zeroed after every
block so masked regions never bleed into valid scores. Batch statistics are
taken over valid blocks only; running averages (momentum 0.1) serve
evaluation mode.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def fuse(a_bar, boundary, content, store, grid, prefix="fuse"):
    """Concat(aligned, boundary, content) -> 1x1 conv to C, plus a 1x1
    projection of the aligned map as the skip path, then ReLU."""
    cat = ad.concat([a_bar, boundary, content], axis=-1)
    main = ad.linear(cat, store[f"{prefix}.main.w"], store[f"{prefix}.main.b"])
    skip = ad.linear(a_bar, store[f"{prefix}.skip.w"], store[f"{prefix}.skip.b"])
    out = ad.relu(main + skip)
    return out * grid.mask_f64()[None, :, :, None]


def comparison_block(x, grid, store, prefix, groups, padding, training,
                     update_stats):
    y = ad.conv2d_grouped(
        x,
        store[f"{prefix}.conv.w"],
        store[f"{prefix}.conv.b"],
        padding=padding,
        groups=groups,
    )
    gamma, beta = store[f"{prefix}.bn.gamma"], store[f"{prefix}.bn.beta"]
    rm, rv = store[f"{prefix}.bn.running_mean"], store[f"{prefix}.bn.running_var"]
    if training:
        ybn, mean, var = ad.masked_batch_norm(y, gamma, beta, grid.mask_f64(), BN_EPS)
        if update_stats:
            rm.data = (1.0 - BN_MOMENTUM) * rm.data + BN_MOMENTUM * mean
            rv.data = (1.0 - BN_MOMENTUM) * rv.data + BN_MOMENTUM * var
    else:
        inv = 1.0 / np.sqrt(rv.data + BN_EPS)
        ybn = (y - rm.data) * (gamma * inv) + beta
    out = ad.relu(ybn)
    return out * grid.mask_f64()[None, :, :, None]


def compare(a_hat, grid, store, n_blocks, groups, padding, training=False,
            update_stats=False, prefix="compare"):
    out = a_hat
    for k in range(n_blocks):
        out = comparison_block(
            out, grid, store, f"{prefix}.b{k}", groups, padding, training,
            update_stats,
        )
    return out


def rank(a_tilde, grid, store, prefix="rank"):
    """Per-block matching probability: sigmoid of a 1x1 convolution,
    exactly zero at invalid blocks."""
    logits = ad.linear(a_tilde, store[f"{prefix}.w"], store[f"{prefix}.b"])
    B, T = logits.shape[0], logits.shape[1]
    scores = ad.sigmoid(ad.reshape(logits, (B, T, T)))
    return scores * grid.mask_f64()[None]
