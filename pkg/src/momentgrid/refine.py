"""Fine-grained "reread" encoders.

Video side: a residual feed-forward block, Linear(ReLU(Linear(x))) + x, with
inner width equal to the hidden size. Query side: unigram/bigram/trigram
temporal convolutions (all length-preserving), channel-concatenated and mixed
back down by a linear layer. Pad rows are zeroed before the convolutions so
edge windows mix with zeros, and zeroed again afterwards.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def refine_video(v_hat, store, prefix="refine_video"):
    h = ad.relu(ad.linear(v_hat, store[f"{prefix}.ffn1.w"], store[f"{prefix}.ffn1.b"]))
    return ad.linear(h, store[f"{prefix}.ffn2.w"], store[f"{prefix}.ffn2.b"]) + v_hat


def conv1d_tokens(x, w, b):
    """Length-preserving temporal convolution over (B, L, C).

    w: (k, C, C_out). Even kernels pad one extra on the left (position j sees
    tokens <= j), odd kernels pad symmetrically.
    """
    k = w.shape[0]
    left = k - 1 - (k - 1) // 2
    right = (k - 1) // 2
    L = x.shape[1]
    xp = ad.pad_axis(x, 1, left, right)
    acc = None
    for d in range(k):
        term = ad.linear(xp[:, d : d + L, :], w[d])
        acc = term if acc is None else acc + term
    return acc + b


def refine_query(q_hat, mask, store, prefix="refine_query", kernels=(1, 2, 3)):
    m = mask[:, :, None].astype(np.float64)
    x = q_hat * m
    branches = [
        conv1d_tokens(x, store[f"{prefix}.conv{k}.w"], store[f"{prefix}.conv{k}.b"])
        for k in kernels
    ]
    merged = ad.concat(branches, axis=2)
    out = ad.linear(merged, store[f"{prefix}.merge.w"], store[f"{prefix}.merge.b"])
    return out * m
