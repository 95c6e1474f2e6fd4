"""Coarse-grained encoders: clip resampling and bidirectional GRU stacks.

The GRU cell follows the usual gate equations, order (reset, update,
candidate):

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h

Padded query steps are excluded from the recurrence (the hidden state is
carried through unchanged), not fed and masked afterwards.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def pooling_matrix(t_in, t_out):
    """Adaptive mean-pool operator: row t averages inputs in
    [floor(t*t_in/t_out), ceil((t+1)*t_in/t_out))."""
    P = np.zeros((t_out, t_in))
    for t in range(t_out):
        lo = (t * t_in) // t_out
        hi = -(-(t + 1) * t_in // t_out)  # ceil division
        P[t, lo:hi] = 1.0 / (hi - lo)
    return P


def sample_video(clip_feats, store, T, prefix="video_in"):
    """Kernel-1 temporal convolution D_v -> C, then adaptive average pooling
    of the clip axis down (or up) to T."""
    x = clip_feats if isinstance(clip_feats, ad.Tensor) else ad.Tensor(clip_feats)
    y = ad.linear(x, store[f"{prefix}.w"], store[f"{prefix}.b"])
    P = pooling_matrix(y.shape[1], T)
    return ad.matmul(P, y)


def gru_direction(x, mask, store, prefix, hidden, reverse=False):
    """Run one GRU direction over (B, L, I); returns (B, L, hidden).

    `mask` is (B, L) bool or None; masked steps leave the hidden state
    untouched, so trailing pads never enter the recurrence.
    """
    B, L, _ = x.shape
    w_ih, w_hh = store[f"{prefix}.w_ih"], store[f"{prefix}.w_hh"]
    b_ih, b_hh = store[f"{prefix}.b_ih"], store[f"{prefix}.b_hh"]

    gi = ad.linear(x, ad.transpose(w_ih), b_ih)  # (B, L, 3H), all steps at once
    h = ad.Tensor(np.zeros((B, hidden)))
    H = hidden
    outputs = [None] * L
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        gi_t = gi[:, t]
        gh_t = h @ ad.transpose(w_hh) + b_hh
        r = ad.sigmoid(gi_t[:, :H] + gh_t[:, :H])
        z = ad.sigmoid(gi_t[:, H : 2 * H] + gh_t[:, H : 2 * H])
        n = ad.tanh(gi_t[:, 2 * H :] + r * gh_t[:, 2 * H :])
        h_new = (1.0 - z) * n + z * h
        if mask is None:
            h = h_new
        else:
            m_t = mask[:, t : t + 1].astype(np.float64)
            h = m_t * h_new + (1.0 - m_t) * h
        outputs[t] = ad.reshape(h, (B, 1, hidden))
    return ad.concat(outputs, axis=1)


def bigru(x, mask, store, prefix, layers, width):
    """Stacked bidirectional GRU; per-direction hidden size width/2,
    directions concatenated per step so every layer emits width channels."""
    half = width // 2
    out = x
    for k in range(layers):
        fw = gru_direction(out, mask, store, f"{prefix}.l{k}.fw", half)
        bw = gru_direction(out, mask, store, f"{prefix}.l{k}.bw", half, reverse=True)
        out = ad.concat([fw, bw], axis=2)
    return out


def encode_video(sampled, store, layers, width, prefix="video_gru"):
    return bigru(sampled, None, store, prefix, layers, width)


def encode_query(token_vectors, mask, store, layers, width, prefix="query_gru"):
    """Contextual query encoding; padded rows are exactly zero afterwards."""
    out = bigru(token_vectors, mask, store, prefix, layers, width)
    return out * mask[:, :, None].astype(np.float64)
