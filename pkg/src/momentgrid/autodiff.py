"""Reverse-mode automatic differentiation over numpy arrays.

Everything downstream (the recurrent encoders, co-attention, candidate maps,
the grid convolution stack) is written in terms of the ops in this module,
so the finite-difference suites in tests/ certify these backward rules once
and the composed network inherits them.

Conventions:
  * all floating tensors are float64; integer index arrays (token ids,
    gather indices) stay plain numpy arrays and never enter the tape;
  * ops accept Tensor or array-like for any operand -- non-Tensor operands
    are constants and receive no gradient;
  * a Tensor records its parents and a vjp closure; ``backward()`` walks
    the tape once in reverse topological order, accumulating into ``grad``.
"""

from __future__ import annotations

import numpy as np
from scipy import fft as _sfft
from scipy.special import expit as _expit

DTYPE = np.float64


def _asarray(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    # make `ndarray <op> Tensor` dispatch to the Tensor reflected methods
    __array_ufunc__ = None

    def __init__(self, data, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable Tensor's .grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)

        # iterative post-order DFS (graphs are deep: per-step recurrences)
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, pgrad in node._vjp(node.grad):
                if pgrad is None:
                    continue
                # adopt the first contribution by reference; later ones build
                # a fresh array, so no shared buffer is ever mutated in place
                if parent.grad is None:
                    parent.grad = pgrad
                else:
                    parent.grad = parent.grad + pgrad

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _make(data, parents, vjp):
    return Tensor(data, _parents=tuple(parents), _vjp=vjp)


def _binary(a, b, out_data, grad_a, grad_b):
    """Assemble a binary op from the two one-sided gradient closures."""
    parents, slots = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        slots.append(("a", a))
    if isinstance(b, Tensor):
        parents.append(b)
        slots.append(("b", b))
    if not parents:
        return Tensor(out_data)

    def vjp(g):
        out = []
        for side, t in slots:
            fn = grad_a if side == "a" else grad_b
            out.append((t, _unbroadcast(fn(g), t.data.shape)))
        return out

    return _make(out_data, parents, vjp)


# -- arithmetic -----------------------------------------------------------


def add(a, b):
    ad, bd = _asarray(a), _asarray(b)
    return _binary(a, b, ad + bd, lambda g: g, lambda g: g)


def sub(a, b):
    ad, bd = _asarray(a), _asarray(b)
    return _binary(a, b, ad - bd, lambda g: g, lambda g: -g)


def mul(a, b):
    ad, bd = _asarray(a), _asarray(b)
    return _binary(a, b, ad * bd, lambda g: g * bd, lambda g: g * ad)


def div(a, b):
    ad, bd = _asarray(a), _asarray(b)
    out = ad / bd
    return _binary(a, b, out, lambda g: g / bd, lambda g: -g * ad / (bd * bd))


def power(a, exponent):
    ad = _asarray(a)
    out = ad**exponent

    def vjp(g):
        return [(a, _unbroadcast(g * exponent * ad ** (exponent - 1), ad.shape))]

    return _make(out, [a], vjp) if isinstance(a, Tensor) else Tensor(out)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting; operands must be >=2-D."""
    ad, bd = _asarray(a), _asarray(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = ad @ bd

    def grad_a(g):
        return _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)

    def grad_b(g):
        return _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)

    return _binary(a, b, out, grad_a, grad_b)


def linear(x, w, b=None):
    """x @ w (+ b) over the last axis, flattening leading axes so the
    underlying GEMM runs on well-shaped 2-D operands."""
    shape = x.shape
    flat = reshape(x, (-1, shape[-1])) if len(shape) != 2 else x
    out = flat @ w
    if b is not None:
        out = out + b
    if len(shape) != 2:
        out = reshape(out, shape[:-1] + (out.shape[-1],))
    return out


# -- elementwise nonlinearities -------------------------------------------


def relu(a):
    ad = _asarray(a)
    out = np.maximum(ad, 0.0)
    return _make(out, [a], lambda g: [(a, g * (ad > 0.0))])


def sigmoid(a):
    out = _expit(_asarray(a))
    return _make(out, [a], lambda g: [(a, g * out * (1.0 - out))])


def tanh(a):
    out = np.tanh(_asarray(a))
    return _make(out, [a], lambda g: [(a, g * (1.0 - out * out))])


def exp(a):
    out = np.exp(_asarray(a))
    return _make(out, [a], lambda g: [(a, g * out)])


def log(a):
    ad = _asarray(a)
    return _make(np.log(ad), [a], lambda g: [(a, g / ad)])


def sqrt(a):
    """Square root; the backward takes subgradient 0 at the origin (zero rows
    reach this through the l2 normalizations and are always masked anyway)."""
    out = np.sqrt(_asarray(a))
    safe = np.where(out == 0.0, np.inf, out)
    return _make(out, [a], lambda g: [(a, g * 0.5 / safe)])


def clip(a, lo, hi):
    """Clamp; gradient passes only where the input was strictly inside."""
    ad = _asarray(a)
    out = np.clip(ad, lo, hi)
    inside = (ad > lo) & (ad < hi)
    return _make(out, [a], lambda g: [(a, g * inside)])


def maximum(a, b):
    """Elementwise max; on ties the gradient routes to the first operand."""
    ad, bd = _asarray(a), _asarray(b)
    take_a = ad >= bd
    out = np.where(take_a, ad, bd)
    return _binary(a, b, out, lambda g: g * take_a, lambda g: g * ~take_a)


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape):
    ad = _asarray(a)
    return _make(ad.reshape(shape), [a], lambda g: [(a, g.reshape(ad.shape))])


def transpose(a, axes=None):
    ad = _asarray(a)
    out = np.transpose(ad, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, [a], lambda g: [(a, np.transpose(g, inv))])


def getitem(a, key):
    ad = _asarray(a)
    out = ad[key]

    def vjp(g):
        full = np.zeros_like(ad)
        full[key] = g
        return [(a, full)]

    return _make(out, [a], vjp)


def concat(tensors, axis=-1):
    datas = [_asarray(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = np.split(g, offsets[1:-1], axis=axis)
        return [(t, p) for t, p in zip(tensors, pieces) if isinstance(t, Tensor)]

    parents = [t for t in tensors if isinstance(t, Tensor)]
    return _make(out, parents, vjp)


def pad_axis(a, axis, before, after):
    """Zero-pad one axis."""
    ad = _asarray(a)
    widths = [(0, 0)] * ad.ndim
    widths[axis] = (before, after)
    out = np.pad(ad, widths)
    idx = [slice(None)] * ad.ndim
    idx[axis] = slice(before, before + ad.shape[axis])
    idx = tuple(idx)
    return _make(out, [a], lambda g: [(a, g[idx])])


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    ad = _asarray(a)
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return [(a, np.broadcast_to(g, ad.shape).copy())]
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return [(a, np.broadcast_to(g, ad.shape).copy())]

    return _make(out, [a], vjp)


def tmean(a, axis=None, keepdims=False):
    ad = _asarray(a)
    if axis is None:
        n = ad.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([ad.shape[i] for i in ax]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first argmax on ties."""
    ad = _asarray(a)
    out = ad.max(axis=axis, keepdims=keepdims)
    mx = out if keepdims else np.expand_dims(out, axis)
    eq = ad == mx
    first = eq & (np.cumsum(eq, axis=axis) == 1)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, g * first)]

    return _make(out, [a], vjp)


# -- gather -----------------------------------------------------------------


def embedding(table, ids):
    """Row gather: table (V, E) indexed by an integer array of any shape."""
    ids = np.asarray(ids)
    td = _asarray(table)
    out = td[ids]

    def vjp(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids, g)
        return [(table, gt)]

    return _make(out, [table], vjp)


# -- grouped 2-D convolution -------------------------------------------------


def _rfft2(x, size):
    return _sfft.rfftn(x, s=(size, size), axes=(-2, -1))


def _irfft2(x, size):
    return _sfft.irfftn(x, s=(size, size), axes=(-2, -1))


def conv2d_grouped(x, w, b=None, padding=0, groups=1, method="auto"):
    """Grouped 2-D cross-correlation over a channels-last grid.

    x: (B, H, W, C_in), w: (G, K, K, C_in/G, C_out/G), b: (C_out,) or None.
    `padding` must equal (K-1)//2 with K odd so the output stays (B, H, W).

    method "fft" computes the correlation in the frequency domain (fast at
    production grid sizes, exact to roundoff); "direct" slides the kernel
    explicitly and is exactly local, which the finite-difference harness
    needs so that dead kernel taps perturb nothing at all. "auto" picks
    "direct" for small grids. Both are pitted against a naive oracle in the
    tests and against each other.
    """
    xd, wd = _asarray(x), _asarray(w)
    B, H, W, C = xd.shape
    G, K, K2, cin, cout = wd.shape
    if K != K2 or K % 2 == 0 or padding != (K - 1) // 2:
        raise ValueError("kernel must be odd with padding=(K-1)//2")
    if G != groups or C != G * cin:
        raise ValueError("weight shape does not match groups/channels")
    if method == "auto":
        method = "direct" if H * W <= 64 else "fft"
    if method == "direct":
        return _conv2d_grouped_direct(x, w, b, xd, wd, padding)
    if method != "fft":
        raise ValueError(f"unknown conv method {method!r}")

    S = _sfft.next_fast_len(max(H, W) + K - 1, real=True)
    # channels-first per group: (B, G, cin, H, W)
    xc = xd.transpose(0, 3, 1, 2).reshape(B, G, cin, H, W)
    Xf = _rfft2(xc, S)
    # cross-correlation == convolution with a spatially flipped kernel
    Wf = _rfft2(wd[:, ::-1, ::-1].transpose(0, 3, 4, 1, 2), S)  # (G,cin,cout,S,S2)
    Yf = np.einsum("bgchw,gcdhw->bgdhw", Xf, Wf)
    off = K - 1 - padding
    y = _irfft2(Yf, S)[..., off : off + H, off : off + W]
    y = np.ascontiguousarray(y.reshape(B, G * cout, H, W).transpose(0, 2, 3, 1))
    if b is not None:
        bd = _asarray(b)
        y = y + bd

    parents = [t for t in (x, w, b) if isinstance(t, Tensor)]

    def vjp(g):
        out = []
        gc = g.transpose(0, 3, 1, 2).reshape(B, G, cout, H, W)
        Gf = _rfft2(gc, S)
        if isinstance(x, Tensor):
            # dL/dX[r] = sum_p gY[p] W[r - p + padding]: full convolution of
            # gY with the unflipped kernel, window offset `padding`
            Wf2 = _rfft2(wd.transpose(0, 3, 4, 1, 2), S)  # (G,cin,cout,S,S2)
            Xg = _irfft2(np.einsum("bgdhw,gcdhw->bgchw", Gf, Wf2), S)
            gx = Xg[..., padding : padding + H, padding : padding + W]
            out.append((x, gx.reshape(B, C, H, W).transpose(0, 2, 3, 1)))
        if isinstance(w, Tensor):
            # dL/dW[u,v] = sum_p gY[p] X[p + u - padding]: correlate gY with X;
            # lag (u - padding) maps to circular index (u - padding) mod S
            Cf = np.einsum("bgchw,bgdhw->gcdhw", Xf, np.conj(Gf))
            corr = _irfft2(Cf, S)
            lags = (np.arange(K) - padding) % S
            gw = corr[..., lags[:, None], lags[None, :]]  # (G,cin,cout,K,K)
            out.append((w, gw.transpose(0, 3, 4, 1, 2)))
        if b is not None and isinstance(b, Tensor):
            out.append((b, g.sum(axis=(0, 1, 2))))
        return out

    return _make(y, parents, vjp)


def _conv2d_grouped_direct(x, w, b, xd, wd, padding):
    """Sliding-window path: one shifted batched product per kernel tap."""
    B, H, W, C = xd.shape
    G, K, _, cin, cout = wd.shape
    p = padding
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    xpg = xp.reshape(B, H + 2 * p, W + 2 * p, G, cin)
    y = np.zeros((B, H, W, G, cout))
    for u in range(K):
        for v in range(K):
            xs = xpg[:, u : u + H, v : v + W]
            y += np.einsum("bhwgc,gcd->bhwgd", xs, wd[:, u, v])
    y = y.reshape(B, H, W, G * cout)
    if b is not None:
        y = y + _asarray(b)

    parents = [t for t in (x, w, b) if isinstance(t, Tensor)]

    def vjp(g):
        out = []
        gg = g.reshape(B, H, W, G, cout)
        if isinstance(x, Tensor):
            gxp = np.zeros_like(xpg)
            for u in range(K):
                for v in range(K):
                    gxp[:, u : u + H, v : v + W] += np.einsum(
                        "bhwgd,gcd->bhwgc", gg, wd[:, u, v]
                    )
            gx = gxp.reshape(B, H + 2 * p, W + 2 * p, C)[:, p : p + H, p : p + W]
            out.append((x, gx))
        if isinstance(w, Tensor):
            gw = np.empty_like(wd)
            for u in range(K):
                for v in range(K):
                    gw[:, u, v] = np.einsum(
                        "bhwgc,bhwgd->gcd", xpg[:, u : u + H, v : v + W], gg
                    )
            out.append((w, gw))
        if b is not None and isinstance(b, Tensor):
            out.append((b, g.sum(axis=(0, 1, 2))))
        return out

    return _make(y, parents, vjp)


# -- span max map -------------------------------------------------------------


def span_max_map(v):
    """Upper-triangular map of running maxima over clip spans.

    v: (B, T, C) -> (B, T, T, C) where out[b, i, j] = max over rows i..j of
    v[b] for i <= j, and exactly zero below the diagonal. Computed with the
    incremental sweep out[i, j] = max(out[i, j-1], v[j]).
    """
    vd = _asarray(v)
    B, T, C = vd.shape
    out = np.zeros((B, T, T, C), dtype=vd.dtype)
    argmax = np.zeros((B, T, T, C), dtype=np.int32)
    ii = np.arange(T)
    out[:, ii, ii] = vd
    argmax[:, ii, ii] = ii[None, :, None]
    for off in range(1, T):
        i = np.arange(T - off)
        prev = out[:, i, i + off - 1]  # (B, T-off, C)
        new = vd[:, i + off]
        take_prev = prev >= new
        out[:, i, i + off] = np.where(take_prev, prev, new)
        argmax[:, i, i + off] = np.where(
            take_prev, argmax[:, i, i + off - 1], (i + off)[None, :, None]
        )

    def vjp(g):
        gv = np.zeros_like(vd)
        iu, ju = np.triu_indices(T)
        # scatter each upper-triangle gradient onto its winning clip row
        src = argmax[:, iu, ju, :]  # (B, n_upper, C)
        gsel = g[:, iu, ju, :]
        bidx = np.arange(B)[:, None, None]
        cidx = np.arange(C)[None, None, :]
        np.add.at(gv, (bidx, src, cidx), gsel)
        return [(v, gv)]

    return _make(out, [v], vjp) if isinstance(v, Tensor) else Tensor(out)


# -- masked batch normalization ----------------------------------------------


def masked_batch_norm(x, gamma, beta, mask, eps=1e-5):
    """Per-channel batch norm with statistics taken over masked-in positions.

    x: (B, H, W, C); mask: (H, W) or (B, H, W) of {0,1}; gamma, beta: (C,).
    All positions are normalized with the masked statistics (callers re-zero
    masked-out blocks afterwards). Returns (y, batch_mean, batch_var); the
    variance is the biased estimate actually used for normalization.
    """
    xd = _asarray(x)
    gd, bd = _asarray(gamma), _asarray(beta)
    m = np.asarray(mask, dtype=DTYPE)
    if m.ndim == 2:
        m = np.broadcast_to(m[None], xd.shape[:3])
    mw = m[..., None]
    n = m.sum()
    if n < 1:
        raise ValueError("mask selects no positions")
    mean = (xd * mw).sum(axis=(0, 1, 2)) / n
    var = (((xd - mean) ** 2) * mw).sum(axis=(0, 1, 2)) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    y = xhat * gd + bd

    parents = [t for t in (x, gamma, beta) if isinstance(t, Tensor)]

    def vjp(g):
        out = []
        if isinstance(gamma, Tensor):
            out.append((gamma, (g * xhat).sum(axis=(0, 1, 2))))
        if isinstance(beta, Tensor):
            out.append((beta, g.sum(axis=(0, 1, 2))))
        if isinstance(x, Tensor):
            gxh = g * gd
            # statistics only depend on masked-in positions
            s1 = (gxh * mw).sum(axis=(0, 1, 2)) / n
            s2 = (gxh * xhat * mw).sum(axis=(0, 1, 2)) / n
            gx = inv * (gxh - mw * (s1 + xhat * s2))
            out.append((x, gx))
        return out

    return _make(y, parents, vjp), mean, var
