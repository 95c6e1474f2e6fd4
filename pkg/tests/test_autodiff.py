"""Finite-difference certification of every autodiff op's backward rule."""

import numpy as np
import pytest

from momentgrid import autodiff as ad
from conftest import central_diff

TOL = 1e-6


def wrap(arrays):
    return [ad.Tensor(a) for a in arrays]


def test_elementwise_chain(rng):
    x = rng.standard_normal((3, 5)) * 2

    def fn(arrays):
        (t,) = wrap(arrays)
        y = ad.tanh(t) * ad.sigmoid(t) + ad.exp(t * 0.3) - ad.relu(t - 0.2)
        return ad.tsum(y * y), [t]

    assert central_diff(fn, [x], rng=rng) < TOL


def test_log_sqrt_power(rng):
    x = np.abs(rng.standard_normal((4, 4))) + 0.5

    def fn(arrays):
        (t,) = wrap(arrays)
        y = ad.log(t) + ad.sqrt(t) + t**3.0
        return ad.tsum(y), [t]

    assert central_diff(fn, [x], rng=rng) < TOL


def test_div_broadcast(rng):
    a = rng.standard_normal((2, 3, 4))
    b = np.abs(rng.standard_normal((1, 3, 1))) + 1.0

    def fn(arrays):
        ta, tb = wrap(arrays)
        return ad.tsum(ta / tb + tb / 2.0), [ta, tb]

    assert central_diff(fn, [a, b], rng=rng) < TOL


def test_matmul_batched(rng):
    a = rng.standard_normal((3, 4, 5))
    b = rng.standard_normal((5, 6))

    def fn(arrays):
        ta, tb = wrap(arrays)
        return ad.tsum(ad.tanh(ta @ tb)), [ta, tb]

    assert central_diff(fn, [a, b], rng=rng) < TOL


def test_matmul_rejects_vectors():
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 2))))


def test_sum_mean_axes(rng):
    x = rng.standard_normal((2, 3, 4))

    def fn(arrays):
        (t,) = wrap(arrays)
        y = ad.tsum(t, axis=1) + ad.tmean(t, axis=(0, 1), keepdims=True).reshape((1, 4))
        return ad.tsum(y * y) + ad.tmean(t), [t]

    assert central_diff(fn, [x], rng=rng) < TOL


def test_amax_routes_to_first_on_ties():
    x = ad.Tensor(np.array([[1.0, 3.0, 3.0, 0.0]]))
    y = ad.amax(x, axis=1)
    y.backward(np.array([2.0]))
    assert np.array_equal(x.grad, [[0.0, 2.0, 0.0, 0.0]])


def test_maximum_ties_go_left():
    a = ad.Tensor(np.array([1.0, 2.0]))
    b = ad.Tensor(np.array([1.0, 0.0]))
    out = ad.maximum(a, b)
    out.backward(np.ones(2))
    assert np.array_equal(a.grad, [1.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 0.0])


def test_clip_gradient_zero_outside(rng):
    x = ad.Tensor(np.array([-2.0, 0.3, 2.0]))
    y = ad.clip(x, 0.0, 1.0)
    y.backward(np.ones(3))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_shape_ops(rng):
    x = rng.standard_normal((2, 3, 4))

    def fn(arrays):
        (t,) = wrap(arrays)
        y = ad.transpose(ad.reshape(t, (6, 4)), (1, 0))
        z = ad.concat([y, y * 2.0], axis=0)
        p = ad.pad_axis(z, 1, 2, 1)
        return ad.tsum(ad.sigmoid(p[1:5, :4])), [t]

    assert central_diff(fn, [x], rng=rng) < TOL


def test_getitem_scatter(rng):
    x = ad.Tensor(rng.standard_normal((4, 5)))
    y = x[1:3, ::2]
    y.backward(np.ones_like(y.data))
    expected = np.zeros((4, 5))
    expected[1:3, ::2] = 1.0
    assert np.array_equal(x.grad, expected)


def test_embedding_accumulates_repeated_ids(rng):
    table = ad.Tensor(rng.standard_normal((5, 3)))
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    out = ad.embedding(table, ids)
    assert out.shape == (2, 3, 3)
    out.backward(np.ones(out.shape))
    assert np.array_equal(table.grad[2], [3.0, 3.0, 3.0])
    assert np.array_equal(table.grad[0], [2.0, 2.0, 2.0])
    assert np.array_equal(table.grad[1], [0.0, 0.0, 0.0])


def test_grad_accumulates_across_reuse(rng):
    x = ad.Tensor(np.array([[2.0]]))
    y = x * 3.0 + x * x
    y.backward(np.ones((1, 1)))
    assert np.allclose(x.grad, 3.0 + 2.0 * 2.0)


def test_backward_needs_scalar_without_seed():
    x = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def naive_grouped_conv(x, w, b, padding, groups):
    B, H, W, C = x.shape
    G, K, _, cin, cout = w.shape
    y = np.zeros((B, H, W, G * cout))
    for bb in range(B):
        for h in range(H):
            for ww_ in range(W):
                for g in range(G):
                    for d in range(cout):
                        acc = 0.0
                        for u in range(K):
                            for v in range(K):
                                hh, vv = h + u - padding, ww_ + v - padding
                                if 0 <= hh < H and 0 <= vv < W:
                                    for c in range(cin):
                                        acc += x[bb, hh, vv, g * cin + c] * w[g, u, v, c, d]
                        y[bb, h, ww_, g * cout + d] = acc
    if b is not None:
        y = y + b
    return y


@pytest.mark.parametrize("shape", [(1, 4, 4, 4, 2, 3), (2, 5, 5, 8, 4, 7)])
def test_conv2d_matches_naive_oracle(rng, shape):
    B, H, W, C, G, K = shape
    cg = C // G
    x = rng.standard_normal((B, H, W, C))
    w = rng.standard_normal((G, K, K, cg, cg))
    b = rng.standard_normal(C)
    out = ad.conv2d_grouped(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), padding=(K - 1) // 2, groups=G)
    ref = naive_grouped_conv(x, w, b, (K - 1) // 2, G)
    assert np.abs(out.data - ref).max() < 1e-10


def test_conv2d_gradients(rng):
    B, H, W, C, G, K = 2, 5, 5, 8, 4, 7
    cg = C // G
    x = rng.standard_normal((B, H, W, C))
    w = rng.standard_normal((G, K, K, cg, cg))
    b = rng.standard_normal(C)
    coef = rng.standard_normal((B, H, W, C))

    def fn(arrays):
        tx, tw, tb = wrap(arrays)
        y = ad.conv2d_grouped(tx, tw, tb, padding=(K - 1) // 2, groups=G)
        return ad.tsum(y * coef), [tx, tw, tb]

    assert central_diff(fn, [x, w, b], rng=rng) < TOL


def test_conv2d_group_isolation(rng):
    """Perturbing channels of one group only changes that group's outputs."""
    B, H, W, C, G, K = 1, 6, 6, 8, 4, 3
    cg = C // G
    x = rng.standard_normal((B, H, W, C))
    w = rng.standard_normal((G, K, K, cg, cg))
    base = ad.conv2d_grouped(ad.Tensor(x), ad.Tensor(w), None, padding=1, groups=G).data
    x2 = x.copy()
    x2[..., 2 * cg : 3 * cg] += 1.0  # perturb group 2 inputs
    new = ad.conv2d_grouped(ad.Tensor(x2), ad.Tensor(w), None, padding=1, groups=G).data
    delta = np.abs(new - base).max(axis=(0, 1, 2))
    for g in range(G):
        chunk = delta[g * cg : (g + 1) * cg]
        if g == 2:
            assert chunk.max() > 1e-3
        else:
            assert chunk.max() < 1e-12


def test_conv2d_validates_kernel_padding():
    x, w = ad.Tensor(np.ones((1, 4, 4, 4))), ad.Tensor(np.ones((2, 4, 4, 2, 2)))
    with pytest.raises(ValueError):
        ad.conv2d_grouped(x, w, None, padding=1, groups=2)


def brute_span_max(v):
    B, T, C = v.shape
    out = np.zeros((B, T, T, C))
    for b in range(B):
        for i in range(T):
            for j in range(i, T):
                out[b, i, j] = v[b, i : j + 1].max(axis=0)
    return out


def test_span_max_matches_bruteforce(rng):
    for _ in range(20):
        B, T, C = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 6)
        v = rng.standard_normal((B, T, C))
        out = ad.span_max_map(ad.Tensor(v))
        assert np.array_equal(out.data, brute_span_max(v))


def test_span_max_gradients(rng):
    v = rng.standard_normal((2, 5, 3))
    coef = rng.standard_normal((2, 5, 5, 3))

    def fn(arrays):
        (t,) = wrap(arrays)
        return ad.tsum(ad.span_max_map(t) * coef), [t]

    assert central_diff(fn, [v], rng=rng) < TOL


def test_masked_batch_norm_statistics(rng):
    x = rng.standard_normal((3, 4, 4, 6)) * 2 + 1
    mask = np.triu(np.ones((4, 4)))
    gamma, beta = np.ones(6), np.zeros(6)
    y, mean, var = ad.masked_batch_norm(ad.Tensor(x), ad.Tensor(gamma), ad.Tensor(beta), mask)
    sel = x[:, mask.astype(bool), :]
    assert np.allclose(mean, sel.mean(axis=(0, 1)))
    assert np.allclose(var, sel.var(axis=(0, 1)))
    norm = y.data[:, mask.astype(bool), :]
    assert np.abs(norm.mean(axis=(0, 1))).max() < 1e-10
    assert np.abs(norm.std(axis=(0, 1)) - 1.0).max() < 1e-3  # eps skews slightly


def test_masked_batch_norm_gradients(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    gamma = rng.standard_normal(4) + 1.5
    beta = rng.standard_normal(4)
    mask = np.triu(np.ones((3, 3)))
    coef = rng.standard_normal(x.shape) * mask[None, :, :, None]

    def fn(arrays):
        tx, tg, tb = wrap(arrays)
        y, _, _ = ad.masked_batch_norm(tx, tg, tb, mask)
        return ad.tsum(y * coef), [tx, tg, tb]

    assert central_diff(fn, [x, gamma, beta], rng=rng) < TOL


def test_masked_batch_norm_rejects_empty_mask():
    with pytest.raises(ValueError):
        ad.masked_batch_norm(
            ad.Tensor(np.ones((1, 2, 2, 3))),
            ad.Tensor(np.ones(3)),
            ad.Tensor(np.zeros(3)),
            np.zeros((2, 2)),
        )


def test_deep_chain_no_recursion_limit():
    x = ad.Tensor(np.ones((2, 2)))
    y = x
    for _ in range(3000):
        y = y * 1.0001
    ad.tsum(y).backward()
    assert x.grad is not None
