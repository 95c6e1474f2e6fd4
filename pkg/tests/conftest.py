import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(fn, arrays, eps=1e-6, probes=10, rng=None):
    """Max relative error between fn's analytic grads and central differences.

    fn(arrays) must return (scalar Tensor, [Tensor leaves matching arrays]).
    Probes `probes` random coordinates per array. The relative error uses
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    rng = rng or np.random.default_rng(0)
    out, leaves = fn(arrays)
    out.backward()
    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        for _ in range(probes):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            plus = fn(arrays)[0].data.item()
            arr[idx] = orig - eps
            minus = fn(arrays)[0].data.item()
            arr[idx] = orig
            numeric = (plus - minus) / (2 * eps)
            analytic = leaf.grad[idx]
            err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, err)
    return worst
