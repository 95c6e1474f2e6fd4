"""Named parameter store and initialization rules.

Initialization: affine/conv weights are uniform(-k, k) with k = 1/sqrt(fan_in)
and zero biases; recurrent weights are orthogonal via a seeded QR of a
gaussian draw (sign-fixed so the decomposition is unique). Everything is
addressable by hierarchical dotted name, which is also the checkpoint key.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class ParamStore:
    """Ordered mapping of dotted names to Tensors, trainable or buffer."""

    def __init__(self):
        self._tensors = {}
        self._trainable = {}

    def add(self, name, array, trainable=True):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64))
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def is_trainable(self, name):
        return self._trainable[name]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def n_params(self):
        """Total element count over trainable arrays."""
        return int(sum(t.data.size for _, t in self.trainable_items()))

    def breakdown(self):
        """Per-array audit rows: (name, shape, element count), trainable only."""
        return [(n, t.data.shape, int(t.data.size)) for n, t in self.trainable_items()]

    def state_arrays(self):
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, arrays):
        missing = set(self._tensors) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing arrays: {sorted(missing)[:5]}")
        for name, t in self._tensors.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: "
                    f"stored {incoming.shape}, expected {t.data.shape}"
                )
            t.data = incoming


def uniform_fan_in(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def orthogonal(rng, n):
    """Orthogonal n x n matrix from a sign-fixed QR of a gaussian draw."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def add_affine(store, rng, name, fan_in, fan_out):
    store.add(f"{name}.w", uniform_fan_in(rng, (fan_in, fan_out), fan_in))
    store.add(f"{name}.b", np.zeros(fan_out))


def add_conv1d(store, rng, name, kernel, cin, cout):
    store.add(f"{name}.w", uniform_fan_in(rng, (kernel, cin, cout), kernel * cin))
    store.add(f"{name}.b", np.zeros(cout))


def add_conv2d_grouped(store, rng, name, groups, kernel, cin_g, cout_g):
    fan_in = kernel * kernel * cin_g
    store.add(
        f"{name}.w",
        uniform_fan_in(rng, (groups, kernel, kernel, cin_g, cout_g), fan_in),
    )
    store.add(f"{name}.b", np.zeros(groups * cout_g))


def add_gru(store, rng, name, input_size, hidden):
    """One GRU direction: gate order (reset, update, candidate)."""
    store.add(f"{name}.w_ih", uniform_fan_in(rng, (3 * hidden, input_size), input_size))
    w_hh = np.concatenate([orthogonal(rng, hidden) for _ in range(3)], axis=0)
    store.add(f"{name}.w_hh", w_hh)
    store.add(f"{name}.b_ih", np.zeros(3 * hidden))
    store.add(f"{name}.b_hh", np.zeros(3 * hidden))


def add_embedding(store, rng, name, vocab, dim, init=None):
    """Word embedding table; rows default to the seeded uniform(-0.1, 0.1) rule."""
    table = rng.uniform(-0.1, 0.1, size=(vocab, dim)) if init is None else init
    store.add(name, table)


def add_batch_norm(store, name, channels):
    store.add(f"{name}.gamma", np.ones(channels))
    store.add(f"{name}.beta", np.zeros(channels))
    store.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
    store.add(f"{name}.running_var", np.ones(channels), trainable=False)
