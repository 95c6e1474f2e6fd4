"""Optimization loop, checkpoint container, and the gradient harness.

Checkpoint format (little-endian): magic b"MGPC", uint32 version, uint32
config length + that many bytes of dotted-key config text, uint32 record
count, then per record: uint32 name length, name (utf-8), uint32 ndim,
ndim uint32 dims, float32 row-major payload. Records hold every model array
(parameters and batch-norm buffers) under its hierarchical name, the Adam
moments under "optim.m."/"optim.v.", and the scalars "optim.step" and
"train.epoch".
"""

from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .config import format_configs, load_configs
from .data import make_batch, tokenize
from .errors import FormatError, MomentGridError
from .losses import alignment_loss, scale_labels
from .model import MomentRetrievalModel

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
CHECKPOINT_MAGIC = b"MGPC"
CHECKPOINT_VERSION = 1


class Adam:
    def __init__(self, store, lr):
        self.store = store
        self.lr = lr
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.trainable_items()}

    def step(self):
        self.step_count += 1
        b1c = 1.0 - ADAM_BETA1**self.step_count
        b2c = 1.0 - ADAM_BETA2**self.step_count
        for name, t in self.store.trainable_items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# -- batching -----------------------------------------------------------------


def prepare_samples(annotations, features, vocab, l_max):
    """Tokenize queries once; returns a list of per-sample dicts."""
    index = {t: i for i, t in enumerate(vocab)}
    return [
        {
            "annotation": a,
            "feats": np.asarray(features[a.video_id], dtype=np.float64),
            "ids": tokenize(a.query, index, max_len=l_max),
        }
        for a in annotations
    ]


def assemble_batch(samples, model):
    ids, mask, feats = make_batch(
        [s["ids"] for s in samples], [s["feats"] for s in samples]
    )
    labels = np.stack(
        [
            scale_labels(
                model.grid_for(s["annotation"].duration),
                s["annotation"].gt_span,
                model.config.theta_min,
                model.config.theta_max,
            )
            for s in samples
        ]
    )
    return feats, ids, mask, labels


# -- training loop --------------------------------------------------------------


def train(model, dataset, train_cfg, log_fn=None):
    """Adam over the mean alignment loss; deterministic given the seed.

    dataset: (annotations, {video_id: feats}, vocab). Returns the per-epoch
    mean loss list. Raises MomentGridError on a non-finite loss, naming the
    first parameter with a non-finite gradient.
    """
    train_cfg.validate()
    annotations, features, vocab = dataset
    if not annotations:
        raise MomentGridError("training dataset is empty")
    samples = prepare_samples(annotations, features, vocab, model.config.L_max)
    optimizer = Adam(model.store, train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    grid = model.grid

    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for lo in range(0, len(order), train_cfg.batch_size):
            batch = [samples[i] for i in order[lo : lo + train_cfg.batch_size]]
            feats, ids, mask, labels = assemble_batch(batch, model)
            scores = model.forward(feats, ids, mask, training=True, update_stats=True)
            loss = alignment_loss(scores, labels, grid)
            value = loss.data.item()
            model.store.zero_grad()
            loss.backward()
            if not np.isfinite(value):
                for name, t in model.store.trainable_items():
                    if t.grad is not None and not np.isfinite(t.grad).all():
                        raise MomentGridError(
                            f"non-finite loss; first bad gradient: {name!r}"
                        )
                raise MomentGridError("non-finite loss with finite gradients")
            optimizer.step()
            losses.append(value)
        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        if log_fn is not None:
            log_fn(f"epoch {epoch} loss {mean_loss:.6f}")
    return history, optimizer


# -- checkpoint container ---------------------------------------------------------


def _write_record(fh, name, array):
    data = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(path, model, train_cfg, eval_cfg, optimizer=None, epoch=0):
    records = dict(model.store.state_arrays())
    if optimizer is not None:
        for name, arr in optimizer.m.items():
            records[f"optim.m.{name}"] = arr
        for name, arr in optimizer.v.items():
            records[f"optim.v.{name}"] = arr
        records["optim.step"] = np.array([optimizer.step_count], dtype=np.float64)
    records["train.epoch"] = np.array([epoch], dtype=np.float64)
    config_text = format_configs(model.config, train_cfg, eval_cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records.items():
            _write_record(fh, name, arr)


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated checkpoint")
    return buf


def read_checkpoint(path):
    """Returns (model_cfg, train_cfg, eval_cfg, {name: float32 array})."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
        cfg_text = _read_exact(fh, cfg_len, path).decode("utf-8")
        (n_records,) = struct.unpack("<I", _read_exact(fh, 4, path))
        records = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            count = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 4 * count, path)
            records[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    model_cfg, train_cfg, eval_cfg = load_configs(text=cfg_text)
    return model_cfg, train_cfg, eval_cfg, records


def load_model(path):
    """Rebuild a model (and its configs) from a checkpoint file."""
    model_cfg, train_cfg, eval_cfg, records = read_checkpoint(path)
    model = MomentRetrievalModel(model_cfg, seed=0)
    model.store.load_state(
        {n: records[n] for n in model.store.names()}
    )
    epoch = int(records.get("train.epoch", np.zeros(1))[0])
    return model, train_cfg, eval_cfg, epoch


# -- finite-difference harness -----------------------------------------------------


def default_check_config():
    from .config import ModelConfig

    return ModelConfig(
        T=4, C=32, L_max=3, D_v=8, vocab_size=8, word_dim=12,
        gru_layers=2, comparison_blocks=4, groups=4, kernel=7, padding=3,
    )


def make_check_sample(config, seed=0):
    """Deterministic two-sample batch; the second query is padded so the
    mask-exclusion paths carry real gradient traffic."""
    rng = np.random.default_rng(seed)
    B, L = 2, config.L_max
    feats = rng.standard_normal((B, config.T, config.D_v))
    ids = rng.integers(2, config.vocab_size, size=(B, L))
    mask = np.ones((B, L), dtype=bool)
    mask[1, L - 1 :] = False
    ids[~mask] = 0
    duration = float(config.T)
    spans = []
    for _ in range(B):
        a, b = sorted(rng.uniform(0, duration, size=2))
        spans.append((a, max(b, a + 0.5)))
    return feats, ids, mask, spans


def grad_check(model=None, sample=None, epsilon=5e-5, n_coords=200, seed=0):
    """Max relative error between analytic parameter gradients and central
    finite differences of the full pipeline loss, over a random subset of
    at least `n_coords` trainable coordinates. Denominator is
    max(|analytic|, |numeric|, 1e-8). Runs the network in training mode
    (batch statistics) without touching the running averages.

    The default step balances two failure modes of central differences on a
    piecewise-smooth network: much smaller steps push the loss's roundoff
    (about 1 ulp of |loss| per evaluation) above the 1e-8 denominator floor
    on near-dead coordinates, much larger steps start crossing relu/argmax
    kinks.
    """
    if model is None:
        model = MomentRetrievalModel(default_check_config(), seed=seed)
    if sample is None:
        sample = make_check_sample(model.config, seed=seed)
    feats, ids, mask, spans = sample
    grid = model.grid_for(float(model.config.T))
    labels = np.stack(
        [
            scale_labels(grid, span, model.config.theta_min, model.config.theta_max)
            for span in spans
        ]
    )

    def loss_value():
        scores = model.forward(feats, ids, mask, training=True, update_stats=False)
        return alignment_loss(scores, labels, grid)

    loss = loss_value()
    model.store.zero_grad()
    loss.backward()

    entries = model.store.trainable_items()
    sizes = np.array([t.data.size for _, t in entries])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat_idx in chosen:
        p = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name, tensor = entries[p]
        local = int(flat_idx - offsets[p])
        idx = np.unravel_index(local, tensor.data.shape)
        analytic = 0.0 if tensor.grad is None else float(tensor.grad[idx])
        orig = tensor.data[idx]
        tensor.data[idx] = orig + epsilon
        plus = loss_value().data.item()
        tensor.data[idx] = orig - epsilon
        minus = loss_value().data.item()
        tensor.data[idx] = orig
        numeric = (plus - minus) / (2.0 * epsilon)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
