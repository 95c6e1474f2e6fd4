"""Annotations, clip features, word vectors, batching, and synthetic data.

File formats (all little-endian / UTF-8):
  * annotations: one record per line, whitespace separated:
        video_id duration start end query-tokens...
  * clip features: magic b"MGPF", uint32 T_V, uint32 D_v, then
    T_V * D_v float32 row-major;
  * word vectors: GloVe text format, "token v1 ... v300" per line;
  * vocabulary: one token per line, line number = id, ids 0/1 reserved
    for pad/unk.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParseError, ValidationError

PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

FEATURE_MAGIC = b"MGPF"

# the synthetic token codebook is seeded by a constant (not the dataset seed)
# so train/test splits generated separately still share token semantics
_CODEBOOK_SEED = 20107


@dataclass(frozen=True)
class Annotation:
    video_id: str
    duration: float
    gt_span: tuple
    query: str

    def __post_init__(self):
        s, e = self.gt_span
        if not (0.0 <= s < e <= self.duration):
            raise ValidationError(
                f"{self.video_id}: span ({s}, {e}) outside duration {self.duration}"
            )


@dataclass(frozen=True)
class ClipFeatureSequence:
    video_id: str
    feats: np.ndarray  # (T_V, D_v) float32

    def __post_init__(self):
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise ValidationError(f"{self.video_id}: features must be (T_V, D_v)")
        if not np.isfinite(self.feats).all():
            raise ValidationError(f"{self.video_id}: non-finite feature values")


# -- annotations ------------------------------------------------------------


def parse_annotation_line(line, lineno):
    parts = line.split()
    if len(parts) < 5:
        raise ParseError(f"line {lineno}: expected 'id dur start end query...', got {line!r}")
    video_id = parts[0]
    try:
        duration, start, end = (float(p) for p in parts[1:4])
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric duration/start/end in {line!r}")
    query = " ".join(parts[4:])
    try:
        return Annotation(video_id, duration, (start, end), query)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from exc


def load_annotations(path):
    annotations = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                annotations.append(parse_annotation_line(line.strip(), lineno))
    return annotations


def save_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            s, e = a.gt_span
            fh.write(f"{a.video_id} {a.duration:g} {s:g} {e:g} {a.query}\n")


# -- clip features -----------------------------------------------------------


def write_features(path, feats):
    feats = np.ascontiguousarray(feats, dtype=np.float32)
    t_v, d_v = feats.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t_v, d_v))
        fh.write(feats.tobytes())


def load_features(path, video_id=None):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic, not a clip feature file")
        t_v, d_v = struct.unpack("<II", head[4:])
        payload = fh.read()
    expected = t_v * d_v * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    feats = np.frombuffer(payload, dtype="<f4").reshape(t_v, d_v)
    if video_id is None:
        video_id = os.path.splitext(os.path.basename(path))[0]
    return ClipFeatureSequence(video_id=video_id, feats=feats)


# -- vocabulary and word vectors ----------------------------------------------


def save_vocab(path, tokens):
    with open(path, "w", encoding="utf-8") as fh:
        for tok in tokens:
            fh.write(tok + "\n")


def load_vocab(path):
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
        raise FormatError(f"{path}: vocabulary must start with {PAD_TOKEN} {UNK_TOKEN}")
    return tokens


def build_vocab(queries):
    """Vocabulary over whitespace-lowercased tokens, in first-seen order."""
    tokens = [PAD_TOKEN, UNK_TOKEN]
    seen = set(tokens)
    for q in queries:
        for tok in q.lower().split():
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    return tokens


def load_word_vectors(path, vocab, dim=300, seed=0):
    """Embedding init matrix: file rows where available, seeded uniform
    (-0.1, 0.1) rows (in vocab order) for out-of-vocabulary tokens."""
    table = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise FormatError(
                        f"{path} line {lineno}: expected token + {dim} values, "
                        f"got {len(parts) - 1}"
                    )
                table[parts[0]] = np.asarray(parts[1:], dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = np.empty((len(vocab), dim), dtype=np.float64)
    for i, tok in enumerate(vocab):
        if tok in table:
            out[i] = table[tok]
        else:
            out[i] = rng.uniform(-0.1, 0.1, size=dim)
    return out


def tokenize(query, vocab, max_len=None):
    """Lowercased whitespace tokens mapped to vocabulary ids (unk for OOV)."""
    if not query or not query.strip():
        raise ValidationError("empty query")
    index = vocab if isinstance(vocab, dict) else {t: i for i, t in enumerate(vocab)}
    ids = [index.get(tok, UNK_ID) for tok in query.lower().split()]
    if max_len is not None:
        ids = ids[:max_len]
    return ids


def make_batch(token_id_lists, features_list=None, L=None):
    """Right-pad queries to L with the pad id; stack equal-shape features.

    Returns (ids (B, L) int64, mask (B, L) bool[, feats (B, T_V, D_v)]).
    """
    if L is None:
        L = max(len(ids) for ids in token_id_lists)
    B = len(token_id_lists)
    ids = np.full((B, L), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for r, lst in enumerate(token_id_lists):
        n = len(lst)
        ids[r, :n] = lst
        mask[r, :n] = True
    if features_list is None:
        return ids, mask
    shapes = {f.shape for f in features_list}
    if len(shapes) != 1:
        raise ValidationError(f"batch mixes feature shapes: {sorted(shapes)}")
    feats = np.stack([np.asarray(f, dtype=np.float64) for f in features_list])
    return ids, mask, feats


# -- synthetic planted-span benchmark -----------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int
    T_V: int = 16
    D_v: int = 64
    vocab_size: int = 50  # real tokens, excluding pad/unk
    query_len_range: tuple = (3, 8)
    span_len_range: tuple = (0.2, 0.5)  # fraction of the video duration
    noise_std: float = 0.1
    seed: int = 0

    def validate(self):
        qmin, qmax = self.query_len_range
        smin, smax = self.span_len_range
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")
        if self.T_V < 1 or self.D_v < 1:
            raise ValidationError("T_V and D_v must be >= 1")
        if not (1 <= qmin <= qmax):
            raise ValidationError("query_len_range must be a non-empty range >= 1")
        if not (0.0 < smin <= smax <= 1.0):
            raise ValidationError("span_len_range must lie in (0, 1]")
        if self.vocab_size < qmax:
            raise ValidationError("vocab_size must cover the longest query")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        return self


def token_codebook(vocab_size, d_v):
    """Per-token signal directions, seeded independently of the dataset seed."""
    rng = np.random.default_rng(_CODEBOOK_SEED)
    return rng.standard_normal((vocab_size + 2, d_v))


def gen_synthetic(spec):
    """Planted-span dataset: clips inside the ground-truth span carry the mean
    of the query tokens' codebook rows (plus gaussian noise), clips outside
    are pure noise of matching scale.

    Returns (annotations, {video_id: feats float32}, vocab).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    codebook = token_codebook(spec.vocab_size, spec.D_v)
    vocab = [PAD_TOKEN, UNK_TOKEN] + [f"w{k:03d}" for k in range(spec.vocab_size)]

    annotations, features = [], {}
    duration = float(spec.T_V)
    qmin, qmax = spec.query_len_range
    smin, smax = spec.span_len_range
    for idx in range(spec.num_samples):
        n_q = int(rng.integers(qmin, qmax + 1))
        toks = rng.choice(spec.vocab_size, size=n_q, replace=False)
        token_ids = toks + 2
        query = " ".join(vocab[t] for t in token_ids)

        frac = rng.uniform(smin, smax)
        span_clips = max(1, round(frac * spec.T_V))
        start_clip = int(rng.integers(0, spec.T_V - span_clips + 1))
        gt = (float(start_clip), float(start_clip + span_clips))

        signal = codebook[token_ids].mean(axis=0)
        # out-of-span scale matches the expected in-span row energy so the
        # span is not separable by norm alone
        out_scale = np.sqrt(np.mean(signal**2) + spec.noise_std**2)
        feats = rng.standard_normal((spec.T_V, spec.D_v)) * out_scale
        inside = slice(start_clip, start_clip + span_clips)
        feats[inside] = signal + rng.standard_normal(
            (span_clips, spec.D_v)
        ) * spec.noise_std

        video_id = f"v{idx:04d}"
        annotations.append(Annotation(video_id, duration, gt, query))
        features[video_id] = feats.astype(np.float32)
    return annotations, features, vocab


def write_dataset(dirpath, annotations, features, vocab):
    os.makedirs(os.path.join(dirpath, "features"), exist_ok=True)
    save_annotations(os.path.join(dirpath, "annotations.txt"), annotations)
    save_vocab(os.path.join(dirpath, "vocab.txt"), vocab)
    for vid, feats in features.items():
        write_features(os.path.join(dirpath, "features", f"{vid}.mgpf"), feats)


def load_dataset(dirpath):
    """Returns (annotations, {video_id: feats}, vocab) from a dataset dir."""
    annotations = load_annotations(os.path.join(dirpath, "annotations.txt"))
    vocab = load_vocab(os.path.join(dirpath, "vocab.txt"))
    features, missing = {}, []
    for a in annotations:
        if a.video_id not in features:
            fpath = os.path.join(dirpath, "features", f"{a.video_id}.mgpf")
            if not os.path.exists(fpath):
                missing.append(a.video_id)
                continue
            features[a.video_id] = load_features(fpath, a.video_id).feats
    if missing:
        raise FormatError(f"missing feature files for videos: {missing}")
    return annotations, features, vocab
