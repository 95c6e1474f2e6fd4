"""Top-K span extraction with NMS, the R@n/IoU=m metric, parameter audit.

Prediction dump format: one line per kept prediction,
"video_id k score start_s end_s" with k the 1-based rank and the three
numbers printed with six decimals, so an independent script can recompute
every metric from the file.
"""

from __future__ import annotations

import time

import numpy as np

from .data import make_batch, tokenize
from .errors import ParseError, ValidationError
from .grid import temporal_iou

_SENTINEL = None


def topk_predictions(scores, grid, k, nms_threshold=0.49):
    """Greedy non-maximum suppression over the valid blocks.

    scores: (T, T) array. Blocks are visited by descending score, ties by
    earlier start then shorter span; a span is dropped when its IoU with an
    already-kept span exceeds `nms_threshold`. Returns up to k
    (score, MomentSpan) pairs.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = np.asarray(scores)
    blocks = grid.valid_blocks()
    order = sorted(
        range(len(blocks)),
        key=lambda n: (-scores[blocks[n, 0], blocks[n, 1]], blocks[n, 0],
                       blocks[n, 1] - blocks[n, 0]),
    )
    kept = []
    for n in order:
        i, j = blocks[n]
        span = grid.span_of(i, j)
        if any(temporal_iou(span, s) > nms_threshold for _, s in kept):
            continue
        kept.append((float(scores[i, j]), span))
        if len(kept) == k:
            break
    return kept


def recall_at(predictions_per_sample, gt_spans, n, m):
    """Fraction of samples whose top-n predictions contain a span with
    IoU >= m against the ground truth."""
    if n < 1 or not 0.0 < m <= 1.0:
        raise ValidationError("need n >= 1 and m in (0, 1]")
    hits = 0
    for preds, gt in zip(predictions_per_sample, gt_spans):
        if any(temporal_iou(span, gt) >= m for _, span in preds[:n]):
            hits += 1
    return hits / len(gt_spans) if gt_spans else 0.0


def param_count(model):
    """Total element count over the model's learnable arrays."""
    return model.store.n_params()


def param_breakdown(model):
    """Audit table rows (name, shape, count) covering every learnable array."""
    return model.store.breakdown()


def format_param_table(model):
    rows = param_breakdown(model)
    width = max(len(r[0]) for r in rows)
    lines = [f"{name:<{width}}  {str(shape):<20} {count:>10}" for name, shape, count in rows]
    lines.append(f"{'total':<{width}}  {'':<20} {param_count(model):>10}")
    return "\n".join(lines)


def predict_dataset(model, dataset, eval_cfg, batch_size=32):
    """Eval-mode pass over a dataset; per-sample top-k spans after NMS.

    Returns (annotations, predictions) with predictions[i] the kept
    (score, span) list for annotations[i].
    """
    annotations, features, vocab = dataset
    index = {t: i for i, t in enumerate(vocab)}
    k = max(eval_cfg.top_ns)
    predictions = [_SENTINEL] * len(annotations)

    by_shape = {}  # only equal-shape feature runs can stack into one pass
    for i, a in enumerate(annotations):
        by_shape.setdefault(features[a.video_id].shape, []).append(i)
    for group in by_shape.values():
        for lo in range(0, len(group), batch_size):
            part = group[lo : lo + batch_size]
            ids, mask, feats = make_batch(
                [tokenize(annotations[i].query, index, model.config.L_max)
                 for i in part],
                [np.asarray(features[annotations[i].video_id], dtype=np.float64)
                 for i in part],
            )
            scores = model.forward(feats, ids, mask, training=False).data
            for row, i in enumerate(part):
                grid = model.grid_for(annotations[i].duration)
                predictions[i] = topk_predictions(
                    scores[row], grid, k, eval_cfg.nms_threshold
                )
    return annotations, predictions


def metric_table(annotations, predictions, eval_cfg):
    gts = [a.gt_span for a in annotations]
    return {
        (n, m): recall_at(predictions, gts, n, m)
        for n in eval_cfg.top_ns
        for m in eval_cfg.iou_thresholds
    }


def evaluate(model, dataset, eval_cfg, batch_size=32, dump_path=None):
    """Deterministic full evaluation pass.

    Returns ({(n, m): recall}, wall_seconds); the timer is informational
    only. When dump_path is given the kept predictions are written there.
    """
    t0 = time.perf_counter()
    annotations, predictions = predict_dataset(model, dataset, eval_cfg, batch_size)
    table = metric_table(annotations, predictions, eval_cfg)
    elapsed = time.perf_counter() - t0
    if dump_path is not None:
        write_predictions(dump_path, annotations, predictions)
    return table, elapsed


def format_metric_table(table):
    lines = [f"R@{n},IoU={m:g} {table[(n, m)]:.6f}" for n, m in sorted(table)]
    return "\n".join(lines)


def write_predictions(path, annotations, predictions):
    with open(path, "w", encoding="utf-8") as fh:
        for a, preds in zip(annotations, predictions):
            for rank, (score, span) in enumerate(preds, 1):
                fh.write(
                    f"{a.video_id} {rank} {score:.6f} "
                    f"{span.start_s:.6f} {span.end_s:.6f}\n"
                )


def read_predictions(path):
    """Parse a prediction dump back into {video_id: [(score, (s, e)), ...]}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 5:
                raise ParseError(f"{path} line {lineno}: expected 5 fields")
            vid, rank, score, s, e = parts
            out.setdefault(vid, []).append((float(score), (float(s), float(e))))
    return out
